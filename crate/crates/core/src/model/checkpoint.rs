//! Binary checkpoints.
//!
//! Layout: the line `DUGI1 <canonical config>`, then for each parameter the
//! lines `name`, `f64`, `d0,d1,…` followed by the raw little-endian values.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "DUGI1";
const DTYPE: &str = "f64";

fn write_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    out.extend_from_slice(format!("{name}\n{DTYPE}\n{}\n", shape.join(",")).as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn line(&mut self) -> Result<&str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header line is not UTF-8".into()))
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let name = self.line()?.to_string();
        let dtype = self.line()?;
        if dtype != DTYPE {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype `{dtype}`")));
        }
        let shape = self
            .line()?
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("`{name}`: malformed shape")))?;
        let n: usize = shape.iter().product();
        let bytes = self
            .buf
            .get(self.pos..self.pos + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: truncated values")))?;
        self.pos += 8 * n;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {}\n", self.config.canonical()).into_bytes();
        for (name, t) in self.params.iter() {
            write_block(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let header = r.line()?;
        let cfg_text = header
            .strip_prefix(MAGIC)
            .and_then(|s| s.strip_prefix(' '))
            .ok_or_else(|| Error::Checkpoint("missing DUGI1 header".into()))?;
        let config = ModelConfig::from_canonical(cfg_text)?;
        let template = Model::new(config.clone(), 0)?;
        let mut params = ParamSet::new();
        while !r.at_end() {
            let (name, t) = r.block()?;
            let expected = template
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if expected.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            params.insert(name, t)?;
        }
        if params.names() != template.params.names() {
            return Err(Error::Checkpoint("parameter list does not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf)
    }
}

/// Writes one named tensor in checkpoint block format.
pub fn write_grid(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    write_block(&mut out, name, t);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_grid(path: &Path) -> Result<(String, Tensor)> {
    let buf = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let block = r.block()?;
    if !r.at_end() {
        return Err(Error::Checkpoint("trailing bytes after grid".into()));
    }
    Ok(block)
}
