use std::fs;
use std::io::Write;
use std::path::Path;

use image::DynamicImage;

use super::GrayImage;
use crate::error::{Error, Result};

/// Reads a binary 8-bit PGM (P5) or a PNG. Color PNGs are reduced by
/// averaging the channels.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let img = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes, path)?
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)?
    } else {
        return Err(format_error(path, "expected a binary PGM (P5) or PNG file"));
    };
    Ok(img.with_source(path.display().to_string()))
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_error(path, "truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_error(path, "malformed PGM header"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval > 255 {
        return Err(format_error(
            path,
            format!("16-bit PGM (maxval {maxval}) is not supported; only 8-bit depth is"),
        ));
    }
    if maxval == 0 {
        return Err(format_error(path, "PGM maxval must be positive"));
    }
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_error(path, format!("PGM raster shorter than {width}x{height}")))?;
    GrayImage::new(height, width, raster.to_vec())
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| format_error(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<u8> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| average(&p.0)).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| average(&p.0[..3])).collect(),
        other => {
            return Err(format_error(
                path,
                format!(
                    "unsupported PNG depth {:?}; only 8-bit channels are read",
                    other.color()
                ),
            ))
        }
    };
    GrayImage::new(h, w, pixels)
}

fn average(channels: &[u8]) -> u8 {
    let sum: u32 = channels.iter().map(|&c| u32::from(c)).sum();
    ((sum as f64) / channels.len() as f64).round() as u8
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("pixel count matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| format_error(path, e.to_string()))
}

/// Writes PNG for a `.png` extension and PGM otherwise.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => save_png(img, path),
        _ => save_pgm(img, path),
    }
}
