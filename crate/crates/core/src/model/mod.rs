//! Hierarchical masked autoencoder with frequency-guided attention.
//!
//! Geometry: the mask lives on the stride-`s3` unit grid. Each visible unit
//! contributes 16 stage-1 tokens (stride `s1`, Z-order inside the unit),
//! 4 stage-2 tokens and 1 stage-3 token, so merging four consecutive rows
//! is always a spatial 2×2 merge. Stages 1 and 2 attend within their unit;
//! stage 3 attends globally over visible units.

mod checkpoint;
pub mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_grid, write_grid};
pub use layers::{frequency_guided_attention, multi_head_attention, sincos_2d, AttentionOutput};
pub use params::{Bound, ParamSet};

use crate::error::{Error, Result};
use crate::frequency::{afdm_on_tape, FilterVars, RadialFilterParams};
use crate::imaging::{GrayImage, LEVELS};
use crate::masking::{baseline_masks, MaskSelection, MaskStrategy, TokenGrid, TokenSource};
use crate::numerics::{tensor, FilterVariant, Tape, Tensor, Var};
use layers::{block, linear, mlp, norm};

/// Stage-1 tokens per unit.
pub const TOKENS_PER_UNIT: usize = 16;

/// Which encoder stage supplies the queries of the guidance blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DdgInput {
    #[default]
    Stage1,
    Stage3,
}

impl FromStr for DdgInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Self::Stage1),
            "stage3" => Ok(Self::Stage3),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ddg input stage `{s}` (expected stage1 or stage3)"
            ))),
        }
    }
}

impl fmt::Display for DdgInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stage1 => "stage1",
            Self::Stage3 => "stage3",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Nominal square input side; sets the initial filter radius.
    pub input_size: usize,
    pub patch_strides: [usize; 3],
    pub stage_depths: [usize; 3],
    pub embed_dims: [usize; 3],
    pub heads: [usize; 3],
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mask_lambda: f64,
    pub ddg_blocks: usize,
    pub ddg_input_stage: DdgInput,
    pub afdm_variant: FilterVariant,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch_strides: [4, 8, 16],
            stage_depths: [1, 1, 3],
            embed_dims: [32, 64, 96],
            heads: [1, 2, 4],
            decoder_depth: 2,
            decoder_dim: 128,
            decoder_heads: 4,
            mask_lambda: 0.75,
            ddg_blocks: 2,
            ddg_input_stage: DdgInput::Stage1,
            afdm_variant: FilterVariant::Notch,
            ln_eps: 1e-6,
        }
    }
}

fn parse_triple(value: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = value.split([',', '/']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated integers, got `{value}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a non-negative integer"))?;
    }
    Ok(out)
}

fn parse_num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn join(v: &[usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl ModelConfig {
    /// A small configuration for gradient checks on 32×32 inputs.
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            patch_strides: [4, 8, 16],
            stage_depths: [1, 1, 1],
            embed_dims: [8, 8, 8],
            heads: [1, 2, 2],
            decoder_depth: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            mask_lambda: 0.75,
            ddg_blocks: 2,
            ddg_input_stage: DdgInput::Stage1,
            afdm_variant: FilterVariant::Notch,
            ln_eps: 1e-6,
        }
    }

    pub const KEYS: [&'static str; 13] = [
        "input_size",
        "patch_strides",
        "stage_depths",
        "embed_dims",
        "heads",
        "decoder_depth",
        "decoder_dim",
        "decoder_heads",
        "mask_lambda",
        "ddg_blocks",
        "ddg_input_stage",
        "afdm_variant",
        "ln_eps",
    ];

    /// Sets one field from text. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "input_size" => self.input_size = parse_num(value)?,
            "patch_strides" => self.patch_strides = parse_triple(value)?,
            "stage_depths" => self.stage_depths = parse_triple(value)?,
            "embed_dims" => self.embed_dims = parse_triple(value)?,
            "heads" => self.heads = parse_triple(value)?,
            "decoder_depth" => self.decoder_depth = parse_num(value)?,
            "decoder_dim" => self.decoder_dim = parse_num(value)?,
            "decoder_heads" => self.decoder_heads = parse_num(value)?,
            "mask_lambda" => self.mask_lambda = parse_num(value)?,
            "ddg_blocks" => self.ddg_blocks = parse_num(value)?,
            "ddg_input_stage" => self.ddg_input_stage = value.parse().map_err(|e: Error| e.to_string())?,
            "afdm_variant" => self.afdm_variant = value.parse().map_err(|e: Error| e.to_string())?,
            "ln_eps" => self.ln_eps = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Space-separated `key=value` pairs in a fixed key order.
    pub fn canonical(&self) -> String {
        format!(
            "input_size={} patch_strides={} stage_depths={} embed_dims={} heads={} decoder_depth={} \
             decoder_dim={} decoder_heads={} mask_lambda={} ddg_blocks={} ddg_input_stage={} \
             afdm_variant={} ln_eps={}",
            self.input_size,
            join(&self.patch_strides),
            join(&self.stage_depths),
            join(&self.embed_dims),
            join(&self.heads),
            self.decoder_depth,
            self.decoder_dim,
            self.decoder_heads,
            self.mask_lambda,
            self.ddg_blocks,
            self.ddg_input_stage,
            self.afdm_variant,
            self.ln_eps,
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for pair in text.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed config entry `{pair}`")))?;
            match cfg.set(k, v) {
                Ok(true) => seen.push(k),
                Ok(false) => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
                Err(e) => return Err(Error::Checkpoint(format!("{k}: {e}"))),
            }
        }
        if let Some(k) = Self::KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Checkpoint(format!("config is missing `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let [s1, s2, s3] = self.patch_strides;
        if s1 == 0 || s2 != 2 * s1 || s3 != 2 * s2 {
            return bad(format!("patch strides must be s, 2s, 4s; got {s1}/{s2}/{s3}"));
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage needs at least one layer".into());
        }
        if self.embed_dims.windows(2).any(|w| w[1] < w[0]) || self.embed_dims[0] == 0 {
            return bad(format!(
                "embed dims must be positive and nondecreasing, got {:?}",
                self.embed_dims
            ));
        }
        if self.embed_dims.iter().any(|d| d % 4 != 0) || !self.decoder_dim.is_multiple_of(4) || self.decoder_dim == 0 {
            return bad("embedding widths must be multiples of 4 for sinusoidal positions".into());
        }
        for (d, h) in self.embed_dims.iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                return bad(format!("{h} heads do not divide width {d}"));
            }
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "{} decoder heads do not divide width {}",
                self.decoder_heads, self.decoder_dim
            ));
        }
        if self.decoder_depth == 0 || self.ddg_blocks == 0 {
            return bad("decoder depth and guidance block count must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_lambda) {
            return bad(format!("mask_lambda must lie in [0, 1), got {}", self.mask_lambda));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.pad_multiple()) {
            return bad(format!(
                "input_size must be a positive multiple of {}",
                self.pad_multiple()
            ));
        }
        Ok(())
    }

    /// Inputs are padded to multiples of twice the stage-3 stride.
    pub fn pad_multiple(&self) -> usize {
        2 * self.patch_strides[2]
    }

    pub fn unit(&self) -> usize {
        self.patch_strides[2]
    }

    fn ddg_dim(&self) -> usize {
        match self.ddg_input_stage {
            DdgInput::Stage1 => self.embed_dims[0],
            DdgInput::Stage3 => self.embed_dims[2],
        }
    }

    fn ddg_heads(&self) -> usize {
        match self.ddg_input_stage {
            DdgInput::Stage1 => self.heads[0],
            DdgInput::Stage3 => self.heads[2],
        }
    }

    fn ddg_stride(&self) -> usize {
        match self.ddg_input_stage {
            DdgInput::Stage1 => self.patch_strides[0],
            DdgInput::Stage3 => self.patch_strides[2],
        }
    }
}

/// Unit grid of a padded input and the part of it covering real pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitLayout {
    pub rows: usize,
    pub cols: usize,
    pub valid_rows: usize,
    pub valid_cols: usize,
}

impl UnitLayout {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Units that contain no original pixels.
    pub fn is_padding(&self, unit: usize) -> bool {
        unit / self.cols >= self.valid_rows || unit % self.cols >= self.valid_cols
    }
}

/// A unit-scaled, padded input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub layout: UnitLayout,
}

impl PreparedInput {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.pixels.clone()).unwrap()
    }
}

/// Position of stage-1 token `z` (Z-order) inside a 4×4 unit.
fn z_offset(z: usize) -> (usize, usize) {
    (((z >> 1) & 1) | (((z >> 3) & 1) << 1), (z & 1) | (((z >> 2) & 1) << 1))
}

/// Stage-1 grid coordinates of every token of the given units.
fn stage1_positions(layout: &UnitLayout, units: &[usize]) -> Vec<(usize, usize)> {
    units
        .iter()
        .flat_map(|&u| {
            let (ur, uc) = (u / layout.cols, u % layout.cols);
            (0..TOKENS_PER_UNIT).map(move |z| {
                let (r, c) = z_offset(z);
                (ur * 4 + r, uc * 4 + c)
            })
        })
        .collect()
}

fn unit_positions(layout: &UnitLayout, units: &[usize]) -> Vec<(usize, usize)> {
    units.iter().map(|&u| (u / layout.cols, u % layout.cols)).collect()
}

/// Visible encoder features, one tensor variable per stage.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[16·n, C1]`, `[4·n, C2]` and the normalized `[n, C3]`.
    pub stages: [Var; 3],
    pub visible: Vec<usize>,
}

/// Guidance block outputs.
#[derive(Clone, Debug)]
pub struct DdgOutput {
    pub out: Var,
    /// Pre-projection attention result of every block.
    pub attention: Vec<Var>,
    /// Per block, per head attention probabilities.
    pub probs: Vec<Vec<Var>>,
}

/// Everything produced by one masked forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub freq: Var,
    pub ddg: DdgOutput,
    /// `[#loss_units, s3²]` predictions, or `None` when nothing is masked.
    pub prediction: Option<Var>,
    /// Masked, non-padding units in ascending order.
    pub loss_units: Vec<usize>,
}

/// Multi-scale grids, each shaped `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let [c1, c2, c3] = c.embed_dims;
        let s1 = c.patch_strides[0];
        layers::register_linear(&mut ps, &mut rng, "enc.embed", s1 * s1, c1)?;
        for s in 0..3 {
            for i in 0..c.stage_depths[s] {
                layers::register_block(&mut ps, &mut rng, &format!("enc.s{}.b{i}", s + 1), c.embed_dims[s])?;
            }
            match s {
                0 => layers::register_linear(&mut ps, &mut rng, "enc.merge1", 4 * c1, c2)?,
                1 => layers::register_linear(&mut ps, &mut rng, "enc.merge2", 4 * c2, c3)?,
                _ => layers::register_norm(&mut ps, "enc.norm", c3)?,
            }
        }
        layers::register_linear(&mut ps, &mut rng, "pyramid.down", 4 * c3, c3)?;

        let init = RadialFilterParams::initial(c.input_size, c.input_size);
        ps.insert("afdm.alpha_raw", Tensor::scalar(init.alpha_raw))?;
        ps.insert("afdm.beta_raw", Tensor::scalar(init.beta_raw))?;
        ps.insert("afdm.radius_raw", Tensor::scalar(init.radius_raw))?;

        let d = c.ddg_dim();
        let sd = c.ddg_stride();
        layers::register_linear(&mut ps, &mut rng, "ddg.freq_embed", sd * sd, d)?;
        for j in 0..c.ddg_blocks {
            let p = format!("ddg.b{j}");
            layers::register_norm(&mut ps, &format!("{p}.ln1"), d)?;
            if j > 0 {
                layers::register_norm(&mut ps, &format!("{p}.ln_kv"), d)?;
            }
            layers::register_norm(&mut ps, &format!("{p}.ln_f"), d)?;
            for name in ["q", "k", "v", "kf", "vf", "proj"] {
                layers::register_linear(&mut ps, &mut rng, &format!("{p}.{name}"), d, d)?;
            }
            layers::register_norm(&mut ps, &format!("{p}.ln2"), d)?;
            layers::register_mlp(&mut ps, &mut rng, &format!("{p}.mlp"), d)?;
        }
        let dd = c.decoder_dim;
        layers::register_linear(&mut ps, &mut rng, "ddg.out", d, dd)?;

        layers::register_linear(&mut ps, &mut rng, "dec.embed", c3, dd)?;
        layers::register_token(&mut ps, &mut rng, "dec.mask_token", dd)?;
        for i in 0..c.decoder_depth {
            layers::register_block(&mut ps, &mut rng, &format!("dec.b{i}"), dd)?;
        }
        layers::register_norm(&mut ps, "dec.norm", dd)?;
        let s3 = c.unit();
        layers::register_linear(&mut ps, &mut rng, "dec.head", dd, s3 * s3)?;
        Ok(Self { config, params: ps })
    }

    pub fn afdm_params(&self) -> RadialFilterParams {
        let v = |n: &str| self.params.get(n).expect("afdm parameter").data()[0];
        RadialFilterParams {
            alpha_raw: v("afdm.alpha_raw"),
            beta_raw: v("afdm.beta_raw"),
            radius_raw: v("afdm.radius_raw"),
        }
    }

    /// Scales pixels to `[0, 1]` and edge-pads to the required multiple.
    pub fn prepare(&self, img: &GrayImage) -> PreparedInput {
        let m = self.config.pad_multiple();
        let unit = self.config.unit();
        let height = img.height().div_ceil(m) * m;
        let width = img.width().div_ceil(m) * m;
        let padded = img.pad_edge(height, width);
        PreparedInput {
            height,
            width,
            pixels: padded.to_unit(),
            layout: UnitLayout {
                rows: height / unit,
                cols: width / unit,
                valid_rows: img.height().div_ceil(unit),
                valid_cols: img.width().div_ceil(unit),
            },
        }
    }

    /// Builds a unit-grid mask from the non-padding units of `img`.
    /// Padding units are always masked.
    pub fn select_units(
        &self,
        img: &GrayImage,
        lambda: f64,
        strategy: MaskStrategy,
        source: TokenSource,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<MaskSelection> {
        let prepared = self.prepare(img);
        let layout = prepared.layout;
        let unit = self.config.unit();
        let grid = match source {
            TokenSource::RawPixels => TokenGrid::from_image(img, unit)?,
            TokenSource::ConvFeatures => self.feature_tokens(&prepared)?,
        };
        let local = baseline_masks(&grid, lambda, strategy, rng)?;
        let to_full = |k: usize| (k / layout.valid_cols) * layout.cols + k % layout.valid_cols;
        let keep = local.keep_indices.iter().map(|&k| to_full(k)).collect();
        let mut entropies = vec![0.0; layout.len()];
        for (k, e) in local.entropies.iter().enumerate() {
            entropies[to_full(k)] = *e;
        }
        MaskSelection::from_keep(lambda, layout.len(), keep, entropies)
    }

    /// Stage-1 patch-embedding features of each valid unit as one token.
    fn feature_tokens(&self, input: &PreparedInput) -> Result<TokenGrid> {
        let layout = input.layout;
        let s1 = self.config.patch_strides[0];
        let units: Vec<usize> = (0..layout.len()).filter(|&u| !layout.is_padding(u)).collect();
        let patches = crate::numerics::tape::patchify_values(&input.pixels, input.height, input.width, s1);
        let cols1 = input.width / s1;
        let rows: Vec<usize> = stage1_positions(&layout, &units)
            .into_iter()
            .map(|(r, c)| r * cols1 + c)
            .collect();
        let p = s1 * s1;
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| patches[r * p..(r + 1) * p].iter().copied())
            .collect();
        let x = Tensor::new(vec![rows.len(), p], data)?;
        let w = self.params.get("enc.embed.w").unwrap();
        let feats = tensor::matmul(&x, w)?;
        let width = TOKENS_PER_UNIT * self.config.embed_dims[0];
        let per_unit: Vec<Vec<f64>> = feats.data().chunks(width).map(<[f64]>::to_vec).collect();
        TokenGrid::from_features(
            &per_unit,
            layout.valid_rows,
            layout.valid_cols,
            self.config.unit(),
            LEVELS,
        )
    }

    /// Encoder over the visible units of an `h×w` image variable.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        img: Var,
        layout: &UnitLayout,
        visible: &[usize],
    ) -> Result<EncoderOutput> {
        let c = &self.config;
        if visible.is_empty() {
            return Err(Error::Precondition("at least one unit must be visible".into()));
        }
        if visible.iter().any(|&u| u >= layout.len()) {
            return Err(Error::InvalidArgument("visible unit outside the grid".into()));
        }
        let (_, w) = tape.value(img).dims2()?;
        let s1 = c.patch_strides[0];
        let positions = stage1_positions(layout, visible);
        let rows: Vec<usize> = positions.iter().map(|&(r, col)| r * (w / s1) + col).collect();
        let patches = tape.patchify(img, s1)?;
        let x = tape.gather_rows(patches, &rows)?;
        let x = linear(tape, b, "enc.embed", x)?;
        let pos = tape.constant(sincos_2d(&positions, c.embed_dims[0]));
        let mut x = tape.add(x, pos)?;

        let windows = [Some(TOKENS_PER_UNIT), Some(4), None];
        let mut stages = Vec::with_capacity(3);
        for (s, window) in windows.into_iter().enumerate() {
            for i in 0..c.stage_depths[s] {
                x = block(
                    tape,
                    b,
                    &format!("enc.s{}.b{i}", s + 1),
                    x,
                    c.heads[s],
                    window,
                    c.ln_eps,
                )?;
            }
            if s < 2 {
                stages.push(x);
                let (n, d) = tape.value(x).dims2()?;
                let merged = tape.reshape(x, vec![n / 4, 4 * d])?;
                x = linear(tape, b, &format!("enc.merge{}", s + 1), merged)?;
            } else {
                stages.push(norm(tape, b, "enc.norm", x, c.ln_eps)?);
            }
        }
        Ok(EncoderOutput {
            stages: [stages[0], stages[1], stages[2]],
            visible: visible.to_vec(),
        })
    }

    /// Frequency tokens: AFDM of the image with hidden units zeroed, embedded
    /// at the guidance stride and gathered at the visible positions.
    pub fn build_f_freq(
        &self,
        tape: &mut Tape,
        b: &Bound,
        img: Var,
        layout: &UnitLayout,
        visible: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let (h, w) = tape.value(img).dims2()?;
        let unit = c.unit();
        let mut keep = vec![false; layout.len()];
        for &u in visible {
            keep[u] = true;
        }
        let x = if keep.iter().all(|&k| k) {
            img
        } else {
            let m: Vec<f64> = (0..h * w)
                .map(|i| {
                    if keep[(i / w / unit) * layout.cols + (i % w) / unit] {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let m = tape.constant(Tensor::new(vec![h, w], m)?);
            tape.mul(img, m)?
        };
        let vars = FilterVars {
            alpha_raw: b.var("afdm.alpha_raw"),
            beta_raw: b.var("afdm.beta_raw"),
            radius_raw: b.var("afdm.radius_raw"),
        };
        let filtered = afdm_on_tape(tape, x, vars, c.afdm_variant)?;
        let s = c.ddg_stride();
        let positions = match c.ddg_input_stage {
            DdgInput::Stage1 => stage1_positions(layout, visible),
            DdgInput::Stage3 => unit_positions(layout, visible),
        };
        let rows: Vec<usize> = positions.iter().map(|&(r, col)| r * (w / s) + col).collect();
        let patches = tape.patchify(filtered, s)?;
        let f = tape.gather_rows(patches, &rows)?;
        let f = linear(tape, b, "ddg.freq_embed", f)?;
        let pos = tape.constant(sincos_2d(&positions, c.ddg_dim()));
        tape.add(f, pos)
    }

    /// Guidance blocks. Block 0 uses `LN(S)` for queries, keys and values;
    /// later blocks draw keys and values from `LN(S + previous output)` while
    /// the queries stay on `S`. Frequency keys/values are added when `freq`
    /// is present.
    pub fn ddg_forward(&self, tape: &mut Tape, b: &Bound, spatial: Var, freq: Option<Var>) -> Result<DdgOutput> {
        let c = &self.config;
        if let Some(f) = freq {
            if tape.shape(f) != tape.shape(spatial) {
                return Err(Error::ShapeMismatch {
                    op: "ddg_forward",
                    left: tape.shape(spatial).to_vec(),
                    right: tape.shape(f).to_vec(),
                });
            }
        }
        let heads = c.ddg_heads();
        let mut prev = spatial;
        let mut attention = Vec::with_capacity(c.ddg_blocks);
        let mut probs = Vec::with_capacity(c.ddg_blocks);
        for j in 0..c.ddg_blocks {
            let p = format!("ddg.b{j}");
            let hs = norm(tape, b, &format!("{p}.ln1"), spatial, c.ln_eps)?;
            let q = linear(tape, b, &format!("{p}.q"), hs)?;
            let kv_in = if j == 0 {
                hs
            } else {
                let sum = tape.add(spatial, prev)?;
                norm(tape, b, &format!("{p}.ln_kv"), sum, c.ln_eps)?
            };
            let k = linear(tape, b, &format!("{p}.k"), kv_in)?;
            let v = linear(tape, b, &format!("{p}.v"), kv_in)?;
            let a = match freq {
                Some(f) => {
                    let hf = norm(tape, b, &format!("{p}.ln_f"), f, c.ln_eps)?;
                    let kf = linear(tape, b, &format!("{p}.kf"), hf)?;
                    let vf = linear(tape, b, &format!("{p}.vf"), hf)?;
                    frequency_guided_attention(tape, q, k, v, kf, vf, heads)?
                }
                None => multi_head_attention(tape, q, k, v, heads)?,
            };
            attention.push(a.out);
            probs.push(a.probs);
            let o = linear(tape, b, &format!("{p}.proj"), a.out)?;
            let x = tape.add(prev, o)?;
            let h2 = norm(tape, b, &format!("{p}.ln2"), x, c.ln_eps)?;
            let m = mlp(tape, b, &format!("{p}.mlp"), h2)?;
            prev = tape.add(x, m)?;
        }
        Ok(DdgOutput {
            out: prev,
            attention,
            probs,
        })
    }

    /// Decoder over the full unit grid. Returns predictions for `targets`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        encoded: Var,
        guidance: Var,
        layout: &UnitLayout,
        visible: &[usize],
        targets: &[usize],
    ) -> Result<Option<Var>> {
        let c = &self.config;
        let e = linear(tape, b, "dec.embed", encoded)?;
        let e = tape.add(e, guidance)?;
        let seq = tape.concat_rows(&[e, b.var("dec.mask_token")])?;
        let mut slot = vec![visible.len(); layout.len()];
        for (i, &u) in visible.iter().enumerate() {
            slot[u] = i;
        }
        let x = tape.gather_rows(seq, &slot)?;
        let all: Vec<usize> = (0..layout.len()).collect();
        let pos = tape.constant(sincos_2d(&unit_positions(layout, &all), c.decoder_dim));
        let mut x = tape.add(x, pos)?;
        for i in 0..c.decoder_depth {
            x = block(tape, b, &format!("dec.b{i}"), x, c.decoder_heads, None, c.ln_eps)?;
        }
        if targets.is_empty() {
            return Ok(None);
        }
        let x = tape.gather_rows(x, targets)?;
        let x = norm(tape, b, "dec.norm", x, c.ln_eps)?;
        Ok(Some(linear(tape, b, "dec.head", x)?))
    }

    /// Encoder, frequency tokens, guidance and decoder for one image.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        b: &Bound,
        img: Var,
        layout: &UnitLayout,
        mask: &MaskSelection,
    ) -> Result<ForwardOutput> {
        if mask.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_masked",
                left: vec![layout.rows, layout.cols],
                right: vec![mask.len()],
            });
        }
        let (h, w) = tape.value(img).dims2()?;
        let unit = self.config.unit();
        if h != layout.rows * unit || w != layout.cols * unit {
            return Err(Error::ShapeMismatch {
                op: "forward_masked",
                left: vec![h, w],
                right: vec![layout.rows * unit, layout.cols * unit],
            });
        }
        let visible = mask.keep_indices.clone();
        let encoder = self.encode(tape, b, img, layout, &visible)?;
        let freq = self.build_f_freq(tape, b, img, layout, &visible)?;
        let (spatial, group) = match self.config.ddg_input_stage {
            DdgInput::Stage1 => (encoder.stages[0], TOKENS_PER_UNIT),
            DdgInput::Stage3 => (encoder.stages[2], 1),
        };
        let ddg = self.ddg_forward(tape, b, spatial, Some(freq))?;
        let pooled = if group > 1 {
            tape.mean_row_groups(ddg.out, group)?
        } else {
            ddg.out
        };
        let guidance = linear(tape, b, "ddg.out", pooled)?;
        let loss_units: Vec<usize> = mask
            .masked_indices()
            .into_iter()
            .filter(|&u| !layout.is_padding(u))
            .collect();
        let prediction = self.decode(tape, b, encoder.stages[2], guidance, layout, &visible, &loss_units)?;
        Ok(ForwardOutput {
            encoder,
            freq,
            ddg,
            prediction,
            loss_units,
        })
    }

    /// Patch pixels of `units`, one row of `s3²` values each.
    pub fn targets(&self, tape: &mut Tape, img: Var, units: &[usize]) -> Result<Option<Var>> {
        if units.is_empty() {
            return Ok(None);
        }
        let patches = tape.patchify(img, self.config.unit())?;
        Ok(Some(tape.gather_rows(patches, units)?))
    }

    /// Reconstructed pixels of the masked units, `[#masked, s3²]` row-major.
    pub fn reconstruct(&self, input: &PreparedInput, mask: &MaskSelection) -> Result<Option<Tensor>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let img = tape.constant(input.tensor());
        let out = self.forward_masked(&mut tape, &b, img, &input.layout, mask)?;
        Ok(out.prediction.map(|p| tape.value(p).clone()))
    }

    /// Unmasked multi-scale features at strides `s1, s2, s3, 2·s3`.
    pub fn feature_pyramid(&self, img: &GrayImage) -> Result<FeaturePyramid> {
        let c = &self.config;
        let input = self.prepare(img);
        let layout = input.layout;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let x = tape.constant(input.tensor());
        let all: Vec<usize> = (0..layout.len()).collect();
        let enc = self.encode(&mut tape, &b, x, &layout, &all)?;

        let f1 = to_grid(tape.data(enc.stages[0]), &layout, 4, c.embed_dims[0]);
        let f2 = to_grid(tape.data(enc.stages[1]), &layout, 2, c.embed_dims[1]);
        let f3 = to_grid(tape.data(enc.stages[2]), &layout, 1, c.embed_dims[2]);

        let (hr, hc) = (layout.rows / 2, layout.cols / 2);
        let rows: Vec<usize> = (0..hr * hc)
            .flat_map(|i| {
                let (r, col) = (2 * (i / hc), 2 * (i % hc));
                let cols = layout.cols;
                [
                    r * cols + col,
                    r * cols + col + 1,
                    (r + 1) * cols + col,
                    (r + 1) * cols + col + 1,
                ]
            })
            .collect();
        let g = tape.gather_rows(enc.stages[2], &rows)?;
        let g = tape.reshape(g, vec![hr * hc, 4 * c.embed_dims[2]])?;
        let f4 = linear(&mut tape, &b, "pyramid.down", g)?;
        let f4 = Tensor::new(vec![hr, hc, c.embed_dims[2]], tape.data(f4).to_vec())?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }
}

/// Scatters unit-major token rows (`k×k` Z-ordered tokens per unit) into an
/// `[rows·k, cols·k, dim]` grid.
fn to_grid(data: &[f64], layout: &UnitLayout, k: usize, dim: usize) -> Tensor {
    let (h, w) = (layout.rows * k, layout.cols * k);
    let mut out = vec![0.0; h * w * dim];
    for (t, row) in data.chunks(dim).enumerate() {
        let (u, z) = (t / (k * k), t % (k * k));
        let (zr, zc) = match k {
            4 => z_offset(z),
            2 => (z >> 1, z & 1),
            _ => (0, 0),
        };
        let r = (u / layout.cols) * k + zr;
        let col = (u % layout.cols) * k + zc;
        out[(r * w + col) * dim..(r * w + col + 1) * dim].copy_from_slice(row);
    }
    Tensor::new(vec![h, w, dim], out).unwrap()
}
