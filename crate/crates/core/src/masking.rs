//! Entropy-based deterministic token masking.
//!
//! Every token's Shannon entropy is computed over its discrete intensity
//! histogram. Tokens are sorted ascending by `(entropy, index)` and the last
//! `N − ⌊λ·N⌋` positions of that order are kept; the rest are masked.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, LEVELS};

/// Sampling stride of the gray-value baseline.
pub const GRAY_VALUE_STRIDE: usize = 4;

/// Where token payloads come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenSource {
    /// Raw 8-bit pixel levels of each patch.
    #[default]
    RawPixels,
    /// Convolutional features quantized into uniform bins over their global range.
    ConvFeatures,
}

impl FromStr for TokenSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_pixels" | "raw" => Ok(Self::RawPixels),
            "conv_features" | "conv" => Ok(Self::ConvFeatures),
            _ => Err(Error::InvalidArgument(format!(
                "unknown token source `{s}` (expected raw_pixels or conv_features)"
            ))),
        }
    }
}

impl fmt::Display for TokenSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RawPixels => "raw_pixels",
            Self::ConvFeatures => "conv_features",
        })
    }
}

/// A `rows × cols` grid of tokens, each a vector of discrete levels in `0..levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub levels: usize,
    pub source: TokenSource,
    tokens: Vec<Vec<u16>>,
}

impl TokenGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        patch: usize,
        levels: usize,
        source: TokenSource,
        tokens: Vec<Vec<u16>>,
    ) -> Result<Self> {
        if rows * cols != tokens.len() || tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} grid cannot hold {} tokens",
                tokens.len()
            )));
        }
        let len = tokens[0].len();
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(Error::InvalidArgument(
                "token payloads must be non-empty and of equal length".into(),
            ));
        }
        if levels < 2 || tokens.iter().flatten().any(|&v| usize::from(v) >= levels) {
            return Err(Error::InvalidArgument(format!(
                "token levels must lie in 0..{levels} with at least two levels"
            )));
        }
        Ok(Self {
            rows,
            cols,
            patch,
            levels,
            source,
            tokens,
        })
    }

    /// Tiles an image into `patch×patch` tokens, replicating edges when the
    /// size is not a multiple of `patch`.
    pub fn from_image(img: &GrayImage, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        let rows = img.height().div_ceil(patch);
        let cols = img.width().div_ceil(patch);
        let padded = img.pad_edge(rows * patch, cols * patch);
        let w = padded.width();
        let mut tokens = Vec::with_capacity(rows * cols);
        for tr in 0..rows {
            for tc in 0..cols {
                let mut t = Vec::with_capacity(patch * patch);
                for r in 0..patch {
                    let start = (tr * patch + r) * w + tc * patch;
                    t.extend(padded.pixels()[start..start + patch].iter().map(|&p| u16::from(p)));
                }
                tokens.push(t);
            }
        }
        Self::new(rows, cols, patch, LEVELS, TokenSource::RawPixels, tokens)
    }

    /// Quantizes real feature vectors (one per token, row-major grid order)
    /// into `levels` uniform bins spanning their global min..max.
    pub fn from_features(features: &[Vec<f64>], rows: usize, cols: usize, patch: usize, levels: usize) -> Result<Self> {
        let lo = features.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = features.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("token features".into()));
        }
        let span = hi - lo;
        let tokens = features
            .iter()
            .map(|f| {
                f.iter()
                    .map(|&v| {
                        if span > 0.0 {
                            (((v - lo) / span * levels as f64) as usize).min(levels - 1) as u16
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(rows, cols, patch, levels, TokenSource::ConvFeatures, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Vec<u16>] {
        &self.tokens
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| token_entropy(t, self.levels)).collect()
    }

    pub fn mean_levels(&self) -> Vec<f64> {
        self.tokens
            .iter()
            .map(|t| t.iter().map(|&v| f64::from(v)).sum::<f64>() / t.len() as f64)
            .collect()
    }
}

/// Shannon entropy in bits of a payload's empirical level histogram.
pub fn token_entropy(payload: &[u16], levels: usize) -> f64 {
    debug_assert!(levels >= 2);
    if payload.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; levels];
    for &v in payload {
        counts[usize::from(v)] += 1;
    }
    let n = payload.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// The keep/mask partition of a token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    pub lambda: f64,
    /// Kept token indices, ascending.
    pub keep_indices: Vec<usize>,
    /// `mask[i]` is true iff token `i` is kept (visible).
    pub mask: Vec<bool>,
    pub entropies: Vec<f64>,
}

impl MaskSelection {
    /// Builds a selection from an explicit keep set.
    pub fn from_keep(lambda: f64, n: usize, mut keep: Vec<usize>, entropies: Vec<f64>) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        if keep.last().is_some_and(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "keep index out of range for {n} tokens"
            )));
        }
        let mut mask = vec![false; n];
        for &i in &keep {
            mask[i] = true;
        }
        Ok(Self {
            lambda,
            keep_indices: keep,
            mask,
            entropies,
        })
    }

    /// Selection that keeps every token.
    pub fn keep_all(n: usize) -> Self {
        Self::from_keep(0.0, n, (0..n).collect(), vec![0.0; n]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Masked token indices, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Number of kept tokens: `N − ⌊λ·N⌋`.
pub fn keep_count(n: usize, lambda: f64) -> usize {
    n - (lambda * n as f64).floor() as usize
}

fn check_lambda(lambda: f64, n: usize) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Precondition(format!(
            "mask ratio must satisfy 0 <= lambda < 1, got {lambda}"
        )));
    }
    if n == 0 {
        return Err(Error::Precondition("token grid is empty".into()));
    }
    Ok(())
}

/// Keeps the `N − ⌊λN⌋` highest-entropy tokens. Ties are ordered by
/// ascending token index, so equal entropies favour higher indices.
pub fn select_mask(grid: &TokenGrid, lambda: f64) -> Result<MaskSelection> {
    check_lambda(lambda, grid.len())?;
    let entropies = grid.entropies();
    select_by_scores(entropies, lambda)
}

/// [`select_mask`] over precomputed entropies.
pub fn select_by_scores(entropies: Vec<f64>, lambda: f64) -> Result<MaskSelection> {
    let n = entropies.len();
    check_lambda(lambda, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let cut = n - keep_count(n, lambda);
    let keep = order[cut..].to_vec();
    MaskSelection::from_keep(lambda, n, keep, entropies)
}

/// Splits token payloads into the visible ones (in index order) and the masked index list.
pub fn apply_mask<'a>(grid: &'a TokenGrid, sel: &MaskSelection) -> Result<(Vec<&'a [u16]>, Vec<usize>)> {
    if sel.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: vec![grid.len()],
            right: vec![sel.len()],
        });
    }
    let visible = sel.keep_indices.iter().map(|&i| grid.tokens[i].as_slice()).collect();
    Ok((visible, sel.masked_indices()))
}

/// Mask source used during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskStrategy {
    Random,
    GrayValue,
    #[default]
    Entropy,
}

impl FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "gray_value" => Ok(Self::GrayValue),
            "entropy" => Ok(Self::Entropy),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mask strategy `{s}` (expected entropy, random or gray_value)"
            ))),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::GrayValue => "gray_value",
            Self::Entropy => "entropy",
        })
    }
}

/// Mask selection under any of the three strategies.
///
/// * `Random` keeps a uniform sample of `N − ⌊λN⌋` indices.
/// * `GrayValue` ranks tokens by descending mean level (ties by index) and
///   takes ranked positions `0, 4, 8, …`; if the quota is not met it
///   continues with `1, 5, 9, …` and so on.
/// * `Entropy` is [`select_mask`].
pub fn baseline_masks(
    grid: &TokenGrid,
    lambda: f64,
    strategy: MaskStrategy,
    rng: Option<&mut dyn RngCore>,
) -> Result<MaskSelection> {
    check_lambda(lambda, grid.len())?;
    let n = grid.len();
    let quota = keep_count(n, lambda);
    match strategy {
        MaskStrategy::Entropy => select_mask(grid, lambda),
        MaskStrategy::Random => {
            let rng =
                rng.ok_or_else(|| Error::InvalidArgument("random masking needs a random number generator".into()))?;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(quota);
            MaskSelection::from_keep(lambda, n, idx, grid.entropies())
        }
        MaskStrategy::GrayValue => {
            let means = grid.mean_levels();
            let mut ranked: Vec<usize> = (0..n).collect();
            ranked.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
            let keep: Vec<usize> = (0..GRAY_VALUE_STRIDE)
                .flat_map(|offset| ranked.iter().skip(offset).step_by(GRAY_VALUE_STRIDE).copied())
                .take(quota)
                .collect();
            MaskSelection::from_keep(lambda, n, keep, grid.entropies())
        }
    }
}

/// Kept tokens show their pixels and masked tokens are filled with mid-gray.
pub fn mask_visualization(img: &GrayImage, sel: &MaskSelection, patch: usize) -> Result<GrayImage> {
    let cols = img.width().div_ceil(patch);
    if sel.len() != cols * img.height().div_ceil(patch) {
        return Err(Error::ShapeMismatch {
            op: "mask_visualization",
            left: vec![img.height(), img.width()],
            right: vec![sel.len()],
        });
    }
    let mut px = img.pixels().to_vec();
    for r in 0..img.height() {
        for c in 0..img.width() {
            if !sel.mask[(r / patch) * cols + c / patch] {
                px[r * img.width() + c] = 128;
            }
        }
    }
    GrayImage::new(img.height(), img.width(), px)
}

/// Per-token entropies painted over their patches and rescaled to 0..=255.
pub fn entropy_map(img: &GrayImage, entropies: &[f64], patch: usize) -> Result<GrayImage> {
    let cols = img.width().div_ceil(patch);
    if entropies.len() != cols * img.height().div_ceil(patch) {
        return Err(Error::ShapeMismatch {
            op: "entropy_map",
            left: vec![img.height(), img.width()],
            right: vec![entropies.len()],
        });
    }
    let values: Vec<f64> = (0..img.height() * img.width())
        .map(|i| entropies[(i / img.width() / patch) * cols + (i % img.width()) / patch])
        .collect();
    GrayImage::from_real_rescaled(img.height(), img.width(), &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_with_entropies(n: usize) -> TokenGrid {
        // Token i holds i+1 distinct levels in equal proportion (entropy log2(i+1)).
        let len = 840; // divisible by 1..=8
        let tokens = (0..n)
            .map(|i| (0..len).map(|k| (k % (i + 1)) as u16).collect())
            .collect();
        TokenGrid::new(1, n, 1, 256, TokenSource::RawPixels, tokens).unwrap()
    }

    #[test]
    fn entropy_simple_cases() {
        assert_eq!(token_entropy(&[7; 32], 256), 0.0);
        assert_eq!(token_entropy(&[0, 255, 0, 255], 256), 1.0);
        assert!((token_entropy(&(0..256).collect::<Vec<u16>>(), 256) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn keeps_last_quarter_of_sorted_order() {
        let sel = select_by_scores((0..16).map(f64::from).collect(), 0.75).unwrap();
        assert_eq!(sel.keep_indices, vec![12, 13, 14, 15]);
        let sel = select_by_scores((0..16).rev().map(f64::from).collect(), 0.75).unwrap();
        assert_eq!(sel.keep_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_keep_highest_indices() {
        let sel = select_by_scores(vec![1.0; 10], 0.75).unwrap();
        // ⌊0.75·10⌋ = 7, so three tokens survive.
        assert_eq!(sel.keep_indices, vec![7, 8, 9]);
        let sel = select_by_scores(vec![0.5; 16], 0.5).unwrap();
        assert_eq!(sel.keep_indices, (8..16).collect::<Vec<_>>());
    }

    #[test]
    fn entropy_grid_keeps_high_entropy_tokens() {
        let grid = grid_with_entropies(8);
        let sel = select_mask(&grid, 0.5).unwrap();
        assert_eq!(sel.keep_indices, vec![4, 5, 6, 7]);
    }

    #[test]
    fn lambda_out_of_range() {
        assert!(matches!(
            select_by_scores(vec![0.0; 4], 1.0),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            select_by_scores(vec![0.0; 4], -0.1),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            select_by_scores(vec![0.0; 4], f64::NAN),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn apply_mask_cases() {
        let img = GrayImage::new(4, 4, (0..16).collect()).unwrap();
        let grid = TokenGrid::from_image(&img, 1).unwrap();
        let all = select_mask(&grid, 0.0).unwrap();
        let (vis, masked) = apply_mask(&grid, &all).unwrap();
        assert_eq!(vis.len(), 16);
        assert!(masked.is_empty());

        let sel = select_by_scores((0..16).map(f64::from).collect(), 0.75).unwrap();
        let (vis, masked) = apply_mask(&grid, &sel).unwrap();
        assert_eq!(vis, vec![&[12u16][..], &[13], &[14], &[15]]);
        assert_eq!(masked, (0..12).collect::<Vec<_>>());

        let other = select_by_scores(vec![0.0; 5], 0.5).unwrap();
        assert!(apply_mask(&grid, &other).is_err());
    }

    #[test]
    fn gray_value_stride_rule() {
        // 16 tokens with mean levels 0..15; descending ranking is 15,14,…,0.
        let tokens = (0..16).map(|i| vec![i as u16; 4]).collect();
        let grid = TokenGrid::new(4, 4, 2, 256, TokenSource::RawPixels, tokens).unwrap();
        let sel = baseline_masks(&grid, 0.75, MaskStrategy::GrayValue, None).unwrap();
        // Ranked positions {0,4,8,12} → tokens {15,11,7,3}.
        assert_eq!(sel.keep_indices, vec![3, 7, 11, 15]);
        let sel = baseline_masks(&grid, 0.5, MaskStrategy::GrayValue, None).unwrap();
        assert_eq!(sel.keep_indices, vec![2, 3, 6, 7, 10, 11, 14, 15]);
    }

    #[test]
    fn random_strategy_is_reproducible() {
        let img = GrayImage::new(8, 8, (0..64).collect()).unwrap();
        let grid = TokenGrid::from_image(&img, 2).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = baseline_masks(&grid, 0.75, MaskStrategy::Random, Some(&mut r1)).unwrap();
        let b = baseline_masks(&grid, 0.75, MaskStrategy::Random, Some(&mut r2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.keep_indices.len(), 4);
        assert!(baseline_masks(&grid, 0.75, MaskStrategy::Random, None).is_err());
    }

    #[test]
    fn entropy_strategy_delegates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = GrayImage::new(
            16,
            16,
            (0..256)
                .map(|_| rng.gen_range(0..4u8) * rng.gen_range(0..60u8))
                .collect(),
        )
        .unwrap();
        let grid = TokenGrid::from_image(&img, 4).unwrap();
        assert_eq!(
            baseline_masks(&grid, 0.75, MaskStrategy::Entropy, None).unwrap(),
            select_mask(&grid, 0.75).unwrap()
        );
    }

    #[test]
    fn feature_quantization() {
        let feats = vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 1.0], vec![0.25, 0.75]];
        let grid = TokenGrid::from_features(&feats, 2, 2, 16, 4).unwrap();
        assert_eq!(grid.tokens()[0], vec![0, 3]);
        assert_eq!(grid.tokens()[1], vec![2, 2]);
        assert_eq!(grid.tokens()[3], vec![1, 3]);
        assert_eq!(grid.source, TokenSource::ConvFeatures);
    }

    #[test]
    fn unaligned_image_is_edge_padded() {
        let img = GrayImage::new(5, 3, (0..15).collect()).unwrap();
        let grid = TokenGrid::from_image(&img, 4).unwrap();
        assert_eq!((grid.rows, grid.cols), (2, 1));
        assert_eq!(
            grid.tokens()[1],
            vec![12, 13, 14, 14, 12, 13, 14, 14, 12, 13, 14, 14, 12, 13, 14, 14]
        );
    }

    #[test]
    fn exports_have_image_size() {
        let img = GrayImage::new(8, 8, (0..64).map(|v| (v * 3) as u8).collect()).unwrap();
        let grid = TokenGrid::from_image(&img, 4).unwrap();
        let sel = select_by_scores(vec![0.0, 1.0, 2.0, 3.0], 0.75).unwrap();
        let viz = mask_visualization(&img, &sel, 4).unwrap();
        assert_eq!(viz.get(0, 0), 128);
        assert_eq!(viz.get(7, 7), img.get(7, 7));
        let map = entropy_map(&img, &grid.entropies(), 4).unwrap();
        assert_eq!((map.height(), map.width()), (8, 8));
    }
}
