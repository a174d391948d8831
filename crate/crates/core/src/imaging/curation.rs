//! Corpus curation: zero-border cropping, anchor-based deduplication and
//! resolution statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{load_gray, GrayImage};
use crate::error::{Error, Result};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.85;

const HIST_BINS: usize = 64;
const THUMB: usize = 8;
/// Length of the [`dedup_feature`] descriptor.
pub const FEATURE_LEN: usize = HIST_BINS + THUMB * THUMB;

/// Inclusive-exclusive content rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Bounding box of the pixels strictly above `zero_threshold`, or `None`
/// when there are none.
pub fn content_box(img: &GrayImage, zero_threshold: u8) -> Option<CropBox> {
    let (h, w) = (img.height(), img.width());
    let live = |r: usize, c: usize| img.get(r, c) > zero_threshold;
    let row_live = |r: usize| (0..w).any(|c| live(r, c));
    let col_live = |c: usize| (0..h).any(|r| live(r, c));
    let top = (0..h).find(|&r| row_live(r))?;
    let bottom = (0..h).rev().find(|&r| row_live(r))?;
    let left = (0..w).find(|&c| col_live(c))?;
    let right = (0..w).rev().find(|&c| col_live(c))?;
    Some(CropBox {
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

/// Strips outer rows and columns whose pixels are all `<= zero_threshold`.
pub fn crop_black_borders(img: &GrayImage, zero_threshold: u8) -> Result<GrayImage> {
    let b = content_box(img, zero_threshold).ok_or_else(|| {
        Error::DegenerateImage(format!(
            "every pixel of the {}x{} image is <= {zero_threshold}",
            img.height(),
            img.width()
        ))
    })?;
    img.crop(b.top, b.left, b.height, b.width)
}

/// Fixed-length, L2-normalized descriptor: a 64-bin intensity histogram and
/// a mean-centered 8×8 block-average thumbnail, each unit-normalized before
/// concatenation.
pub fn dedup_feature(img: &GrayImage) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS];
    for &p in img.pixels() {
        hist[usize::from(p) * HIST_BINS / 256] += 1.0;
    }
    normalize(&mut hist);

    let (h, w) = (img.height(), img.width());
    let bounds = |i: usize, n: usize| {
        let lo = i * n / THUMB;
        let hi = ((i + 1) * n / THUMB).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    let mut thumb = Vec::with_capacity(THUMB * THUMB);
    for i in 0..THUMB {
        let (r0, r1) = bounds(i, h);
        for j in 0..THUMB {
            let (c0, c1) = bounds(j, w);
            let mut s = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += f64::from(img.get(r, c));
                }
            }
            thumb.push(s / ((r1 - r0) * (c1 - c0)) as f64 / 255.0);
        }
    }
    let mean = thumb.iter().sum::<f64>() / thumb.len() as f64;
    thumb.iter_mut().for_each(|v| *v -= mean);
    normalize(&mut thumb);

    let mut feature = hist;
    feature.extend(thumb);
    normalize(&mut feature);
    feature
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// One image participating in deduplication.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub path: String,
    pub scene_group: String,
    pub feature: Vec<f64>,
    pub kept: bool,
    /// Similarity to the scene anchor; for the anchor itself, the largest
    /// similarity any candidate had to it (0 when alone).
    pub max_sim: f64,
}

impl CorpusEntry {
    pub fn new(path: impl Into<String>, scene_group: impl Into<String>, feature: Vec<f64>) -> Self {
        Self {
            path: path.into(),
            scene_group: scene_group.into(),
            feature,
            kept: true,
            max_sim: 0.0,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Position of the anchor within a scene group of `len` entries sorted by
/// path: the first element of a seeded shuffle.
pub fn anchor_position(len: usize, scene: &str, seed: u64) -> usize {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(scene));
    order.shuffle(&mut rng);
    order[0]
}

/// Per scene, picks an anchor and excludes every candidate whose cosine
/// similarity to it is strictly above `threshold`. The result is sorted by
/// (scene, path).
pub fn dedup_scan(entries: Vec<CorpusEntry>, threshold: f64, seed: u64) -> Result<Vec<CorpusEntry>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Precondition(format!(
            "dedup threshold must lie in (0, 1], got {threshold}"
        )));
    }
    for e in &entries {
        let norm = e.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "feature of {} has norm {norm}, expected 1",
                e.path
            )));
        }
    }

    let mut groups: BTreeMap<String, Vec<CorpusEntry>> = BTreeMap::new();
    for e in entries {
        groups.entry(e.scene_group.clone()).or_default().push(e);
    }
    let groups: Vec<(String, Vec<CorpusEntry>)> = groups.into_iter().collect();
    let processed: Vec<Vec<CorpusEntry>> = groups
        .into_par_iter()
        .map(|(scene, mut group)| {
            group.sort_by(|a, b| a.path.cmp(&b.path));
            let anchor = anchor_position(group.len(), &scene, seed);
            let anchor_feature = group[anchor].feature.clone();
            let mut best = 0.0_f64;
            for (i, e) in group.iter_mut().enumerate() {
                if i == anchor {
                    continue;
                }
                let sim: f64 = e.feature.iter().zip(&anchor_feature).map(|(a, b)| a * b).sum();
                e.max_sim = sim;
                e.kept = sim <= threshold;
                best = best.max(sim);
            }
            group[anchor].kept = true;
            group[anchor].max_sim = best;
            group
        })
        .collect();
    Ok(processed.into_iter().flatten().collect())
}

/// Writes `path<TAB>scene<TAB>kept<TAB>max_sim` lines.
pub fn write_manifest(entries: &[CorpusEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{}\t{}\t{}\t{:.6}", e.path, e.scene_group, e.kept, e.max_sim).unwrap();
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Histogram of image resolutions keyed by `(width, height)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResolutionStats {
    pub counts: BTreeMap<(usize, usize), usize>,
    pub total: usize,
    pub skipped: Vec<PathBuf>,
}

impl ResolutionStats {
    pub fn record(&mut self, width: usize, height: usize) {
        *self.counts.entry((width, height)).or_default() += 1;
        self.total += 1;
    }

    /// Resolutions sorted by descending count, then ascending (width, height).
    pub fn top_k(&self, k: usize) -> Vec<((usize, usize), usize)> {
        let mut rows: Vec<_> = self.counts.iter().map(|(&r, &c)| (r, c)).collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        rows.truncate(k);
        rows
    }

    /// `width,height,count` CSV sorted by count descending.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("width,height,count\n");
        for ((w, h), c) in self.top_k(usize::MAX) {
            writeln!(out, "{w},{h},{c}").unwrap();
        }
        out
    }
}

/// Reads every path and tallies its resolution. Unreadable files are
/// skipped with a warning and listed in `skipped`.
pub fn resolution_report<P: AsRef<Path> + Sync>(paths: &[P]) -> ResolutionStats {
    let dims: Vec<std::result::Result<(usize, usize), PathBuf>> = paths
        .par_iter()
        .map(|p| {
            load_gray(p.as_ref())
                .map(|img| (img.width(), img.height()))
                .map_err(|e| {
                    log::warn!("skipping {}: {e}", p.as_ref().display());
                    p.as_ref().to_path_buf()
                })
        })
        .collect();
    let mut stats = ResolutionStats::default();
    for d in dims {
        match d {
            Ok((w, h)) => stats.record(w, h),
            Err(p) => stats.skipped.push(p),
        }
    }
    stats
}

/// Result of [`curate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Curation {
    /// Deduplicated entries sorted by (scene, path).
    pub entries: Vec<CorpusEntry>,
    /// Resolutions of the cropped contents.
    pub stats: ResolutionStats,
}

/// Border-crops every image, deduplicates the cropped contents per scene and
/// tallies cropped resolutions. `items` pairs a path relative to `root` with
/// its scene. Unreadable or all-black images are skipped with a warning.
/// When `cropped_out` is given the cropped images are written there under
/// the same relative paths.
pub fn curate(
    root: &Path,
    items: &[(String, String)],
    threshold: f64,
    seed: u64,
    cropped_out: Option<&Path>,
) -> Result<Curation> {
    let loaded: Vec<std::result::Result<(CorpusEntry, GrayImage), PathBuf>> = items
        .par_iter()
        .map(|(rel, scene)| {
            let full = root.join(rel);
            let img = load_gray(&full).and_then(|img| crop_black_borders(&img, 0));
            match img {
                Ok(img) => Ok((CorpusEntry::new(rel.clone(), scene.clone(), dedup_feature(&img)), img)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", full.display());
                    Err(full)
                }
            }
        })
        .collect();
    let mut stats = ResolutionStats::default();
    let mut entries = Vec::with_capacity(loaded.len());
    for item in loaded {
        match item {
            Ok((entry, img)) => {
                stats.record(img.width(), img.height());
                if let Some(out) = cropped_out {
                    let dst = out.join(&entry.path);
                    if let Some(parent) = dst.parent() {
                        fs::create_dir_all(parent)
                            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
                    }
                    super::save_gray(&img, &dst)?;
                }
                entries.push(entry);
            }
            Err(p) => stats.skipped.push(p),
        }
    }
    if entries.is_empty() {
        return Err(Error::Precondition(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    Ok(Curation {
        entries: dedup_scan(entries, threshold, seed)?,
        stats,
    })
}
