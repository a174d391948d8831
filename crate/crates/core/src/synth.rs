//! Deterministic synthetic corpora for smoke runs and tests.
//!
//! Pretraining images combine a flat background, a linear ramp, a
//! checkerboard patch, Gaussian hot spots, per-column fixed-pattern offsets
//! and Gaussian noise. The curation corpus plants near-duplicates of each
//! scene's anchor and zero borders around image content.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{anchor_position, dedup_feature, save_pgm, CropBox, GrayImage};

/// Knobs of the pretraining image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    pub max_blobs: usize,
    /// Peak blob contrast above background, in gray levels.
    pub blob_contrast: (f64, f64),
    pub noise_sigma: f64,
    /// Amplitude of per-column fixed-pattern offsets.
    pub stripe_amplitude: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            max_blobs: 4,
            blob_contrast: (40.0, 120.0),
            noise_sigma: 3.0,
            stripe_amplitude: 4.0,
        }
    }
}

/// One pretraining-style image.
pub fn synth_image<R: Rng>(params: &SynthParams, rng: &mut R) -> GrayImage {
    let n = params.size;
    let mut v = vec![rng.gen_range(40.0..110.0); n * n];

    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.0..40.0);
    let (ct, st) = (theta.cos(), theta.sin());
    for r in 0..n {
        for c in 0..n {
            let t = (r as f64 * st + c as f64 * ct) / n as f64;
            v[r * n + c] += amp * t;
        }
    }

    let cell = if rng.gen_bool(0.5) { 4 } else { 8 };
    let (ch, cw) = (rng.gen_range(n / 4..=n / 2), rng.gen_range(n / 4..=n / 2));
    let (top, left) = (rng.gen_range(0..=n - ch), rng.gen_range(0..=n - cw));
    let contrast: f64 = rng.gen_range(8.0..20.0);
    for r in top..top + ch {
        for c in left..left + cw {
            let s = if ((r / cell) + (c / cell)) % 2 == 0 { 1.0 } else { -1.0 };
            v[r * n + c] += s * contrast;
        }
    }

    for _ in 0..rng.gen_range(1..=params.max_blobs.max(1)) {
        let (cy, cx) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let sigma: f64 = rng.gen_range(2.0..6.0);
        let a = rng.gen_range(params.blob_contrast.0..params.blob_contrast.1);
        for r in 0..n {
            for c in 0..n {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                v[r * n + c] += a * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let stripes: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-params.stripe_amplitude..=params.stripe_amplitude))
        .collect();
    let noise = Normal::new(0.0, params.noise_sigma.max(1e-12)).unwrap();
    for r in 0..n {
        for c in 0..n {
            v[r * n + c] += stripes[c] + noise.sample(rng);
        }
    }
    GrayImage::from_real(n, n, &v).expect("synthetic image size is positive")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Writes `n` images named `synth_NNNN.pgm` and returns their paths.
pub fn write_pretrain_corpus(dir: &Path, n: usize, seed: u64, params: &SynthParams) -> Result<Vec<PathBuf>> {
    if n == 0 || params.size == 0 {
        return Err(Error::InvalidArgument(
            "corpus size and image size must be positive".into(),
        ));
    }
    create_dir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = dir.join(format!("synth_{i:04}.pgm"));
            save_pgm(&synth_image(params, &mut rng), &p)?;
            Ok(p)
        })
        .collect()
}

/// Ground truth for one image of the curation corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedImage {
    /// Path relative to the corpus root, `scene/file.pgm`.
    pub path: String,
    pub scene: String,
    pub duplicate: bool,
    pub anchor: bool,
    pub content: CropBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationCorpus {
    pub root: PathBuf,
    pub images: Vec<PlantedImage>,
    pub seed: u64,
}

impl CurationCorpus {
    pub fn duplicates(&self) -> Vec<&str> {
        self.images
            .iter()
            .filter(|p| p.duplicate)
            .map(|p| p.path.as_str())
            .collect()
    }

    /// Expected `width,height,count` CSV of the cropped contents.
    pub fn resolution_csv(&self) -> String {
        let mut stats = crate::imaging::ResolutionStats::default();
        for p in &self.images {
            stats.record(p.content.width, p.content.height);
        }
        stats.to_csv()
    }
}

const CONTENT_SIZES: [(usize, usize); 3] = [(48, 64), (64, 64), (40, 56)];
const DUP_MIN_SIM: f64 = 0.95;
const DISTINCT_MAX_SIM: f64 = 0.75;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Content with every pixel at least 16 so the zero border is unambiguous.
fn content_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> GrayImage {
    let side = h.max(w);
    let params = SynthParams {
        size: side,
        ..SynthParams::default()
    };
    let base = synth_image(&params, rng).crop(0, 0, h, w).unwrap();
    let px = base.pixels().iter().map(|&p| p.max(16)).collect();
    GrayImage::new(h, w, px).unwrap()
}

fn near_copy<R: Rng>(img: &GrayImage, rng: &mut R) -> GrayImage {
    let px = img
        .pixels()
        .iter()
        .map(|&p| (i32::from(p) + rng.gen_range(-2..=2)).clamp(16, 255) as u8)
        .collect();
    GrayImage::new(img.height(), img.width(), px).unwrap()
}

fn with_border<R: Rng>(img: &GrayImage, rng: &mut R) -> (GrayImage, CropBox) {
    let (top, bottom, left, right) = (
        rng.gen_range(0..6),
        rng.gen_range(0..6),
        rng.gen_range(0..6),
        rng.gen_range(0..6),
    );
    let (h, w) = (img.height() + top + bottom, img.width() + left + right);
    let mut px = vec![0u8; h * w];
    for r in 0..img.height() {
        let dst = (r + top) * w + left;
        px[dst..dst + img.width()].copy_from_slice(&img.pixels()[r * img.width()..(r + 1) * img.width()]);
    }
    let b = CropBox {
        top,
        left,
        height: img.height(),
        width: img.width(),
    };
    (GrayImage::new(h, w, px).unwrap(), b)
}

/// Writes `scenes × per_scene` images under `root/scene_SS/img_II.pgm`,
/// planting `dups_per_scene` near-copies of each scene's anchor, plus a
/// `plants.tsv` ground-truth manifest. `seed` must match the seed later
/// given to deduplication so the anchors coincide.
pub fn write_curation_corpus(
    root: &Path,
    scenes: usize,
    per_scene: usize,
    dups_per_scene: usize,
    seed: u64,
) -> Result<CurationCorpus> {
    if scenes == 0 || per_scene == 0 || dups_per_scene >= per_scene {
        return Err(Error::InvalidArgument(
            "need at least one scene, and fewer duplicates than images per scene".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut images = Vec::with_capacity(scenes * per_scene);
    for s in 0..scenes {
        let scene = format!("scene_{s:02}");
        create_dir(&root.join(&scene))?;
        let anchor = anchor_position(per_scene, &scene, seed);
        let (h, w) = CONTENT_SIZES[s % CONTENT_SIZES.len()];
        let base = content_image(h, w, &mut rng);
        let base_f = dedup_feature(&base);
        // Non-anchor slots that receive duplicates.
        let others: Vec<usize> = (0..per_scene).filter(|&i| i != anchor).collect();
        let dup_slots: Vec<usize> = others.iter().copied().step_by(2).take(dups_per_scene).collect();
        let dup_slots = if dup_slots.len() < dups_per_scene {
            others[..dups_per_scene].to_vec()
        } else {
            dup_slots
        };
        for i in 0..per_scene {
            let duplicate = dup_slots.contains(&i);
            let content = if i == anchor {
                base.clone()
            } else if duplicate {
                loop {
                    let c = near_copy(&base, &mut rng);
                    if cosine(&dedup_feature(&c), &base_f) > DUP_MIN_SIM {
                        break c;
                    }
                }
            } else {
                let k = images.len() + i;
                let (ch, cw) = CONTENT_SIZES[k % CONTENT_SIZES.len()];
                loop {
                    let c = content_image(ch, cw, &mut rng);
                    if cosine(&dedup_feature(&c), &base_f) < DISTINCT_MAX_SIM {
                        break c;
                    }
                }
            };
            let (img, content_box) = with_border(&content, &mut rng);
            let path = format!("{scene}/img_{i:02}.pgm");
            save_pgm(&img, root.join(&path))?;
            images.push(PlantedImage {
                path,
                scene: scene.clone(),
                duplicate,
                anchor: i == anchor,
                content: content_box,
            });
        }
    }
    let mut tsv = String::from("path\tscene\tduplicate\tanchor\ttop\tleft\theight\twidth\n");
    for p in &images {
        let b = p.content;
        writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.path, p.scene, p.duplicate, p.anchor, b.top, b.left, b.height, b.width
        )
        .unwrap();
    }
    let manifest = root.join("plants.tsv");
    fs::write(&manifest, tsv).map_err(|e| Error::io(format!("writing {}", manifest.display()), e))?;
    Ok(CurationCorpus {
        root: root.to_path_buf(),
        images,
        seed,
    })
}
