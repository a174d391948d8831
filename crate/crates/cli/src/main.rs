//! `dugi` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures. Diagnostics go to stderr; stdout carries only the
//! documented summaries.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dugi_core::config::RunConfig;
use dugi_core::frequency::{apply_filter, build_filter, RadialFilterParams};
use dugi_core::imaging::{curate, load_gray, save_gray, write_manifest, GrayImage, DEFAULT_DEDUP_THRESHOLD};
use dugi_core::masking::{entropy_map, mask_visualization, select_mask, MaskStrategy, TokenGrid};
use dugi_core::model::{write_grid, Model, ModelConfig};
use dugi_core::synth::{write_curation_corpus, write_pretrain_corpus, SynthParams};
use dugi_core::training::{model_grad_check, train};
use dugi_core::{Error, FilterVariant};

#[derive(Parser, Debug)]
#[command(
    name = "dugi",
    version,
    about = "Entropy-masked, frequency-guided MAE pretraining for infrared images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop zero borders, deduplicate per scene and report resolutions.
    Curate {
        /// Directory scanned recursively for .pgm/.png images.
        #[arg(long)]
        input: PathBuf,
        /// Optional `path<TAB>scene` file; defaults to each image's parent directory.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Cosine similarity above which a candidate is a duplicate of its scene anchor.
        #[arg(long, default_value_t = DEFAULT_DEDUP_THRESHOLD)]
        threshold: f64,
        /// Output manifest: `path<TAB>scene<TAB>kept<TAB>max_sim`.
        #[arg(long)]
        out: PathBuf,
        /// Output resolution CSV of the cropped contents.
        #[arg(long)]
        stats: PathBuf,
        /// Directory receiving the cropped images.
        #[arg(long)]
        cropped_out: Option<PathBuf>,
        /// Seed for anchor selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain a model from a `key = value` config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `mask_strategy`.
        #[arg(long, value_parser = parse_strategy)]
        mask_strategy: Option<MaskStrategy>,
        /// Overrides `max_steps`.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write an entropy map and the kept/masked token picture of one image.
    MaskViz {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        lambda: f64,
        /// Token side in pixels.
        #[arg(long, default_value_t = 16)]
        patch: usize,
        /// Writes `<out>_entropy.pgm` and `<out>_mask.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter one image through the adaptive radial spectrum filter.
    AfdmApply {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take α, β, r and the variant from a checkpoint instead of the flags.
        #[arg(long, conflicts_with_all = ["alpha", "beta", "radius"])]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Defaults to min(h, w)/8.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, value_enum, default_value_t = Variant::Notch)]
        variant: Variant,
        /// Also write the centered filter field as a PGM, gain 1 mapped to 255.
        #[arg(long)]
        field_out: Option<PathBuf>,
    },
    /// Export the F1..F4 feature grids of one image.
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Directory receiving F1.bin .. F4.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every model parameter on a toy config.
    GradCheck {
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of pretraining images.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = Kind::Pretrain)]
        kind: Kind,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Literal,
    Notch,
}

impl From<Variant> for FilterVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Literal => FilterVariant::Literal,
            Variant::Notch => FilterVariant::Notch,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    /// Blob/ramp/checkerboard images for pretraining.
    Pretrain,
    /// Scenes of 5 images (2 planted duplicates each) with zero borders.
    Curation,
}

fn parse_strategy(s: &str) -> Result<MaskStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn is_image(p: &Path) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("pgm" | "png"))
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let p = entry.map_err(|e| Failure::Runtime(e.to_string()))?.path();
        if p.is_dir() {
            collect_images(root, &p, out)?;
        } else if is_image(&p) {
            let rel = p.strip_prefix(root).unwrap();
            let parts: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

fn read_scenes(path: &Path) -> Result<HashMap<String, String>, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (p, s) = line
            .split_once('\t')
            .ok_or_else(|| Failure::Usage(format!("{} line {}: expected `path<TAB>scene`", path.display(), i + 1)))?;
        map.insert(p.trim().to_string(), s.trim().to_string());
    }
    Ok(map)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run_curate(
    input: &Path,
    scenes: Option<&Path>,
    threshold: f64,
    out: &Path,
    stats: &Path,
    cropped_out: Option<&Path>,
    seed: u64,
) -> Result<(), Failure> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Failure::Usage(format!(
            "--threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut files = Vec::new();
    collect_images(input, input, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Failure::Runtime(format!(
            "no .pgm or .png images under {}",
            input.display()
        )));
    }
    let scene_map = scenes.map(read_scenes).transpose()?;
    let items: Vec<(String, String)> = files
        .into_iter()
        .map(|f| {
            let scene = match &scene_map {
                Some(m) => m.get(&f).cloned().unwrap_or_else(|| "unassigned".into()),
                None => f.rsplit_once('/').map_or(".", |(d, _)| d).to_string(),
            };
            (f, scene)
        })
        .collect();
    let result = curate(input, &items, threshold, seed, cropped_out)?;
    write_manifest(&result.entries, out)?;
    write_text(stats, &result.stats.to_csv())?;
    let excluded = result.entries.iter().filter(|e| !e.kept).count();
    println!(
        "{} images, {} kept, {} excluded, {} skipped",
        result.entries.len() + result.stats.skipped.len(),
        result.entries.len() - excluded,
        excluded,
        result.stats.skipped.len()
    );
    Ok(())
}

fn run_pretrain(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    strategy: Option<MaskStrategy>,
    max_steps: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = strategy {
        cfg.train.mask_strategy = s;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = train(&cfg.model, &cfg.train, out)?;
    println!(
        "{} steps, final loss {}, metrics {}, checkpoint {}",
        outcome.steps,
        outcome.losses.last().copied().unwrap_or(0.0),
        outcome.metrics_path.display(),
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_mask_viz(image: &Path, lambda: f64, patch: usize, out: &Path) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&lambda) || patch == 0 {
        return Err(Failure::Usage(
            "--lambda must lie in [0, 1) and --patch must be positive".into(),
        ));
    }
    let img = load_gray(image)?;
    let grid = TokenGrid::from_image(&img, patch)?;
    let sel = select_mask(&grid, lambda)?;
    save_gray(
        &entropy_map(&img, &sel.entropies, patch)?,
        with_suffix(out, "_entropy.pgm"),
    )?;
    save_gray(&mask_visualization(&img, &sel, patch)?, with_suffix(out, "_mask.pgm"))?;
    println!("{} tokens, {} kept", sel.len(), sel.keep_indices.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_afdm(
    image: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    alpha: f64,
    beta: f64,
    radius: Option<f64>,
    variant: Variant,
    field_out: Option<&Path>,
) -> Result<(), Failure> {
    let img = load_gray(image)?;
    let (h, w) = (img.height(), img.width());
    let (params, variant) = match ckpt {
        Some(p) => {
            let m = Model::load(p)?;
            (m.afdm_params(), m.config.afdm_variant)
        }
        None => {
            let r = radius.unwrap_or(h.min(w) as f64 / 8.0);
            let p = RadialFilterParams::from_mapped(alpha, beta, r).map_err(|e| Failure::Usage(e.to_string()))?;
            (p, variant.into())
        }
    };
    let field = build_filter(&params, h, w, variant)?;
    let filtered = apply_filter(&img.to_real(), h, w, &field)?;
    save_gray(&GrayImage::from_real(h, w, &filtered)?, out)?;
    if let Some(p) = field_out {
        let gain: Vec<f64> = field.values.iter().map(|v| v * 255.0).collect();
        save_gray(&GrayImage::from_real(h, w, &gain)?, p)?;
    }
    println!(
        "alpha {} beta {} radius {} variant {variant}",
        params.alpha(),
        params.beta(),
        params.radius()
    );
    Ok(())
}

fn run_features(ckpt: &Path, image: &Path, out: &Path) -> Result<(), Failure> {
    let model = Model::load(ckpt)?;
    let img = load_gray(image)?;
    let pyramid = model.feature_pyramid(&img)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for (i, t) in pyramid.levels().iter().enumerate() {
        let name = format!("F{}", i + 1);
        write_grid(&out.join(format!("{name}.bin")), &name, t)?;
        let s = t.shape();
        println!("{name} {}x{}x{}", s[0], s[1], s[2]);
    }
    Ok(())
}

fn run_grad_check(size: usize, tol: f64, step: f64, seed: u64) -> Result<(), Failure> {
    let cfg = ModelConfig {
        input_size: size,
        ..ModelConfig::toy()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = model_grad_check(&cfg, size, step, tol, seed)?;
    let names = Model::new(cfg, seed)?.params.names().to_vec();
    let failures = report.failures().count();
    println!(
        "{} scalars checked, max error {:e}, {failures} above {tol:e}",
        report.entries.len(),
        report.max_error()
    );
    if let Some(e) = report.failures().next() {
        return Err(Failure::Runtime(format!(
            "gradient check failed: {}[{}] analytic {:e} numeric {:e}",
            names[e.param], e.element, e.analytic, e.numeric
        )));
    }
    Ok(())
}

fn run_synth(out: &Path, n: usize, seed: u64, size: usize, kind: Kind) -> Result<(), Failure> {
    match kind {
        Kind::Pretrain => {
            let params = SynthParams {
                size,
                ..SynthParams::default()
            };
            let paths = write_pretrain_corpus(out, n, seed, &params).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{} images written to {}", paths.len(), out.display());
        }
        Kind::Curation => {
            let per_scene = 5;
            if n == 0 || !n.is_multiple_of(per_scene) {
                return Err(Failure::Usage(format!(
                    "--n must be a positive multiple of {per_scene}"
                )));
            }
            let corpus = write_curation_corpus(out, n / per_scene, per_scene, 2, seed)?;
            println!(
                "{} images, {} planted duplicates; ground truth in {}",
                corpus.images.len(),
                corpus.duplicates().len(),
                out.join("plants.tsv").display()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Curate {
            input,
            scenes,
            threshold,
            out,
            stats,
            cropped_out,
            seed,
        } => run_curate(
            &input,
            scenes.as_deref(),
            threshold,
            &out,
            &stats,
            cropped_out.as_deref(),
            seed,
        ),
        Command::Pretrain {
            config,
            out,
            seed,
            mask_strategy,
            max_steps,
        } => run_pretrain(&config, &out, seed, mask_strategy, max_steps),
        Command::MaskViz {
            image,
            lambda,
            patch,
            out,
        } => run_mask_viz(&image, lambda, patch, &out),
        Command::AfdmApply {
            image,
            out,
            ckpt,
            alpha,
            beta,
            radius,
            variant,
            field_out,
        } => run_afdm(
            &image,
            &out,
            ckpt.as_deref(),
            alpha,
            beta,
            radius,
            variant,
            field_out.as_deref(),
        ),
        Command::Features { ckpt, image, out } => run_features(&ckpt, &image, &out),
        Command::GradCheck { size, tol, step, seed } => run_grad_check(size, tol, step, seed),
        Command::Synth {
            out,
            n,
            seed,
            size,
            kind,
        } => run_synth(&out, n, seed, size, kind),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
