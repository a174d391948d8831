//! Masked-patch reconstruction objective, AdamW and the pretraining loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_gray, random_crop, GrayImage};
use crate::masking::{MaskSelection, MaskStrategy, TokenSource};
use crate::model::{Model, ModelConfig, ParamSet, PreparedInput};
use crate::numerics::{grad_check, GradCheckReport, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub min_lr: f64,
    /// Image directory or manifest file.
    pub corpus: PathBuf,
    pub crop_size: usize,
    /// Stops after this many steps instead of `epochs` full passes.
    pub max_steps: Option<usize>,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub mask_strategy: MaskStrategy,
    pub entropy_source: TokenSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            batch_size: 8,
            epochs: 20,
            warmup_epochs: 2,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            min_lr: 0.0,
            corpus: PathBuf::new(),
            crop_size: 64,
            max_steps: None,
            checkpoint_every: 0,
            mask_strategy: MaskStrategy::Entropy,
            entropy_source: TokenSource::RawPixels,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return bad("weight_decay must be non-negative and 0 <= min_lr <= base_lr".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Mean of `(pred − target)²`; 0 for empty inputs.
pub fn masked_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// Differentiable [`masked_mse`].
pub fn masked_mse_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps);
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// AdamW moments, one array per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Norm gains, biases, scalar filter parameters and the mask token skip decay.
pub fn decay_exempt(name: &str, t: &Tensor) -> bool {
    t.shape().len() == 1 || name == "dec.mask_token"
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients and {} moment arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    for (i, (name, t)) in params.iter().enumerate() {
        if grads[i].len() != t.numel() || state.m[i].len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: t.shape().to_vec(),
                right: vec![grads[i].len()],
            });
        }
        if grads[i].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let (b1, b2) = cfg.betas;
    state.step += 1;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay: Vec<bool> = params.iter().map(|(n, t)| !decay_exempt(n, t)).collect();
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let shrink = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p = *p * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one masked reconstruction.
pub fn image_loss_and_grads(
    model: &Model,
    crop: &GrayImage,
    lambda: f64,
    strategy: MaskStrategy,
    source: TokenSource,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mask = model.select_units(crop, lambda, strategy, source, Some(rng))?;
    masked_loss_and_grads(model, &model.prepare(crop), &mask)
}

/// Loss and parameter gradients for a prepared input and a fixed mask.
pub fn masked_loss_and_grads(
    model: &Model,
    input: &PreparedInput,
    mask: &MaskSelection,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let img = tape.constant(input.tensor());
    let out = model.forward_masked(&mut tape, &b, img, &input.layout, mask)?;
    let target = model.targets(&mut tape, img, &out.loss_units)?;
    let (Some(pred), Some(target)) = (out.prediction, target) else {
        let zeros = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        return Ok((0.0, zeros));
    };
    let loss = masked_mse_on_tape(&mut tape, pred, target)?;
    let value = tape.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("reconstruction loss".into()));
    }
    let g = tape.backward(loss)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| g.get_or_zeros(v, t.numel()))
        .collect();
    Ok((value, grads))
}

/// Finite-difference check of every model parameter on one synthetic
/// `size×size` image with half of the units masked.
pub fn model_grad_check(config: &ModelConfig, size: usize, step: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = crate::synth::SynthParams {
        size,
        ..Default::default()
    };
    let img = crate::synth::synth_image(&params, &mut rng);
    let input = model.prepare(&img);
    let mask = model.select_units(&img, 0.5, MaskStrategy::Entropy, TokenSource::RawPixels, None)?;
    let mut probe = model.clone();
    grad_check(
        |p| {
            probe.params.replace_all(p.to_vec())?;
            masked_loss_and_grads(&probe, &input, &mask)
        },
        model.params.tensors(),
        step,
        tol,
    )
}

/// Image paths named by a directory (sorted `.pgm`/`.png` files) or a
/// manifest whose first tab-separated field is a path. Manifest rows whose
/// third field is `false` are skipped.
pub fn resolve_corpus(path: &Path) -> Result<Vec<PathBuf>> {
    let io = |e| Error::io(format!("reading corpus {}", path.display()), e);
    let mut out = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(io)? {
            let p = entry.map_err(io)?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("pgm" | "png")) {
                out.push(p);
            }
        }
        out.sort();
    } else {
        let text = fs::read_to_string(path).map_err(io)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.get(2) == Some(&"false") {
                continue;
            }
            let p = Path::new(fields[0]);
            out.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
        }
    }
    if out.is_empty() {
        return Err(Error::Precondition(format!(
            "corpus {} contains no images",
            path.display()
        )));
    }
    Ok(out)
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub skipped: usize,
    pub losses: Vec<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub model: Model,
}

/// Pretrains a fresh model and writes `metrics.csv` plus checkpoints to `out_dir`.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.crop_size == 0 || !cfg.crop_size.is_multiple_of(model_cfg.pad_multiple()) {
        return Err(Error::InvalidArgument(format!(
            "crop_size must be a positive multiple of {}",
            model_cfg.pad_multiple()
        )));
    }
    let paths = resolve_corpus(&cfg.corpus)?;
    let mut images = Vec::with_capacity(paths.len());
    let mut skipped = 0;
    for p in &paths {
        let img = load_gray(p)?;
        if img.height() < cfg.crop_size || img.width() < cfg.crop_size {
            skipped += 1;
        } else {
            images.push(img);
        }
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} of {} images smaller than {} pixels",
            paths.len(),
            cfg.crop_size
        );
    }
    if images.is_empty() {
        return Err(Error::Precondition(format!(
            "all {} corpus images are smaller than the {} crop",
            paths.len(),
            cfg.crop_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    if warmup_steps >= total_steps {
        warmup_steps = total_steps - 1;
        log::warn!("warmup shortened to {warmup_steps} steps to fit a {total_steps}-step run");
    }
    log::info!(
        "{} images, {steps_per_epoch} steps per epoch, {total_steps} steps, {warmup_steps} warmup",
        images.len()
    );

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut state = OptimState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut csv = String::from("step,epoch,lr,loss\n");
    let mut losses = Vec::with_capacity(total_steps);
    let metrics_path = out_dir.join("metrics.csv");

    for step in 1..=total_steps {
        let epoch = (step - 1) / steps_per_epoch;
        let slot = (step - 1) % steps_per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let batch = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(order.len())];
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut loss = 0.0;
        for &i in batch {
            let crop = random_crop(&images[i], cfg.crop_size, &mut rng)?;
            let (l, g) = image_loss_and_grads(
                &model,
                &crop,
                model_cfg.mask_lambda,
                cfg.mask_strategy,
                cfg.entropy_source,
                &mut rng,
            )?;
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, v) in acc.iter_mut().zip(gi) {
                    *a += v * scale;
                }
            }
        }
        let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr);
        adamw_step(&mut model.params, &grads, &mut state, lr, cfg)?;
        writeln!(csv, "{step},{epoch},{lr},{loss}").unwrap();
        losses.push(loss);
        log::debug!("step {step} epoch {epoch} lr {lr:e} loss {loss:.6}");

        let epoch_done = slot + 1 == steps_per_epoch;
        if epoch_done && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && step < total_steps {
            model.save(&out_dir.join(format!("checkpoint_epoch{}.bin", epoch + 1)))?;
            fs::write(&metrics_path, &csv).map_err(|e| Error::io("writing metrics", e))?;
        }
        if epoch_done {
            log::info!("epoch {} finished at step {step}, loss {loss:.6}", epoch + 1);
        }
    }

    fs::write(&metrics_path, &csv).map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
    let checkpoint_path = out_dir.join("model.bin");
    model.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        steps: total_steps,
        skipped,
        losses,
        metrics_path,
        checkpoint_path,
        model,
    })
}

/// Mean of the first and last `window` losses.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}
