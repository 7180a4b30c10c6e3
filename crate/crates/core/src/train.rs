//! Window sampling, masking, optimization loops.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::rng::{self, Rng};

/// Samples per gradient chunk. Chunks are summed in index order so results
/// do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Fraction of iterations spent in linear warmup.
    pub warmup_frac: f64,
    /// Cosine decays to `lr * min_lr_frac`.
    pub min_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub context_len: usize,
    pub channels_per_sample: usize,
    pub mask_fraction: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 2000,
            lr: 1e-3,
            warmup_frac: 0.05,
            min_lr_frac: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            context_len: 512,
            channels_per_sample: 3,
            mask_fraction: 0.5,
            seed: 0,
            checkpoint_every: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let f = |field: &str, msg: &str| Err(Error::config(format!("train.{field}"), msg));
        if self.batch_size == 0 {
            return f("batch_size", "must be positive");
        }
        if self.context_len == 0 || patch_size == 0 || self.context_len % patch_size != 0 {
            return f("context_len", "must be a positive multiple of the patch size");
        }
        if self.channels_per_sample == 0 {
            return f("channels_per_sample", "must be >= 1");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return f("mask_fraction", "must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return f("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return f("warmup_frac", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return f("beta1", "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return f("eps", "must be positive");
        }
        if self.grad_clip < 0.0 {
            return f("grad_clip", "must be >= 0");
        }
        Ok(())
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup: (self.warmup_frac * self.iterations as f64).round() as usize,
            total: self.iterations,
            min_frac: self.min_lr_frac,
        }
    }
}

/// Linear warmup, then cosine decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_frac: f64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            warmup: 0,
            total: 0,
            min_frac: 1.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.lr;
        }
        let prog = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * prog).cos());
        self.lr * (self.min_frac + (1.0 - self.min_frac) * cos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub skipped: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            skipped: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected adaptive-moment update. Returns false (and counts a
/// skip) when any gradient is non-finite.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, lr: f64) -> Result<bool> {
    if params.len() != grads.len() || st.m.len() != params.len() {
        return Err(Error::invalid("parameter, gradient and state lengths differ"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        st.skipped += 1;
        log::warn!("non-finite gradient; step skipped ({} so far)", st.skipped);
        return Ok(false);
    }
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let mh = st.m[i] / bc1;
        let vh = st.v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + st.eps);
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub source: usize,
    pub start: usize,
    pub channels: Vec<usize>,
    pub context: Array2<f64>,
    /// Empty (zero columns) when `horizon` is 0.
    pub target: Array2<f64>,
}

/// One batch of windows: uniform trajectory, uniform start, and
/// `channels_per_sample` channels drawn without replacement (all channels,
/// shuffled, when a trajectory has fewer).
pub fn sample_training_window(
    series: &[Array2<f64>],
    cfg: &TrainConfig,
    horizon: usize,
    rng: &mut Rng,
) -> Result<Vec<Window>> {
    let need = cfg.context_len + horizon;
    let usable: Vec<usize> = (0..series.len()).filter(|&i| series[i].ncols() >= need).collect();
    for i in (0..series.len()).filter(|i| !usable.contains(i)) {
        log::info!("trajectory {i} skipped: {} steps < {need}", series[i].ncols());
    }
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!("no trajectory has {need} steps")));
    }
    let mut out = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let src = usable[rng.random_range(0..usable.len())];
        let x = &series[src];
        let start = rng.random_range(0..=x.ncols() - need);
        let c = x.nrows();
        let mut channels: Vec<usize> = if c > cfg.channels_per_sample {
            index::sample(rng, c, cfg.channels_per_sample).into_vec()
        } else {
            (0..c).collect()
        };
        channels.shuffle(rng);
        let pick = x.select(ndarray::Axis(0), &channels);
        out.push(Window {
            source: src,
            start,
            context: pick.slice(s![.., start..start + cfg.context_len]).to_owned(),
            target: pick.slice(s![.., start + cfg.context_len..start + need]).to_owned(),
            channels,
        });
    }
    Ok(out)
}

/// Per channel, exactly `round(fraction * n_patches)` masked patches.
pub fn mask_patches_channel_independent(channels: usize, n_patches: usize, fraction: f64, rng: &mut Rng) -> Array2<bool> {
    let k = ((fraction.clamp(0.0, 1.0)) * n_patches as f64).round() as usize;
    let mut mask = Array2::from_elem((channels, n_patches), false);
    for c in 0..channels {
        for i in index::sample(rng, n_patches, k.min(n_patches)) {
            mask[[c, i]] = true;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forecast,
    Mlm,
}

#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    /// NDJSON loss log.
    pub log: Option<PathBuf>,
    /// Periodic and diagnostic checkpoints go here.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct LogRecord {
    step: usize,
    loss: f64,
    lr: f64,
    wallclock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub skipped: u64,
}

/// Mean loss and gradient over a batch.
pub fn batch_loss_grad(model: &Model, task: Task, batch: &[Window], cfg: &TrainConfig, step: usize) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = model.zero_grads();
            let mut loss = 0.0;
            for (j, w) in chunk.iter().enumerate() {
                loss += match task {
                    Task::Forecast => model.forecast_loss(&w.context, &w.target, Some(&mut g))?,
                    Task::Mlm => {
                        let n = w.context.ncols() / model.config.patch_size;
                        let mut r = rng::stream(cfg.seed, "mask", (step * cfg.batch_size + ci * CHUNK + j) as u64);
                        let mask = mask_patches_channel_independent(w.context.nrows(), n, cfg.mask_fraction, &mut r);
                        model.mlm_loss(&w.context, &mask, Some(&mut g))?
                    }
                };
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = model.zero_grads();
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let b = batch.len() as f64;
    grad.iter_mut().for_each(|v| *v /= b);
    Ok((total / b, grad))
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|v| *v *= s);
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs the optimization loop on an existing model.
pub fn train_model(model: &mut Model, task: Task, series: &[Array2<f64>], cfg: &TrainConfig, io: &TrainIo) -> Result<TrainReport> {
    cfg.validate(model.config.patch_size)?;
    if series.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let horizon = match task {
        Task::Forecast => model.config.horizon,
        Task::Mlm => 0,
    };
    let sched = cfg.schedule();
    let mut st = AdamState::new(model.n_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut log = match &io.log {
        Some(p) => {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    let pool = pool(cfg.workers)?;
    let t0 = Instant::now();
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.iterations),
        lrs: Vec::with_capacity(cfg.iterations),
        skipped: 0,
    };
    for step in 0..cfg.iterations {
        let mut r = rng::stream(cfg.seed, "batch", step as u64);
        let batch = sample_training_window(series, cfg, horizon, &mut r)?;
        let (loss, mut grad) = pool.install(|| batch_loss_grad(model, task, &batch, cfg, step))?;
        if !loss.is_finite() {
            if let Some(dir) = &io.checkpoint_dir {
                let ck = checkpoint(model, task, cfg, step);
                ck.save(&dir.join("diverged.ckpt"))?;
            }
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        clip(&mut grad, cfg.grad_clip);
        let lr = sched.at(step);
        optimizer_step(&mut model.params, &grad, &mut st, lr)?;
        report.losses.push(loss);
        report.lrs.push(lr);
        if let Some(w) = log.as_mut() {
            let rec = LogRecord {
                step,
                loss,
                lr,
                wallclock: t0.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &io.checkpoint_dir {
                checkpoint(model, task, cfg, step + 1).save(&dir.join(format!("step_{}.ckpt", step + 1)))?;
            }
        }
        if step % 100 == 0 {
            log::debug!("{task:?} step {step} loss {loss:.5} lr {lr:.2e}");
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    report.skipped = st.skipped;
    Ok(report)
}

fn checkpoint(model: &Model, task: Task, cfg: &TrainConfig, steps: usize) -> Checkpoint {
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("task".into(), serde_json::to_value(task).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    metadata.insert("train_seed".into(), cfg.seed.to_string());
    metadata.insert("steps".into(), steps.to_string());
    Checkpoint {
        model: model.clone(),
        metadata,
    }
}

pub fn pretrain_mlm(series: &[Array2<f64>], mcfg: &ModelConfig, cfg: &TrainConfig, io: &TrainIo) -> Result<(Checkpoint, TrainReport)> {
    let mut model = Model::new(mcfg.clone())?;
    let rep = train_model(&mut model, Task::Mlm, series, cfg, io)?;
    Ok((checkpoint(&model, Task::Mlm, cfg, cfg.iterations), rep))
}

/// Fields that must agree for an encoder to be transplanted.
fn encoder_compatible(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.patch_size == b.patch_size
        && a.d_model == b.d_model
        && a.n_layers == b.n_layers
        && a.n_heads == b.n_heads
        && a.poly_degrees == b.poly_degrees
        && a.n_poly == b.n_poly
        && a.n_rff == b.n_rff
        && a.rff_sigma == b.rff_sigma
        && a.use_dyn_embed == b.use_dyn_embed
        && a.ffn_mult == b.ffn_mult
        && a.rope_fraction == b.rope_fraction
}

/// Builds a forecast model, optionally copying the encoder and frozen
/// buffers from an MLM checkpoint.
pub fn init_forecast_model(mcfg: &ModelConfig, init: Option<&Checkpoint>) -> Result<Model> {
    let mut model = Model::new(mcfg.clone())?;
    if let Some(ck) = init {
        if !encoder_compatible(&ck.model.config, mcfg) {
            return Err(Error::config("model", "initial checkpoint encoder does not match the model config"));
        }
        let r = model.layout.encoder_range();
        model.params[r.clone()].copy_from_slice(&ck.model.params[r]);
        model.frozen = ck.model.frozen.clone();
    }
    Ok(model)
}

pub fn train_forecast(
    series: &[Array2<f64>],
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    io: &TrainIo,
) -> Result<(Checkpoint, TrainReport)> {
    let mut model = init_forecast_model(mcfg, init)?;
    let rep = train_model(&mut model, Task::Forecast, series, cfg, io)?;
    let mut ck = checkpoint(&model, Task::Forecast, cfg, cfg.iterations);
    ck.metadata.insert("mlm_init".into(), init.is_some().to_string());
    Ok((ck, rep))
}
