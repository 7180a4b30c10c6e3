//! Forecast metrics, rollout, zero-shot harness, completion, and the
//! correlation dimension.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, label_hash};
use crate::stats;
use crate::train::mask_patches_channel_independent;

/// 200-scale sMAPE; zero-denominator terms count as 0.
pub fn smape(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    let n = pred.len() as f64;
    let tot: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, y)| {
            let den = p.abs() + y.abs();
            if den == 0.0 {
                0.0
            } else {
                (p - y).abs() / den
            }
        })
        .sum();
    200.0 * tot / n
}

pub fn mae(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    pred.iter().zip(truth.iter()).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64
}

pub fn mse(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    pred.iter().zip(truth.iter()).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Rank correlation per channel (row) over the horizon, averaged. Any
/// constant channel makes the result NaN.
pub fn spearman(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, y) in pred.rows().into_iter().zip(truth.rows()) {
        let rp = stats::average_ranks(&p.to_vec());
        let ry = stats::average_ranks(&y.to_vec());
        let r = stats::pearson(&rp, &ry);
        if r.is_nan() {
            return f64::NAN;
        }
        acc += r;
    }
    acc / pred.nrows() as f64
}

/// Anything that maps a `C × T` context to a `C × H` forecast.
pub trait Forecaster: Sync {
    fn horizon(&self) -> usize;
    fn predict(&self, context: &Array2<f64>) -> Result<Array2<f64>>;
}

impl Forecaster for Model {
    fn horizon(&self) -> usize {
        self.config.horizon
    }
    fn predict(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        self.forecast(context)
    }
}

/// Repeats the last observed value.
#[derive(Debug, Clone, Copy)]
pub struct Persistence {
    pub horizon: usize,
}

impl Forecaster for Persistence {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn predict(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        persistence_baseline(context, self.horizon)
    }
}

pub fn persistence_baseline(context: &Array2<f64>, horizon: usize) -> Result<Array2<f64>> {
    if context.ncols() == 0 {
        return Err(Error::invalid("empty context"));
    }
    let last = context.column(context.ncols() - 1);
    Ok(Array2::from_shape_fn((context.nrows(), horizon), |(c, _)| last[c]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `C × reached`.
    pub forecast: Array2<f64>,
    /// False when a non-finite block stopped the rollout early.
    pub complete: bool,
}

/// Autoregressive extension: each block's forecast is appended to the
/// context, which slides to keep its length.
pub fn rollout_forecast<F: Forecaster + ?Sized>(f: &F, context: &Array2<f64>, total_horizon: usize) -> Result<Rollout> {
    let h = f.horizon();
    if total_horizon < h {
        return Err(Error::invalid(format!("total horizon {total_horizon} < model horizon {h}")));
    }
    let len = context.ncols();
    let mut ctx = context.clone();
    let mut out = Array2::zeros((context.nrows(), 0));
    while out.ncols() < total_horizon {
        let block = f.predict(&ctx)?;
        if block.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite forecast; rollout stopped at {}", out.ncols());
            return Ok(Rollout {
                forecast: out,
                complete: false,
            });
        }
        let take = h.min(total_horizon - out.ncols());
        out = concatenate![Axis(1), out, block.slice(s![.., ..take])];
        let joined = concatenate![Axis(1), ctx, block];
        ctx = joined.slice(s![.., joined.ncols() - len..]).to_owned();
    }
    Ok(Rollout {
        forecast: out,
        complete: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub n_windows: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![16, 32, 64, 128],
            n_windows: 6,
            context_len: 512,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("eval.horizons", "must be nonempty and positive"));
        }
        if self.n_windows == 0 {
            return Err(Error::config("eval.n_windows", "must be positive"));
        }
        if self.context_len == 0 {
            return Err(Error::config("eval.context_len", "must be positive"));
        }
        Ok(())
    }

    fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub system: String,
    pub window: usize,
    pub horizon: usize,
    pub smape: f64,
    pub mae: f64,
    pub mse: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agg {
    pub median: f64,
    pub siqr: f64,
    pub n: usize,
    pub nan: usize,
}

impl Agg {
    pub fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        Agg {
            median: stats::median(&finite),
            siqr: stats::semi_iqr(&finite),
            n: finite.len(),
            nan: values.len() - finite.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    pub smape: Agg,
    pub mae: Agg,
    pub mse: Agg,
    pub spearman: Agg,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub records: Vec<MetricRecord>,
    pub summary: Vec<HorizonSummary>,
}

impl MetricReport {
    /// Per-system window means, then median and semi-IQR across systems.
    pub fn aggregate(model: &str, records: Vec<MetricRecord>) -> Self {
        let mut by_h: BTreeMap<usize, BTreeMap<&str, Vec<&MetricRecord>>> = BTreeMap::new();
        for r in &records {
            by_h.entry(r.horizon).or_default().entry(&r.system).or_default().push(r);
        }
        let summary = by_h
            .iter()
            .map(|(&horizon, systems)| {
                let per = |f: fn(&MetricRecord) -> f64| -> Vec<f64> {
                    systems
                        .values()
                        .map(|rs| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64)
                        .collect()
                };
                HorizonSummary {
                    horizon,
                    smape: Agg::of(&per(|r| r.smape)),
                    mae: Agg::of(&per(|r| r.mae)),
                    mse: Agg::of(&per(|r| r.mse)),
                    spearman: Agg::of(&per(|r| r.spearman)),
                }
            })
            .collect();
        MetricReport {
            model: model.into(),
            records,
            summary,
        }
    }

    pub fn at(&self, horizon: usize) -> Option<&HorizonSummary> {
        self.summary.iter().find(|s| s.horizon == horizon)
    }

    pub fn csv_header() -> &'static str {
        "model,system,window,horizon,smape,mae,mse,spearman"
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::csv_header());
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.model, r.system, r.window, r.horizon, r.smape, r.mae, r.mse, r.spearman
            ));
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct S<'a> {
            model: &'a str,
            summary: &'a [HorizonSummary],
        }
        Ok(serde_json::to_string_pretty(&S {
            model: &self.model,
            summary: &self.summary,
        })?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join(format!("{stem}.csv")))?.write_all(self.to_csv().as_bytes())?;
        fs::File::create(dir.join(format!("{stem}.json")))?.write_all(self.summary_json()?.as_bytes())?;
        Ok(())
    }
}

/// The `w`-th evaluation window of a system: `(trajectory index, start)`.
pub fn window_start(system: &str, w: usize, n_traj: usize, traj_len: usize, cfg: &EvalConfig) -> Option<(usize, usize)> {
    let need = cfg.context_len + cfg.max_horizon();
    if traj_len < need || n_traj == 0 {
        return None;
    }
    let mut r = rng::stream(cfg.seed, "eval_window", label_hash(system).wrapping_add(w as u64));
    Some((w % n_traj, r.random_range(0..=traj_len - need)))
}

/// Metrics for every (system, window, horizon). Systems are `(id,
/// trajectories)`; all channels are used. Horizons beyond the model's use
/// rollout; metrics at `h` cover the first `h` steps.
pub fn evaluate_zero_shot<F: Forecaster + ?Sized>(
    f: &F,
    name: &str,
    systems: &[(String, Vec<Array2<f64>>)],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let maxh = cfg.max_horizon().max(f.horizon());
    let per: Vec<Result<Vec<MetricRecord>>> = systems
        .par_iter()
        .map(|(id, trajs)| {
            let mut recs = Vec::new();
            let len = trajs.iter().map(|t| t.ncols()).min().unwrap_or(0);
            for w in 0..cfg.n_windows {
                let Some((ti, start)) = window_start(id, w, trajs.len(), len, cfg) else {
                    log::info!("system {id}: trajectories too short for evaluation");
                    break;
                };
                let x = &trajs[ti];
                let ctx = x.slice(s![.., start..start + cfg.context_len]).to_owned();
                let truth = x.slice(s![.., start + cfg.context_len..]);
                let ro = rollout_forecast(f, &ctx, maxh)?;
                for &h in &cfg.horizons {
                    if ro.forecast.ncols() < h {
                        continue;
                    }
                    let p = ro.forecast.slice(s![.., ..h]);
                    let y = truth.slice(s![.., ..h]);
                    recs.push(MetricRecord {
                        system: id.clone(),
                        window: w,
                        horizon: h,
                        smape: smape(p, y),
                        mae: mae(p, y),
                        mse: mse(p, y),
                        spearman: spearman(p, y),
                    });
                }
            }
            Ok(recs)
        })
        .collect();
    let mut records = Vec::new();
    for p in per {
        records.extend(p?);
    }
    Ok(MetricReport::aggregate(name, records))
}

/// Correlation-dimension estimator variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GpEstimator {
    /// Maximum likelihood for `C(r) ∝ r^D` restricted to `[r_lo, r_hi]`.
    TruncatedMle,
    /// `1 + n / Σ ln(r / r_min)` over the window.
    ParetoTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Window bounds as quantiles of all pairwise distances.
    pub lo_quantile: f64,
    pub hi_quantile: f64,
    pub estimator: GpEstimator,
    /// Delay embedding used for single-channel input.
    pub embed_dim: usize,
    /// Only the first `max_points` states are used.
    pub max_points: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lo_quantile: 0.0005,
            hi_quantile: 0.01,
            estimator: GpEstimator::TruncatedMle,
            embed_dim: 5,
            max_points: 4096,
        }
    }
}

impl GpConfig {
    /// The percentile window and estimator exactly as written in the
    /// method description.
    pub fn literal() -> Self {
        Self {
            lo_quantile: 0.05,
            hi_quantile: 0.5,
            estimator: GpEstimator::ParetoTail,
            ..Self::default()
        }
    }
}

/// Points as rows. Channels × time input is transposed; one channel is
/// delay-embedded with τ at the first autocorrelation zero.
pub fn gp_points(values: &Array2<f64>, cfg: &GpConfig) -> Array2<f64> {
    if values.nrows() == 1 {
        let x = values.row(0).to_vec();
        let tau = stats::first_acf_zero(&x);
        let rows = stats::delay_embed(&x, cfg.embed_dim, tau);
        let n = rows.len();
        return Array2::from_shape_fn((n, cfg.embed_dim), |(i, j)| rows[i][j]);
    }
    values.t().to_owned()
}

/// All `i < j` Euclidean distances.
pub fn pairwise_distances(points: ArrayView2<f64>) -> Vec<f64> {
    let n = points.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(d2.sqrt());
        }
    }
    out
}

fn window_of(d: &mut [f64], lo_q: f64, hi_q: f64) -> (f64, f64) {
    let n = d.len();
    let lo_i = ((lo_q * n as f64) as usize).min(n - 1);
    let hi_i = ((hi_q * n as f64) as usize).min(n - 1);
    let lo = *d.select_nth_unstable_by(lo_i, f64::total_cmp).1;
    let hi = *d.select_nth_unstable_by(hi_i, f64::total_cmp).1;
    (lo, hi)
}

/// Solves `1/D + mean(x) + ρ^D ln ρ / (1 − ρ^D) = 0` with `x = ln(r/r_hi)`.
fn truncated_mle(mean_x: f64, ln_rho: f64) -> f64 {
    let f = |d: f64| {
        let rd = (d * ln_rho).exp();
        1.0 / d + mean_x + rd * ln_rho / (1.0 - rd)
    };
    let (mut lo, mut hi) = (1e-3, 50.0);
    if f(lo) <= 0.0 {
        return lo;
    }
    if f(hi) >= 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Grassberger–Procaccia correlation dimension of a `C × T` trajectory.
pub fn gp_correlation_dimension(values: &Array2<f64>, cfg: &GpConfig) -> Result<f64> {
    if !(0.0 <= cfg.lo_quantile && cfg.lo_quantile < cfg.hi_quantile && cfg.hi_quantile <= 1.0) {
        return Err(Error::config("dim.quantiles", "need 0 <= lo < hi <= 1"));
    }
    let pts = gp_points(values, cfg);
    let n = pts.nrows().min(cfg.max_points);
    if n < 512 {
        return Err(Error::InsufficientData(format!("{n} points; need at least 512")));
    }
    if pts.ncols() < 2 {
        return Err(Error::invalid("need at least two dimensions"));
    }
    let mut d = pairwise_distances(pts.slice(s![..n, ..]));
    let (lo, hi) = window_of(&mut d, cfg.lo_quantile, cfg.hi_quantile);
    let inside: Vec<f64> = d.into_iter().filter(|&r| r > lo && r < hi && r > 0.0).collect();
    if inside.len() < 100 {
        return Err(Error::InsufficientData(format!("{} distances in the window", inside.len())));
    }
    let m = inside.len() as f64;
    Ok(match cfg.estimator {
        GpEstimator::ParetoTail => {
            let s: f64 = inside.iter().map(|r| (r / lo).ln()).sum();
            1.0 + m / s
        }
        GpEstimator::TruncatedMle => {
            let mean_x = inside.iter().map(|r| (r / hi).ln()).sum::<f64>() / m;
            truncated_mle(mean_x, (lo / hi).ln())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub n_masks: usize,
    pub mask_fraction: f64,
    pub drop: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            n_masks: 5,
            mask_fraction: 0.5,
            drop: 512,
            context_len: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub truth: Array2<f64>,
    pub completions: Vec<Array2<f64>>,
    pub d2_truth: f64,
    pub d2_completion: f64,
}

/// Infills a `C × T` series block by block under a given per-block mask.
pub trait Infiller: Sync {
    fn patch_size(&self) -> usize;
    fn infill(&self, block: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>>;
}

impl Infiller for Model {
    fn patch_size(&self) -> usize {
        self.config.patch_size
    }
    fn infill(&self, block: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
        self.mlm_infill(block, mask)
    }
}

/// Drops the leading transient, masks half of each channel's patches
/// independently, infills, and compares correlation dimensions.
pub fn completion_eval<I: Infiller + ?Sized>(m: &I, values: &Array2<f64>, cfg: &CompletionConfig, gp: &GpConfig) -> Result<Completion> {
    if values.ncols() < 1024 || values.ncols() <= cfg.drop {
        return Err(Error::InsufficientData("completion needs at least 1024 points".into()));
    }
    let p = m.patch_size();
    if cfg.context_len == 0 || cfg.context_len % p != 0 {
        return Err(Error::config("completion.context_len", "must be a positive multiple of the patch size"));
    }
    let rest = values.slice(s![.., cfg.drop..]);
    let n_blocks = rest.ncols() / cfg.context_len;
    let truth = rest.slice(s![.., ..n_blocks * cfg.context_len]).to_owned();
    let d2_truth = gp_correlation_dimension(&truth, gp)?;
    let c = truth.nrows();
    let mut completions = Vec::with_capacity(cfg.n_masks);
    let mut d2s = Vec::with_capacity(cfg.n_masks);
    for k in 0..cfg.n_masks {
        let mut r = rng::stream(cfg.seed, "completion_mask", k as u64);
        let mut out = truth.clone();
        for b in 0..n_blocks {
            let cols = s![.., b * cfg.context_len..(b + 1) * cfg.context_len];
            let block = truth.slice(cols).to_owned();
            let mask = mask_patches_channel_independent(c, cfg.context_len / p, cfg.mask_fraction, &mut r);
            if mask.iter().any(|&v| v) {
                out.slice_mut(cols).assign(&m.infill(&block, &mask)?);
            }
        }
        d2s.push(gp_correlation_dimension(&out, gp)?);
        completions.push(out);
    }
    Ok(Completion {
        truth,
        completions,
        d2_truth,
        d2_completion: stats::mean(&d2s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn smape_closed_forms() {
        let y = array![[1.0, -2.0, 3.0]];
        assert_eq!(smape(y.view(), y.view()), 0.0);
        assert!((smape((-&y).view(), y.view()) - 200.0).abs() < 1e-12);
        assert!((smape(array![[2.0]].view(), array![[1.0]].view()) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(smape(array![[0.0]].view(), array![[0.0]].view()), 0.0);
    }

    #[test]
    fn hand_metrics() {
        let p = array![[1.0, 2.0, 3.0]];
        let y = array![[2.0, 2.0, 4.0]];
        assert!((mae(p.view(), y.view()) - 2.0 / 3.0).abs() < 1e-15);
        assert!((spearman(p.view(), p.view()) - 1.0).abs() < 1e-12);
        let down = array![[3.0, 2.0, 1.0]];
        assert!((spearman(p.view(), down.view()) + 1.0).abs() < 1e-12);
        assert!(spearman(array![[1.0, 1.0, 1.0]].view(), p.view()).is_nan());
    }

    #[test]
    fn truncated_mle_recovers_exponent() {
        // Inverse CDF sampling of r^{D-1} on [0.1, 1].
        let mut r = rng::from_seed(1);
        for d in [1.0, 2.0, 3.0] {
            let a: f64 = 0.1;
            let xs: Vec<f64> = (0..20000)
                .map(|_| {
                    let u: f64 = r.random();
                    (a.powf(d) + u * (1.0 - a.powf(d))).powf(1.0 / d).ln()
                })
                .collect();
            let est = truncated_mle(stats::mean(&xs), a.ln());
            assert!((est - d).abs() < 0.05, "{d} -> {est}");
        }
    }
}
