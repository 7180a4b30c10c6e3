//! The attractor selection battery: transient rejection, the 0-1 test,
//! near-recurrence and spectral-line tests, and a Rosenstein Lyapunov
//! estimate.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stats;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub n_c: usize,
    pub k_threshold: f64,
    pub recurrence_eps_frac: f64,
    pub recurrence_threshold: f64,
    pub spectral_threshold: f64,
    pub lyapunov_threshold: f64,
    pub amplitude_bound: f64,
    pub fixed_point_rel: f64,
    /// Target normalized spectral centroid after decimation in the 0-1 test.
    pub decimation_target: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_c: 16,
            k_threshold: 0.7,
            recurrence_eps_frac: 0.02,
            recurrence_threshold: 0.8,
            spectral_threshold: 0.9,
            lyapunov_threshold: 0.0,
            amplitude_bound: 1e4,
            fixed_point_rel: 1e-6,
            decimation_target: 0.125,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::config("selection.n_c", "must be positive"));
        }
        if !(self.recurrence_eps_frac > 0.0) {
            return Err(Error::config("selection.recurrence_eps_frac", "must be positive"));
        }
        if !(self.decimation_target > 0.0 && self.decimation_target <= 0.5) {
            return Err(Error::config("selection.decimation_target", "must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientReason {
    FixedPoint,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Transient,
    ZeroOne,
    Recurrence,
    Spectral,
    Lyapunov,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Transient => "transient",
            Stage::ZeroOne => "zero_one",
            Stage::Recurrence => "recurrence",
            Stage::Spectral => "spectral",
            Stage::Lyapunov => "lyapunov",
        }
    }
}

/// Statistics past the failing stage stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChaosVerdict {
    pub accepted: bool,
    pub transient_reason: Option<TransientReason>,
    pub k_statistic: Option<f64>,
    pub recurrence_fraction: Option<f64>,
    pub spectral_peak_ratio: Option<f64>,
    pub lyapunov_estimate: Option<f64>,
    pub failed_stage: Option<Stage>,
}

pub fn reject_transient(traj: &Trajectory, cfg: &SelectionConfig) -> Result<Option<TransientReason>> {
    if traj.len() < 512 {
        return Err(Error::invalid("transient check needs at least 512 timesteps"));
    }
    if traj
        .values
        .iter()
        .any(|v| !v.is_finite() || v.abs() > cfg.amplitude_bound)
    {
        return Ok(Some(TransientReason::Diverged));
    }
    let t = traj.len();
    let tail = t - t / 4;
    let all_flat = (0..traj.channels()).all(|c| {
        let row = traj.channel(c);
        let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
        let scale = stats::rms(&row);
        stats::std(&row[tail..]) <= cfg.fixed_point_rel * scale
    });
    Ok(all_flat.then_some(TransientReason::FixedPoint))
}

fn k_for_c(x: &[f64], c: f64) -> f64 {
    let n = x.len();
    let ncut = (n / 10).max(2);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let (mut sp, mut sq) = (0.0, 0.0);
    for (j, v) in x.iter().enumerate() {
        let a = (j + 1) as f64 * c;
        sp += v * a.cos();
        sq += v * a.sin();
        p[j] = sp;
        q[j] = sq;
    }
    let mut ns = Vec::with_capacity(ncut);
    let mut ms = Vec::with_capacity(ncut);
    for lag in 1..=ncut {
        let mut acc = 0.0;
        for j in 0..n - lag {
            let dp = p[j + lag] - p[j];
            let dq = q[j + lag] - q[j];
            acc += dp * dp + dq * dq;
        }
        ns.push(lag as f64);
        ms.push(acc / (n - lag) as f64);
    }
    stats::pearson(&ns, &ms)
}

fn spectral_centroid(x: &[f64]) -> f64 {
    let p = stats::hann_periodogram(x);
    let n = x.len() as f64;
    let tot: f64 = p[1..].iter().sum();
    if tot == 0.0 {
        return 0.5;
    }
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(k, v)| v * k as f64 / n)
        .sum::<f64>()
        / tot
}

/// Gottwald–Melbourne 0-1 test (correlation form).
///
/// Densely sampled flows are decimated first so the spectral centroid sits
/// near `decimation_target` cycles/sample; every phase offset of the
/// decimated series contributes one K per c, and the median is returned.
pub fn zero_one_test_with(
    series: &[f64],
    n_c: usize,
    decimation_target: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if series.len() < 1000 {
        return Err(Error::invalid("0-1 test needs at least 1000 samples"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("0-1 test input is not finite"));
    }
    let m = stats::mean(series);
    let x: Vec<f64> = series.iter().map(|v| v - m).collect();
    let spread = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if spread <= 1e-12 * m.abs().max(1.0) {
        return Err(Error::invalid("0-1 test input is constant"));
    }
    // A linear ramp has no oscillation for the translation variables to
    // probe; the test is undefined there.
    let ramp: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
    if stats::pearson(&ramp, &x).abs() > 1.0 - 1e-9 {
        return Err(Error::invalid("0-1 test input is a linear ramp"));
    }
    let cs: Vec<f64> = (0..n_c)
        .map(|_| rng.random_range(std::f64::consts::PI / 5.0..4.0 * std::f64::consts::PI / 5.0))
        .collect();
    let fc = spectral_centroid(&x);
    let mut stride = if fc > 0.0 {
        (decimation_target / fc).floor().max(1.0) as usize
    } else {
        1
    };
    stride = stride.min((x.len() / 128).max(1));
    let mut ks = Vec::with_capacity(stride * n_c);
    for off in 0..stride {
        let sub: Vec<f64> = x[off..].iter().step_by(stride).copied().collect();
        let sm = stats::mean(&sub);
        let sub: Vec<f64> = sub.iter().map(|v| v - sm).collect();
        for &c in &cs {
            let k = k_for_c(&sub, c);
            if k.is_finite() {
                ks.push(k);
            }
        }
    }
    if ks.is_empty() {
        return Err(Error::invalid("0-1 test statistic undefined for this input"));
    }
    Ok(stats::median(&ks).clamp(-0.05, 1.05))
}

pub fn zero_one_test(series: &[f64], n_c: usize, rng: &mut Rng) -> Result<f64> {
    zero_one_test_with(series, n_c, SelectionConfig::default().decimation_target, rng)
}

/// Largest channel-wise K. Phase-coherent coordinates (e.g. Rössler x) can
/// read as regular even when another coordinate of the same flow does not.
pub fn zero_one_multichannel(traj: &Trajectory, cfg: &SelectionConfig, rng: &mut Rng) -> Result<f64> {
    let mut best: Option<f64> = None;
    let mut last_err = None;
    for c in 0..traj.channels() {
        let row = traj.channel(c).to_vec();
        match zero_one_test_with(&row, cfg.n_c, cfg.decimation_target, rng) {
            Ok(k) => best = Some(best.map_or(k, |b: f64| b.max(k))),
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::invalid("no channels")))
}

fn states_of(traj: &Trajectory, start: usize) -> Vec<Vec<f64>> {
    (start..traj.len()).map(|t| traj.state(t)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of final-half states that have a recurrence outside the
/// temporal exclusion window (5% of the segment) within `eps_frac`·diameter
/// and whose return times are regular (gap CV below 0.1).
pub fn recurrence_limit_cycle_test(traj: &Trajectory, eps_frac: f64) -> Result<f64> {
    if traj.len() < 1024 {
        return Err(Error::invalid("recurrence test needs at least 1024 timesteps"));
    }
    let x = states_of(traj, traj.len() / 2);
    let n = x.len();
    let w = (n as f64 * 0.05) as usize;
    let mut d = vec![0.0; n * n];
    let mut diam: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(&x[i], &x[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
            diam = diam.max(v);
        }
    }
    let eps = eps_frac * diam;
    let mut count = 0usize;
    let mut events = Vec::new();
    for i in 0..n {
        events.clear();
        let row = &d[i * n..(i + 1) * n];
        // Each run of consecutive within-eps states is one return event,
        // located at its closest state. The run through i itself yields i.
        let mut run_best: Option<(usize, f64)> = None;
        for j in 0..n {
            if row[j] < eps {
                if run_best.is_none_or(|(_, v)| row[j] < v) {
                    run_best = Some((j, row[j]));
                }
            } else if let Some((k, _)) = run_best.take() {
                events.push(k);
            }
        }
        if let Some((k, _)) = run_best {
            events.push(k);
        }
        if !events.iter().any(|&e| e.abs_diff(i) > w) || events.len() < 3 {
            continue;
        }
        let gaps: Vec<f64> = events.windows(2).map(|p| (p[1] - p[0]) as f64).collect();
        let m = stats::mean(&gaps);
        if m > 0.0 && stats::std(&gaps) / m < 0.1 {
            count += 1;
        }
    }
    Ok(count as f64 / n as f64)
}

/// Top-5 periodogram bins over total non-DC power.
pub fn spectral_peak_test(series: &[f64]) -> Result<f64> {
    if series.len() < 1024 {
        return Err(Error::invalid("spectral test needs at least 1024 samples"));
    }
    let p = stats::hann_periodogram(series);
    let mut ac: Vec<f64> = p[1..].to_vec();
    let tot: f64 = ac.iter().sum();
    if tot == 0.0 {
        return Ok(1.0);
    }
    ac.sort_by(|a, b| b.total_cmp(a));
    Ok(ac.iter().take(5).sum::<f64>() / tot)
}

/// Mean period in time units from the dominant periodogram peak; falls back
/// to length/20 samples when no bin stands out.
pub fn estimate_mean_period(series: &[f64], dt: f64) -> f64 {
    let p = stats::hann_periodogram(series);
    let ac = &p[1..];
    let (k, peak) = ac
        .iter()
        .enumerate()
        .fold((0, 0.0), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
    let mean = ac.iter().sum::<f64>() / ac.len() as f64;
    if mean == 0.0 || peak < 20.0 * mean {
        return series.len() as f64 / 20.0 * dt;
    }
    series.len() as f64 / (k + 1) as f64 * dt
}

/// Rosenstein largest-exponent estimate from full-state vectors.
pub fn rosenstein_from_states(x: &[Vec<f64>], dt: f64, mean_period: f64) -> Result<f64> {
    let n = x.len();
    if n < 2048 {
        return Err(Error::invalid("Rosenstein estimate needs at least 2048 states"));
    }
    let sep = (mean_period / dt).ceil() as usize;
    let horizon = n / 10;
    // Only pairs that can be followed for the whole horizon, so every point
    // of the divergence curve averages over the same set.
    let usable = n - horizon;
    let mut nn = vec![usize::MAX; usable];
    for i in 0..usable {
        let mut best = f64::INFINITY;
        for j in 0..usable {
            if i.abs_diff(j) <= sep {
                continue;
            }
            let v = dist(&x[i], &x[j]);
            if v < best {
                best = v;
                nn[i] = j;
            }
        }
    }
    let mut curve = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for (i, &j) in nn.iter().enumerate() {
            if j == usize::MAX {
                continue;
            }
            let v = dist(&x[i + k], &x[j + k]);
            if v > 0.0 {
                acc += v.ln();
                cnt += 1;
            }
        }
        curve.push(if cnt > 0 { acc / cnt as f64 } else { f64::NAN });
    }
    let m = (horizon / 3).max(2);
    let ks: Vec<f64> = (0..m).map(|k| k as f64).collect();
    let lam = stats::slope(&ks, &curve[..m]) / dt;
    if !lam.is_finite() {
        return Err(Error::invalid("divergence curve is undefined"));
    }
    Ok(lam)
}

pub fn rosenstein_lyapunov(traj: &Trajectory, mean_period: f64) -> Result<f64> {
    rosenstein_from_states(&states_of(traj, 0), traj.dt, mean_period)
}

/// Runs the battery in order, stopping at the first failing stage.
pub fn select(traj: &Trajectory, cfg: &SelectionConfig, rng: &mut Rng) -> ChaosVerdict {
    let mut v = ChaosVerdict::default();
    let fail = |mut v: ChaosVerdict, s: Stage| {
        v.failed_stage = Some(s);
        v.accepted = false;
        v
    };
    match reject_transient(traj, cfg) {
        Ok(None) => {}
        Ok(Some(r)) => {
            v.transient_reason = Some(r);
            return fail(v, Stage::Transient);
        }
        Err(_) => return fail(v, Stage::Transient),
    }
    match zero_one_multichannel(traj, cfg, rng) {
        Ok(k) => {
            v.k_statistic = Some(k);
            if k <= cfg.k_threshold {
                return fail(v, Stage::ZeroOne);
            }
        }
        Err(_) => return fail(v, Stage::ZeroOne),
    }
    match recurrence_limit_cycle_test(traj, cfg.recurrence_eps_frac) {
        Ok(r) => {
            v.recurrence_fraction = Some(r);
            if r > cfg.recurrence_threshold {
                return fail(v, Stage::Recurrence);
            }
        }
        Err(_) => return fail(v, Stage::Recurrence),
    }
    let ch0 = traj.channel(0).to_vec();
    match spectral_peak_test(&ch0) {
        Ok(r) => {
            v.spectral_peak_ratio = Some(r);
            if r > cfg.spectral_threshold {
                return fail(v, Stage::Spectral);
            }
        }
        Err(_) => return fail(v, Stage::Spectral),
    }
    let period = estimate_mean_period(&ch0, traj.dt);
    match rosenstein_lyapunov(traj, period) {
        Ok(l) => {
            v.lyapunov_estimate = Some(l);
            if l <= cfg.lyapunov_threshold {
                return fail(v, Stage::Lyapunov);
            }
        }
        Err(_) => return fail(v, Stage::Lyapunov),
    }
    v.accepted = true;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;

    fn sine(n: usize, period: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period).sin())
            .collect()
    }

    #[test]
    fn periodic_k_is_small() {
        let k = zero_one_test(&sine(4096, 97.3), 16, &mut rng::from_seed(1)).unwrap();
        assert!(k < 0.1, "K = {k}");
    }

    #[test]
    fn constant_and_ramp_are_invalid() {
        let mut r = rng::from_seed(0);
        assert!(zero_one_test(&vec![2.0; 2000], 16, &mut r).is_err());
        let ramp: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        assert!(zero_one_test(&ramp, 16, &mut r).is_err());
    }

    #[test]
    fn spectral_single_line() {
        assert!(spectral_peak_test(&sine(4096, 97.3)).unwrap() > 0.99);
    }

    #[test]
    fn circle_recurs() {
        let n = 4096;
        let v = Array2::from_shape_fn((2, n), |(c, t)| {
            let a = 2.0 * std::f64::consts::PI * t as f64 / 101.7;
            if c == 0 { a.cos() } else { a.sin() }
        });
        let tr = Trajectory::new(v, 0.1, 0.0, "circle").unwrap();
        assert!(recurrence_limit_cycle_test(&tr, 0.02).unwrap() > 0.95);
    }

    #[test]
    fn constant_is_fixed_point() {
        let v = Array2::from_elem((3, 1024), 1.5);
        let tr = Trajectory::new(v, 0.1, 0.0, "c").unwrap();
        let cfg = SelectionConfig::default();
        assert_eq!(reject_transient(&tr, &cfg).unwrap(), Some(TransientReason::FixedPoint));
    }
}
