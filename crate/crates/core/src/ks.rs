//! Pseudospectral Kuramoto–Sivashinsky solver and zero-shot evaluation.
//!
//! `u_t = −u u_x − u_xx − u_xxxx` on a periodic domain of length `L`,
//! state kept on the `n_modes`-point real grid.

use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_zero_shot, EvalConfig, Forecaster, MetricReport, Persistence};
use crate::integrate::{integrate_rhs, GuardOutcome, IntegrationConfig};
use crate::model::Checkpoint;
use crate::rng::{self, Rng};
use crate::systems::Rhs;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsConfig {
    pub l: f64,
    pub n_modes: usize,
    pub dt_out: f64,
    pub t_span: f64,
    /// Discarded before recording.
    pub transient: f64,
    pub ic_amplitude: f64,
    pub dealias: Dealias,
}

/// Treatment of the quadratic term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dealias {
    None,
    /// Zero the top third of modes before and after the product.
    TwoThirds,
    /// Evaluate the product on a zero-padded 3/2 grid; all modes kept.
    Padded,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            l: 100.0,
            n_modes: 64,
            dt_out: 0.25,
            t_span: 1024.0,
            transient: 50.0,
            ic_amplitude: 0.1,
            dealias: Dealias::Padded,
        }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes < 16 || self.n_modes % 2 != 0 {
            return Err(Error::config("ks.n_modes", "must be even and >= 16"));
        }
        if !(self.l > 0.0) {
            return Err(Error::config("ks.l", "must be positive"));
        }
        if !(self.dt_out > 0.0 && self.t_span >= self.dt_out) {
            return Err(Error::config("ks.dt_out", "need 0 < dt_out <= t_span"));
        }
        if self.transient < 0.0 {
            return Err(Error::config("ks.transient", "must be >= 0"));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        (self.t_span / self.dt_out).round() as usize + 1
    }
}

/// The spatial right-hand side.
pub struct KsRhs {
    n: usize,
    /// Padded grid size (equals `n` unless padding).
    np: usize,
    /// Angular wavenumbers in FFT order.
    k: Vec<f64>,
    keep: Vec<bool>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    fwd_p: Arc<dyn Fft<f64>>,
    inv_p: Arc<dyn Fft<f64>>,
}

fn signed_mode(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

impl KsRhs {
    pub fn new(cfg: &KsConfig) -> Self {
        let n = cfg.n_modes;
        let np = if cfg.dealias == Dealias::Padded { 3 * n / 2 } else { n };
        let mut planner = FftPlanner::new();
        let k = (0..n)
            .map(|m| 2.0 * std::f64::consts::PI * signed_mode(m, n) as f64 / cfg.l)
            .collect();
        let keep = (0..n)
            .map(|m| cfg.dealias != Dealias::TwoThirds || 3 * signed_mode(m, n).unsigned_abs() < n as u64)
            .collect();
        Self {
            n,
            np,
            k,
            keep,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            fwd_p: planner.plan_fft_forward(np),
            inv_p: planner.plan_fft_inverse(np),
        }
    }

    /// Spectrum of `u²` on the `n`-mode grid (unnormalized, like `uh`).
    fn square_spectrum(&self, uh: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let (n, np) = (self.n, self.np);
        // Embed the kept modes into the (possibly larger) grid; the Nyquist
        // mode is dropped when padding so the embedding stays real.
        let mut buf = vec![Complex::default(); np];
        for m in 0..n {
            let sm = signed_mode(m, n);
            if !self.keep[m] || (np != n && sm.unsigned_abs() as usize == n / 2) {
                continue;
            }
            buf[sm.rem_euclid(np as i64) as usize] = uh[m];
        }
        self.inv_p.process(&mut buf);
        let scale = 1.0 / n as f64;
        for c in buf.iter_mut() {
            *c = Complex::new((c.re * scale).powi(2), 0.0);
        }
        self.fwd_p.process(&mut buf);
        // Back to n-grid normalization.
        let back = n as f64 / np as f64;
        (0..n)
            .map(|m| {
                let sm = signed_mode(m, n);
                if np != n && sm.unsigned_abs() as usize == n / 2 {
                    return Complex::default();
                }
                buf[sm.rem_euclid(np as i64) as usize] * back
            })
            .collect()
    }

    /// Derivative and the largest imaginary part left by the inverse
    /// transform.
    pub fn derivative(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let n = self.n;
        let mut uh: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut uh);
        let sq = self.square_spectrum(&uh);
        let mut out = vec![Complex::default(); n];
        for m in 0..n {
            let k = self.k[m];
            let lin = (k * k - k * k * k * k) * uh[m];
            // The odd derivative has no Nyquist component.
            let kd = if m == n / 2 { 0.0 } else { k };
            let nl = if self.keep[m] { Complex::new(0.0, -0.5 * kd) * sq[m] } else { Complex::default() };
            out[m] = lin + nl;
        }
        self.inv.process(&mut out);
        let imag = out.iter().fold(0.0f64, |a, c| a.max((c.im / n as f64).abs()));
        (out.iter().map(|c| c.re / n as f64).collect(), imag)
    }
}

impl Rhs for KsRhs {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.derivative(x).0);
    }
}

/// Zero-mean random IC of the given amplitude.
pub fn ks_initial_condition(cfg: &KsConfig, rng: &mut Rng) -> Vec<f64> {
    let mut u: Vec<f64> = (0..cfg.n_modes).map(|_| rng.random_range(-1.0..1.0) * cfg.ic_amplitude).collect();
    let m = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= m);
    u
}

/// Integrates from `u0` over `[0, t_span]`, sampled every `dt_out`.
/// Tolerances, method and guards come from `icfg`.
pub fn integrate_ks(cfg: &KsConfig, u0: &[f64], icfg: &IntegrationConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if u0.len() != cfg.n_modes {
        return Err(Error::invalid(format!("u0 has {} values, grid has {}", u0.len(), cfg.n_modes)));
    }
    let mean = u0.iter().sum::<f64>() / u0.len() as f64;
    if mean.abs() > 1e-12 * u0.iter().fold(1.0f64, |a, v| a.max(v.abs())) {
        return Err(Error::invalid("initial condition must have zero mean"));
    }
    let ic = IntegrationConfig {
        t_span: (0.0, cfg.t_span),
        n_points: cfg.n_points(),
        ..icfg.clone()
    };
    let (tr, guard) = integrate_rhs(&KsRhs::new(cfg), u0, &ic, "ks")?;
    if guard.outcome != GuardOutcome::Completed {
        return Err(Error::Numeric {
            index: tr.len(),
            detail: format!("KS integration stopped: {:?} at t={}", guard.outcome, guard.t_reached),
        });
    }
    Ok(tr)
}

/// A chaotic-regime run: random IC, transient discarded.
pub fn ks_trajectory(cfg: &KsConfig, icfg: &IntegrationConfig, seed: u64) -> Result<Trajectory> {
    let mut r = rng::stream(seed, "ks_ic", 0);
    let u0 = ks_initial_condition(cfg, &mut r);
    let start = if cfg.transient > 0.0 {
        let warm = KsConfig {
            t_span: cfg.transient,
            dt_out: cfg.transient,
            ..cfg.clone()
        };
        let w = integrate_ks(&warm, &u0, icfg)?;
        let mut s = w.state(w.len() - 1);
        // Remove the roundoff drift of the mean so the precondition holds.
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter_mut().for_each(|v| *v -= m);
        s
    } else {
        u0
    };
    integrate_ks(cfg, &start, icfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeCurve {
    pub horizon: usize,
    pub mean: f64,
    /// Standard error across windows.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub model: Vec<MaeCurve>,
    pub persistence: Vec<MaeCurve>,
}

fn mae_curve(rep: &MetricReport, horizons: &[usize]) -> Vec<MaeCurve> {
    horizons
        .iter()
        .map(|&h| {
            let v: Vec<f64> = rep.records.iter().filter(|r| r.horizon == h).map(|r| r.mae).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            MaeCurve {
                horizon: h,
                mean,
                se: (var / n).sqrt(),
            }
        })
        .collect()
}

/// Forecasts the KS grid as channels and reports MAE per horizon next to
/// the persistence baseline. The checkpoint must come from the ODE corpus.
pub fn ks_zero_shot_eval(ck: &Checkpoint, traj: &Trajectory, cfg: &EvalConfig) -> Result<KsReport> {
    match ck.metadata.get("corpus").map(String::as_str) {
        Some("ode") => {}
        other => {
            return Err(Error::UnsupportedConfig(format!(
                "checkpoint corpus is {other:?}; zero-shot KS needs an ODE-only model"
            )))
        }
    }
    let systems = vec![("ks".to_string(), vec![traj.values.clone()])];
    let h = ck.model.horizon();
    let m = evaluate_zero_shot(&ck.model, "model", &systems, cfg)?;
    let p = evaluate_zero_shot(&Persistence { horizon: h }, "persistence", &systems, cfg)?;
    Ok(KsReport {
        model: mae_curve(&m, &cfg.horizons),
        persistence: mae_curve(&p, &cfg.horizons),
    })
}

/// Values for the bundle sidecar.
pub fn ks_sidecar(cfg: &KsConfig) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("L".into(), cfg.l.into());
    m.insert("n_modes".into(), cfg.n_modes.into());
    let rule = match cfg.dealias {
        Dealias::None => "none",
        Dealias::TwoThirds => "2/3 truncation",
        Dealias::Padded => "3/2 zero padding",
    };
    m.insert("dealiasing".into(), rule.into());
    m
}

