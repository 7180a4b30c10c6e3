//! Adaptive Dormand–Prince integration (5(4) and 8(5,3)) with guard callbacks
//! and cubic Hermite dense output onto a uniform time grid.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::systems::{FlowSample, Rhs, SystemSpec};
use crate::trajectory::Trajectory;

/// Samples per standard trajectory.
pub const STANDARD_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk45,
    Dop853,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t_span: (f64, f64),
    pub n_points: usize,
    pub max_wall_seconds: f64,
    pub min_step: f64,
    pub amplitude_bound: f64,
    pub method: Method,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-10,
            t_span: (0.0, 1.0),
            n_points: STANDARD_POINTS,
            max_wall_seconds: 5.0,
            min_step: 1e-10,
            amplitude_bound: 1e4,
            method: Method::Dop853,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("rtol/atol", "tolerances must be positive"));
        }
        if !(self.t_span.1 > self.t_span.0) {
            return Err(Error::config("t_span", "t1 must exceed t0"));
        }
        if self.n_points < 2 {
            return Err(Error::config("n_points", "need at least 2 output points"));
        }
        if !(self.min_step > 0.0) {
            return Err(Error::config("min_step", "must be positive"));
        }
        if !(self.amplitude_bound > 0.0) {
            return Err(Error::config("amplitude_bound", "must be positive"));
        }
        Ok(())
    }

    /// `STANDARD_POINTS` samples at the spec's own `dt`.
    pub fn standard(spec: &SystemSpec) -> Self {
        Self {
            t_span: (0.0, spec.dt * (STANDARD_POINTS - 1) as f64),
            ..Self::default()
        }
    }

    /// The low-tolerance setting used to find a point on the attractor.
    pub fn coarse(spec: &SystemSpec) -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-7,
            method: Method::Rk45,
            ..Self::standard(spec)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardOutcome {
    Completed,
    StepFloor,
    AmplitudeBlowup,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub outcome: GuardOutcome,
    pub t_reached: f64,
    pub detail: String,
}

// Dormand–Prince 5(4).
const DP5_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP5_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// Dormand–Prince 8(5,3), coefficients from Hairer's DOP853.
const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;

const DP8_A: [&[f64]; 11] = [
    &[A21],
    &[A31, A32],
    &[A41, 0.0, A43],
    &[A51, 0.0, A53, A54],
    &[A61, 0.0, 0.0, A64, A65],
    &[A71, 0.0, 0.0, A74, A75, A76],
    &[A81, 0.0, 0.0, A84, A85, A86, A87],
    &[A91, 0.0, 0.0, A94, A95, A96, A97, A98],
    &[A101, 0.0, 0.0, A104, A105, A106, A107, A108, A109],
    &[A111, 0.0, 0.0, A114, A115, A116, A117, A118, A119, A1110],
    &[A121, 0.0, 0.0, A124, A125, A126, A127, A128, A129, A1210, A1211],
];
const DP8_B: [f64; 12] = [
    5.42937341165687622380535766363E-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.45031289275240888144113950566E0,
    1.89151789931450038304281599044E0,
    -5.8012039600105847814672114227E0,
    3.1116436695781989440891606237E-1,
    -1.52160949662516078556178806805E-1,
    2.01365400804030348374776537501E-1,
    4.47106157277725905176885569043E-2,
];
const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;
const DP8_ER: [f64; 12] = [
    0.1312004499419488073250102996E-01,
    0.0,
    0.0,
    0.0,
    0.0,
    -0.1225156446376204440720569753E+01,
    -0.4957589496572501915214079952E+00,
    0.1664377182454986536961530415E+01,
    -0.3503288487499736816886487290E+00,
    0.3341791187130174790297318841E+00,
    0.8192320648511571246570742613E-01,
    -0.2235530786388629525884427845E-01,
];

struct Stepper {
    method: Method,
    n: usize,
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
}

impl Stepper {
    fn new(method: Method, n: usize) -> Self {
        let stages = match method {
            Method::Rk45 => 7,
            Method::Dop853 => 12,
        };
        Self {
            method,
            n,
            k: vec![vec![0.0; n]; stages],
            tmp: vec![0.0; n],
        }
    }

    fn order(&self) -> f64 {
        match self.method {
            Method::Rk45 => 5.0,
            Method::Dop853 => 8.0,
        }
    }

    /// One trial step. Writes the new state into `y1` and returns the scaled
    /// error norm (≤ 1 means acceptable). `k[0]` must hold f(y).
    fn attempt<R: Rhs + ?Sized>(
        &mut self,
        rhs: &R,
        y: &[f64],
        h: f64,
        y1: &mut [f64],
        rtol: f64,
        atol: f64,
    ) -> f64 {
        let rows: &[&[f64]] = match self.method {
            Method::Rk45 => &DP5_A,
            Method::Dop853 => &DP8_A,
        };
        for (s, row) in rows.iter().enumerate() {
            for i in 0..self.n {
                let mut acc = 0.0;
                for (j, a) in row.iter().enumerate() {
                    if *a != 0.0 {
                        acc += a * self.k[j][i];
                    }
                }
                self.tmp[i] = y[i] + h * acc;
            }
            let (_, rest) = self.k.split_at_mut(s + 1);
            rhs.eval(&self.tmp, &mut rest[0]);
        }
        match self.method {
            Method::Rk45 => {
                // Row 6 of the tableau is the solution weights; tmp holds y1
                // and k[6] = f(y1) (first same as last).
                y1.copy_from_slice(&self.tmp);
                let mut err: f64 = 0.0;
                for i in 0..self.n {
                    let mut e = 0.0;
                    for (j, w) in DP5_E.iter().enumerate() {
                        e += w * self.k[j][i];
                    }
                    let sk = atol + rtol * y[i].abs().max(y1[i].abs());
                    err = err.max((h * e).abs() / sk);
                }
                err
            }
            Method::Dop853 => {
                let mut e5: f64 = 0.0;
                let mut e3: f64 = 0.0;
                for i in 0..self.n {
                    let mut bsol = 0.0;
                    let mut er = 0.0;
                    for j in 0..12 {
                        bsol += DP8_B[j] * self.k[j][i];
                        er += DP8_ER[j] * self.k[j][i];
                    }
                    y1[i] = y[i] + h * bsol;
                    let err3 =
                        bsol - BHH1 * self.k[0][i] - BHH2 * self.k[8][i] - BHH3 * self.k[11][i];
                    let sk = atol + rtol * y[i].abs().max(y1[i].abs());
                    e5 = e5.max((er / sk).abs());
                    e3 = e3.max((err3 / sk).abs());
                }
                let deno = (e5 * e5 + 0.01 * e3 * e3).sqrt();
                if deno > 0.0 {
                    h.abs() * e5 * e5 / deno
                } else {
                    0.0
                }
            }
        }
    }
}

fn hermite(y0: f64, f0: f64, y1: f64, f1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
}

fn rms_scaled(v: &[f64], y: &[f64], rtol: f64, atol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let sk = atol + rtol * b.abs();
            (a / sk).powi(2)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn initial_step<R: Rhs + ?Sized>(
    rhs: &R,
    y: &[f64],
    f0: &[f64],
    order: f64,
    cfg: &IntegrationConfig,
    h_max: f64,
) -> f64 {
    let d0 = rms_scaled(y, y, cfg.rtol, cfg.atol);
    let d1 = rms_scaled(f0, y, cfg.rtol, cfg.atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(h_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; y.len()];
    rhs.eval(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, y, cfg.rtol, cfg.atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / order)
    };
    (100.0 * h0).min(h1).min(h_max)
}

/// Integrates `spec` from `x0`; see [`integrate_rhs`].
pub fn integrate(
    spec: &SystemSpec,
    x0: &[f64],
    config: &IntegrationConfig,
) -> Result<(Trajectory, GuardReport)> {
    if x0.len() != spec.dim {
        return Err(Error::invalid(format!(
            "x0 has length {} but spec dim is {}",
            x0.len(),
            spec.dim
        )));
    }
    let rhs = spec.compile();
    integrate_rhs(&rhs, x0, config, &spec.id)
}

/// Adaptive integration with dense output. Guard trips return the partial
/// trajectory (all grid points reached so far) with the tripped outcome.
pub fn integrate_rhs<R: Rhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    config: &IntegrationConfig,
    spec_ref: &str,
) -> Result<(Trajectory, GuardReport)> {
    config.validate()?;
    let n = rhs.dim();
    if x0.len() != n {
        return Err(Error::invalid("x0 length does not match rhs dimension"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x0 has non-finite entries"));
    }
    let started = Instant::now();
    let (t0, t1) = config.t_span;
    let m = config.n_points;
    let dt_out = (t1 - t0) / (m - 1) as f64;
    let h_max = dt_out.min(t1 - t0);

    let mut out: Vec<f64> = Vec::with_capacity(n * m);
    out.extend_from_slice(x0);
    let mut next_out = 1usize;

    let mut st = Stepper::new(config.method, n);
    let mut y = x0.to_vec();
    let mut y1 = vec![0.0; n];
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    rhs.eval(&y, &mut f0);
    let finish = |out: Vec<f64>, outcome: GuardOutcome, t: f64, detail: String| {
        let steps = out.len() / n;
        let values = Array2::from_shape_vec((steps, n), out)
            .expect("output buffer shape")
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        (
            Trajectory {
                values,
                dt: dt_out,
                t0,
                spec_ref: spec_ref.to_string(),
            },
            GuardReport {
                outcome,
                t_reached: t,
                detail,
            },
        )
    };
    if let Some(i) = f0.iter().position(|v| !v.is_finite()) {
        return Ok(finish(
            out,
            GuardOutcome::AmplitudeBlowup,
            t0,
            format!("non-finite derivative in component {i} at t0"),
        ));
    }

    let order = st.order();
    let mut h = initial_step(rhs, &y, &f0, order, config, h_max);
    let mut t = t0;
    let mut last_rejected = false;
    while next_out < m {
        if started.elapsed().as_secs_f64() > config.max_wall_seconds {
            return Ok(finish(
                out,
                GuardOutcome::Timeout,
                t,
                format!("wall time exceeded {} s", config.max_wall_seconds),
            ));
        }
        if h < config.min_step {
            return Ok(finish(
                out,
                GuardOutcome::StepFloor,
                t,
                format!("step size {h:.3e} fell below {:.1e}", config.min_step),
            ));
        }
        let mut last = false;
        if t + h >= t1 || (t1 - (t + h)) < 1e-12 * (t1 - t0) {
            h = t1 - t;
            last = true;
        }
        st.k[0].copy_from_slice(&f0);
        let err = st.attempt(rhs, &y, h, &mut y1, config.rtol, config.atol);
        if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            // Usually a blowup; shrink and let the floor guard decide.
            h *= 0.2;
            last_rejected = true;
            if y1.iter().any(|v| !v.is_finite()) && h < config.min_step {
                return Ok(finish(
                    out,
                    GuardOutcome::AmplitudeBlowup,
                    t,
                    "non-finite state".into(),
                ));
            }
            continue;
        }
        if err <= 1.0 {
            match config.method {
                Method::Rk45 => f1.copy_from_slice(&st.k[6]),
                Method::Dop853 => rhs.eval(&y1, &mut f1),
            }
            let t_new = if last { t1 } else { t + h };
            while next_out < m {
                let tk = if next_out == m - 1 {
                    t1
                } else {
                    t0 + next_out as f64 * dt_out
                };
                if tk > t_new {
                    break;
                }
                let s = ((tk - t) / h).clamp(0.0, 1.0);
                for i in 0..n {
                    out.push(hermite(y[i], f0[i], y1[i], f1[i], h, s));
                }
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut f0, &mut f1);
            if let Some(i) = y
                .iter()
                .position(|v| !v.is_finite() || v.abs() > config.amplitude_bound)
            {
                return Ok(finish(
                    out,
                    GuardOutcome::AmplitudeBlowup,
                    t,
                    format!("component {i} reached {:.3e}", y[i]),
                ));
            }
            if let Some(i) = f0.iter().position(|v| !v.is_finite()) {
                return Ok(finish(
                    out,
                    GuardOutcome::AmplitudeBlowup,
                    t,
                    format!("non-finite derivative in component {i}"),
                ));
            }
            let mut fac = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-1.0 / order)).clamp(0.2, 10.0)
            };
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = (h * fac).min(h_max);
        } else {
            h *= (0.9 * err.powf(-1.0 / order)).clamp(0.2, 1.0);
            last_rejected = true;
        }
    }
    Ok(finish(out, GuardOutcome::Completed, t1, String::new()))
}

/// Fixed-step integration without error control; for order checks.
pub fn integrate_fixed<R: Rhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    h: f64,
    n_steps: usize,
    method: Method,
) -> Vec<f64> {
    let n = rhs.dim();
    let mut st = Stepper::new(method, n);
    let mut y = x0.to_vec();
    let mut y1 = vec![0.0; n];
    for _ in 0..n_steps {
        let mut f0 = vec![0.0; n];
        rhs.eval(&y, &mut f0);
        st.k[0].copy_from_slice(&f0);
        st.attempt(rhs, &y, h, &mut y1, 1.0, 1.0);
        std::mem::swap(&mut y, &mut y1);
    }
    y
}

fn unsampleable(spec: &SystemSpec, report: &GuardReport) -> Error {
    Error::Unsampleable(format!(
        "coarse integration of `{}` stopped with {:?} at t={:.4}: {}",
        spec.id, report.outcome, report.t_reached, report.detail
    ))
}

/// Coarse trajectory from the default IC over the standard horizon.
pub fn coarse_trajectory(spec: &SystemSpec) -> Result<Trajectory> {
    let cfg = IntegrationConfig::coarse(spec);
    let (traj, report) = integrate(spec, &spec.default_ic, &cfg)?;
    if report.outcome != GuardOutcome::Completed {
        return Err(unsampleable(spec, &report));
    }
    Ok(traj)
}

/// Uniformly chosen state from the second half of the coarse trajectory.
pub fn sample_on_attractor_ic(spec: &SystemSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    let traj = coarse_trajectory(spec)?;
    let t = traj.len();
    let idx = rng.random_range(t / 2..t);
    Ok(traj.state(idx))
}

/// `n` evenly spaced states from the second half of the coarse trajectory,
/// with their derivatives.
pub fn attractor_flow_sample(spec: &SystemSpec, n: usize) -> Result<FlowSample> {
    let traj = coarse_trajectory(spec)?;
    flow_sample_from(spec, &traj, n)
}

pub fn flow_sample_from(spec: &SystemSpec, traj: &Trajectory, n: usize) -> Result<FlowSample> {
    let t = traj.len();
    let start = t / 2;
    let span = t - start;
    let n = n.min(span).max(1);
    let points = (0..n)
        .map(|k| traj.state(start + k * span / n))
        .collect::<Vec<_>>();
    FlowSample::from_points(spec, points)
}
