//! Founder registry, parameter mutation and skew-product recombination.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Founder,
    SkewProduct,
    /// Non-chaotic stubs used to exercise guards and rejection paths.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineageOp {
    Mutation,
    Driver,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub ancestor: String,
    pub operation: LineageOp,
}

/// A parameterized right-hand side. Skew products nest their parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: String,
    pub kind: SystemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub founder_id: Option<String>,
    pub params: Vec<f64>,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<Box<SystemSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Box<SystemSpec>>,
    /// Sampling interval (hand-chosen, roughly 50 samples per mean period).
    pub dt: f64,
    pub default_ic: Vec<f64>,
    pub lineage: Vec<LineageEntry>,
}

/// Points on (or near) the attractor with their RHS values.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub points: Vec<Vec<f64>>,
    pub derivatives: Vec<Vec<f64>>,
}

impl FlowSample {
    pub fn new(points: Vec<Vec<f64>>, derivatives: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != derivatives.len() {
            return Err(Error::invalid("points and derivatives differ in length"));
        }
        for (p, d) in points.iter().zip(&derivatives) {
            if p.len() != d.len() {
                return Err(Error::invalid("point and derivative dims differ"));
            }
            if p.iter().chain(d).any(|v| !v.is_finite()) {
                return Err(Error::invalid("flow sample has non-finite entries"));
            }
        }
        Ok(Self {
            points,
            derivatives,
        })
    }

    /// Evaluates the spec's RHS at each point.
    pub fn from_points(spec: &SystemSpec, points: Vec<Vec<f64>>) -> Result<Self> {
        let rhs = spec.compile();
        let mut derivatives = Vec::with_capacity(points.len());
        for p in &points {
            if p.len() != spec.dim {
                return Err(Error::invalid("point dimension does not match spec"));
            }
            let mut d = vec![0.0; spec.dim];
            rhs.eval(p, &mut d);
            derivatives.push(d);
        }
        Self::new(points, derivatives)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FounderFn {
    Lorenz,
    Rossler,
    Thomas,
    Chen,
    Halvorsen,
    Dadras,
    RabinovichFabrikant,
    SprottB,
    SprottC,
    Chua,
    Rucklidge,
    Arneodo,
    Decay,
    Blowup,
    DampedOscillator,
    VanDerPol,
}

struct FounderDef {
    name: &'static str,
    f: FounderFn,
    params: &'static [f64],
    dt: f64,
    ic: &'static [f64],
}

const FOUNDERS: &[FounderDef] = &[
    FounderDef { name: "lorenz", f: FounderFn::Lorenz, params: &[10.0, 28.0, 8.0 / 3.0], dt: 0.02, ic: &[-9.79, -15.04, 20.53] },
    FounderDef { name: "rossler", f: FounderFn::Rossler, params: &[0.2, 0.2, 5.7], dt: 0.14, ic: &[6.5, 0.4, 0.03] },
    FounderDef { name: "thomas", f: FounderFn::Thomas, params: &[0.18], dt: 0.56, ic: &[0.1, 0.0, 0.0] },
    FounderDef { name: "chen", f: FounderFn::Chen, params: &[35.0, 3.0, 28.0], dt: 0.007, ic: &[-10.0, 0.0, 37.0] },
    FounderDef { name: "halvorsen", f: FounderFn::Halvorsen, params: &[1.4], dt: 0.03, ic: &[-1.48, -1.51, 2.04] },
    FounderDef { name: "dadras", f: FounderFn::Dadras, params: &[3.0, 2.7, 1.7, 2.0, 9.0], dt: 0.08, ic: &[1.1, 2.1, -2.0] },
    FounderDef { name: "rabinovich_fabrikant", f: FounderFn::RabinovichFabrikant, params: &[1.1, 0.87], dt: 0.12, ic: &[-1.0, 0.0, 0.5] },
    FounderDef { name: "sprott_b", f: FounderFn::SprottB, params: &[0.4, 1.2, 1.0], dt: 0.34, ic: &[0.1, 0.1, 0.1] },
    FounderDef { name: "sprott_c", f: FounderFn::SprottC, params: &[1.0, 1.0, 1.0], dt: 0.1, ic: &[0.1, 0.1, 0.1] },
    FounderDef { name: "chua", f: FounderFn::Chua, params: &[15.6, 28.0, -8.0 / 7.0, -5.0 / 7.0], dt: 0.035, ic: &[0.7, 0.0, 0.0] },
    FounderDef { name: "rucklidge", f: FounderFn::Rucklidge, params: &[2.0, 6.7], dt: 0.1, ic: &[1.0, 0.0, 4.5] },
    FounderDef { name: "arneodo", f: FounderFn::Arneodo, params: &[-5.5, 3.5, -1.0], dt: 0.09, ic: &[-1.0, 0.5, 0.5] },
];

const REFERENCES: &[FounderDef] = &[
    FounderDef { name: "decay", f: FounderFn::Decay, params: &[1.0], dt: 0.01, ic: &[1.0] },
    FounderDef { name: "blowup", f: FounderFn::Blowup, params: &[], dt: 0.01, ic: &[1.0] },
    FounderDef { name: "damped_oscillator", f: FounderFn::DampedOscillator, params: &[1.0, 0.5], dt: 0.1, ic: &[1.0, 0.0] },
    FounderDef { name: "van_der_pol", f: FounderFn::VanDerPol, params: &[1.0], dt: 0.1, ic: &[2.0, 0.0] },
];

fn lookup(name: &str) -> Option<&'static FounderDef> {
    FOUNDERS.iter().chain(REFERENCES).find(|d| d.name == name)
}

fn spec_from_def(def: &FounderDef, kind: SystemKind) -> SystemSpec {
    SystemSpec {
        id: def.name.to_string(),
        kind,
        founder_id: Some(def.name.to_string()),
        params: def.params.to_vec(),
        dim: def.ic.len(),
        kappa_a: None,
        kappa_b: None,
        coupling_seed: None,
        driver: None,
        response: None,
        dt: def.dt,
        default_ic: def.ic.to_vec(),
        lineage: Vec::new(),
    }
}

/// The built-in chaotic founders in a fixed order.
pub fn list_founders() -> Vec<SystemSpec> {
    FOUNDERS
        .iter()
        .map(|d| spec_from_def(d, SystemKind::Founder))
        .collect()
}

pub fn founder(name: &str) -> Option<SystemSpec> {
    FOUNDERS
        .iter()
        .find(|d| d.name == name)
        .map(|d| spec_from_def(d, SystemKind::Founder))
}

/// Non-chaotic stubs: `decay` (ẋ=−x), `blowup` (ẋ=x²), `damped_oscillator`,
/// `van_der_pol`.
pub fn reference_system(name: &str) -> Option<SystemSpec> {
    REFERENCES
        .iter()
        .find(|d| d.name == name)
        .map(|d| spec_from_def(d, SystemKind::Reference))
}

fn founder_eval(f: FounderFn, p: &[f64], x: &[f64], out: &mut [f64]) {
    match f {
        FounderFn::Lorenz => {
            let (s, r, b) = (p[0], p[1], p[2]);
            out[0] = s * (x[1] - x[0]);
            out[1] = x[0] * (r - x[2]) - x[1];
            out[2] = x[0] * x[1] - b * x[2];
        }
        FounderFn::Rossler => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = -x[1] - x[2];
            out[1] = x[0] + a * x[1];
            out[2] = b + x[2] * (x[0] - c);
        }
        FounderFn::Thomas => {
            let b = p[0];
            out[0] = x[1].sin() - b * x[0];
            out[1] = x[2].sin() - b * x[1];
            out[2] = x[0].sin() - b * x[2];
        }
        FounderFn::Chen => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = a * (x[1] - x[0]);
            out[1] = (c - a) * x[0] - x[0] * x[2] + c * x[1];
            out[2] = x[0] * x[1] - b * x[2];
        }
        FounderFn::Halvorsen => {
            let a = p[0];
            out[0] = -a * x[0] - 4.0 * x[1] - 4.0 * x[2] - x[1] * x[1];
            out[1] = -a * x[1] - 4.0 * x[2] - 4.0 * x[0] - x[2] * x[2];
            out[2] = -a * x[2] - 4.0 * x[0] - 4.0 * x[1] - x[0] * x[0];
        }
        FounderFn::Dadras => {
            let (a, b, c, d, e) = (p[0], p[1], p[2], p[3], p[4]);
            out[0] = x[1] - a * x[0] + b * x[1] * x[2];
            out[1] = c * x[1] - x[0] * x[2] + x[2];
            out[2] = d * x[0] * x[1] - e * x[2];
        }
        FounderFn::RabinovichFabrikant => {
            let (al, g) = (p[0], p[1]);
            let (x0, y, z) = (x[0], x[1], x[2]);
            out[0] = y * (z - 1.0 + x0 * x0) + g * x0;
            out[1] = x0 * (3.0 * z + 1.0 - x0 * x0) + g * y;
            out[2] = -2.0 * z * (al + x0 * y);
        }
        FounderFn::SprottB => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = a * x[1] * x[2];
            out[1] = x[0] - b * x[1];
            out[2] = c - x[0] * x[1];
        }
        FounderFn::SprottC => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = a * x[1] * x[2];
            out[1] = x[0] - b * x[1];
            out[2] = c - x[0] * x[0];
        }
        FounderFn::Chua => {
            let (al, be, m0, m1) = (p[0], p[1], p[2], p[3]);
            let h = m1 * x[0] + 0.5 * (m0 - m1) * ((x[0] + 1.0).abs() - (x[0] - 1.0).abs());
            out[0] = al * (x[1] - x[0] - h);
            out[1] = x[0] - x[1] + x[2];
            out[2] = -be * x[1];
        }
        FounderFn::Rucklidge => {
            let (k, l) = (p[0], p[1]);
            out[0] = -k * x[0] + l * x[1] - x[1] * x[2];
            out[1] = x[0];
            out[2] = -x[2] + x[1] * x[1];
        }
        FounderFn::Arneodo => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = x[1];
            out[1] = x[2];
            out[2] = -a * x[0] - b * x[1] - x[2] + c * x[0] * x[0] * x[0];
        }
        FounderFn::Decay => out[0] = -p[0] * x[0],
        FounderFn::Blowup => out[0] = x[0] * x[0],
        FounderFn::DampedOscillator => {
            let (w, g) = (p[0], p[1]);
            out[0] = x[1];
            out[1] = -w * w * x[0] - g * x[1];
        }
        FounderFn::VanDerPol => {
            let mu = p[0];
            out[0] = x[1];
            out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
        }
    }
}

/// A right-hand side ready for repeated evaluation.
pub trait Rhs: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub enum CompiledRhs {
    Leaf {
        f: FounderFnHandle,
        params: Vec<f64>,
        dim: usize,
    },
    Skew {
        driver: Box<CompiledRhs>,
        response: Box<CompiledRhs>,
        kappa_a: f64,
        kappa_b: f64,
        /// Row-major response_dim × driver_dim; `None` means identity.
        coupling: Option<Vec<f64>>,
    },
}

/// Opaque wrapper so the function enum stays private.
#[derive(Debug, Clone, Copy)]
pub struct FounderFnHandle(FounderFn);

impl Rhs for CompiledRhs {
    fn dim(&self) -> usize {
        match self {
            CompiledRhs::Leaf { dim, .. } => *dim,
            CompiledRhs::Skew {
                driver, response, ..
            } => driver.dim() + response.dim(),
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            CompiledRhs::Leaf { f, params, .. } => founder_eval(f.0, params, x, out),
            CompiledRhs::Skew {
                driver,
                response,
                kappa_a,
                kappa_b,
                coupling,
            } => {
                let dd = driver.dim();
                let (xd, xr) = x.split_at(dd);
                let (od, or) = out.split_at_mut(dd);
                driver.eval(xd, od);
                response.eval(xr, or);
                match coupling {
                    None => {
                        for (o, d) in or.iter_mut().zip(od.iter()) {
                            *o = kappa_a * *o + kappa_b * d;
                        }
                    }
                    Some(m) => {
                        for (r, o) in or.iter_mut().enumerate() {
                            let row = &m[r * dd..(r + 1) * dd];
                            let mut acc = 0.0;
                            for (w, d) in row.iter().zip(od.iter()) {
                                acc += w * d;
                            }
                            *o = kappa_a * *o + kappa_b * acc;
                        }
                    }
                }
            }
        }
    }
}

/// Random matrix with unit-norm rows mapping driver space into response space.
pub fn coupling_matrix(seed: u64, response_dim: usize, driver_dim: usize) -> Vec<f64> {
    let mut rng = rng::from_seed(seed);
    let mut m = Vec::with_capacity(response_dim * driver_dim);
    for _ in 0..response_dim {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..driver_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                break r.into_iter().map(|v| v / n).collect();
            }
        };
        m.extend(row);
    }
    m
}

impl SystemSpec {
    pub fn compile(&self) -> CompiledRhs {
        match self.kind {
            SystemKind::Founder | SystemKind::Reference => {
                let name = self.founder_id.as_deref().unwrap_or(&self.id);
                let def = lookup(name).expect("spec refers to an unknown founder");
                CompiledRhs::Leaf {
                    f: FounderFnHandle(def.f),
                    params: self.params.clone(),
                    dim: self.dim,
                }
            }
            SystemKind::SkewProduct => {
                let d = self.driver.as_ref().expect("skew product without driver");
                let r = self
                    .response
                    .as_ref()
                    .expect("skew product without response");
                let coupling = if d.dim == r.dim {
                    None
                } else {
                    Some(coupling_matrix(
                        self.coupling_seed.unwrap_or(0),
                        r.dim,
                        d.dim,
                    ))
                };
                CompiledRhs::Skew {
                    driver: Box::new(d.compile()),
                    response: Box::new(r.compile()),
                    kappa_a: self.kappa_a.unwrap_or(1.0),
                    kappa_b: self.kappa_b.unwrap_or(1.0),
                    coupling,
                }
            }
        }
    }

    /// Structural validation of a (possibly deserialized) spec.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SystemKind::Founder | SystemKind::Reference => {
                let name = self
                    .founder_id
                    .as_deref()
                    .ok_or_else(|| Error::invalid("founder spec without founder_id"))?;
                let def = lookup(name)
                    .ok_or_else(|| Error::invalid(format!("unknown founder `{name}`")))?;
                if def.params.len() != self.params.len() || def.ic.len() != self.dim {
                    return Err(Error::invalid(format!("`{name}` has wrong arity")));
                }
                if self.kind == SystemKind::Founder && self.dim < 3 {
                    return Err(Error::invalid("founders must have dim >= 3"));
                }
            }
            SystemKind::SkewProduct => {
                let (d, r) = match (&self.driver, &self.response) {
                    (Some(d), Some(r)) => (d, r),
                    _ => return Err(Error::invalid("skew product needs driver and response")),
                };
                d.validate()?;
                r.validate()?;
                if self.dim != d.dim + r.dim {
                    return Err(Error::invalid("skew product dim mismatch"));
                }
                for k in [self.kappa_a, self.kappa_b] {
                    match k {
                        Some(v) if v.is_finite() && v > 0.0 => {}
                        _ => return Err(Error::invalid("kappa must be positive and finite")),
                    }
                }
            }
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        if self.default_ic.len() != self.dim {
            return Err(Error::invalid("default_ic length does not match dim"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        Ok(())
    }

    /// Founder names this spec descends from.
    pub fn founders_touched(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_founders(&mut out);
        out
    }

    fn collect_founders(&self, out: &mut BTreeSet<String>) {
        if let Some(f) = &self.founder_id {
            out.insert(f.clone());
        }
        for child in [&self.driver, &self.response].into_iter().flatten() {
            child.collect_founders(out);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: SystemSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Derivative of `spec` at `state`. The flow is autonomous so `t` is unused.
pub fn eval_rhs(spec: &SystemSpec, state: &[f64], _t: f64) -> Result<Vec<f64>> {
    if state.len() != spec.dim {
        return Err(Error::invalid(format!(
            "state has length {} but spec dim is {}",
            state.len(),
            spec.dim
        )));
    }
    if let Some(i) = state.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("state entry {i} is not finite")));
    }
    let mut out = vec![0.0; spec.dim];
    spec.compile().eval(state, &mut out);
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index,
            detail: format!("rhs of `{}` produced {}", spec.id, out[index]),
        });
    }
    Ok(out)
}

fn content_hash(parts: &[&[f64]], tag: &str) -> u64 {
    let mut h = rng::label_hash(tag);
    for p in parts {
        for v in p.iter() {
            h = rng::derive_seed(h, "content", v.to_bits());
        }
    }
    h
}

/// Gaussian mutation with std `sigma·|θ|` (absolute `sigma` where θ = 0).
pub fn perturb_params(spec: &SystemSpec, sigma: f64, rng: &mut Rng) -> SystemSpec {
    let mut out = spec.clone();
    mutate_in_place(&mut out, sigma, rng);
    out.lineage.push(LineageEntry {
        ancestor: spec.id.clone(),
        operation: LineageOp::Mutation,
    });
    out
}

fn mutate_in_place(spec: &mut SystemSpec, sigma: f64, rng: &mut Rng) {
    for p in spec.params.iter_mut() {
        let scale = if *p == 0.0 { sigma } else { sigma * p.abs() };
        if scale > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *p += scale * z;
        }
    }
    if let Some(d) = spec.driver.as_mut() {
        mutate_in_place(d, sigma, rng);
    }
    if let Some(r) = spec.response.as_mut() {
        mutate_in_place(r, sigma, rng);
    }
    if sigma > 0.0 {
        spec.id = mutated_id(spec);
    }
}

fn mutated_id(spec: &SystemSpec) -> String {
    let base = spec.founder_id.as_deref().unwrap_or("skew");
    let h = content_hash(&[&spec.params], &spec.id);
    format!("{base}_m{:08x}", h as u32)
}

/// sqrt of the mean squared derivative entry over all samples.
pub fn flow_rms(samples: &FlowSample) -> Result<f64> {
    let n: usize = samples.derivatives.iter().map(|d| d.len()).sum();
    if n == 0 {
        return Err(Error::invalid("empty flow sample"));
    }
    let ss: f64 = samples
        .derivatives
        .iter()
        .flat_map(|d| d.iter())
        .map(|v| v * v)
        .sum();
    if !ss.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            detail: "flow sample has non-finite magnitude".into(),
        });
    }
    if ss == 0.0 {
        return Err(Error::DegenerateFlow("all flow derivatives are zero".into()));
    }
    Ok((ss / n as f64).sqrt())
}

/// State layout is `[driver | response]`.
pub fn make_skew_product(
    driver: &SystemSpec,
    response: &SystemSpec,
    driver_samples: &FlowSample,
    response_samples: &FlowSample,
) -> Result<SystemSpec> {
    let kappa_b = 1.0 / flow_rms(driver_samples)?;
    let kappa_a = 1.0 / flow_rms(response_samples)?;
    if !(kappa_a.is_finite() && kappa_b.is_finite()) {
        return Err(Error::DegenerateFlow("flow RMS too small to invert".into()));
    }
    let seed = content_hash(
        &[&driver.params, &response.params],
        &format!("{}|{}", driver.id, response.id),
    );
    let mut ic = driver.default_ic.clone();
    ic.extend_from_slice(&response.default_ic);
    Ok(SystemSpec {
        id: format!("skew_{:012x}", seed & 0xffff_ffff_ffff),
        kind: SystemKind::SkewProduct,
        founder_id: None,
        params: Vec::new(),
        dim: driver.dim + response.dim,
        kappa_a: Some(kappa_a),
        kappa_b: Some(kappa_b),
        coupling_seed: Some(seed),
        driver: Some(Box::new(driver.clone())),
        response: Some(Box::new(response.clone())),
        dt: driver.dt,
        default_ic: ic,
        lineage: vec![
            LineageEntry {
                ancestor: driver.id.clone(),
                operation: LineageOp::Driver,
            },
            LineageEntry {
                ancestor: response.id.clone(),
                operation: LineageOp::Response,
            },
        ],
    })
}

/// Uniform draw helper used by callers choosing founder pairs.
pub fn pick_pair(n: usize, rng: &mut Rng) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_substitution() {
        let l = founder("lorenz").unwrap();
        assert_eq!(l.params, vec![10.0, 28.0, 8.0 / 3.0]);
        assert_eq!(eval_rhs(&l, &[0.0; 3], 0.0).unwrap(), vec![0.0; 3]);
        let d = eval_rhs(&l, &[1.0; 3], 0.0).unwrap();
        assert_eq!(d, vec![0.0, 26.0, 1.0 - 8.0 / 3.0]);
    }

    #[test]
    fn registry_shape() {
        let f = list_founders();
        assert!(f.len() >= 12);
        for s in &f {
            s.validate().unwrap();
            assert!(s.dim >= 3);
        }
        assert!(f.iter().any(|s| s.id == "rossler" && s.dim == 3));
    }

    #[test]
    fn dimension_mismatch_is_invalid() {
        let l = founder("lorenz").unwrap();
        assert!(matches!(
            eval_rhs(&l, &[1.0, 2.0], 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn non_finite_output_reports_index() {
        let b = reference_system("blowup").unwrap();
        match eval_rhs(&b, &[1e200], 0.0) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigma_zero_keeps_params() {
        let l = founder("lorenz").unwrap();
        let m = perturb_params(&l, 0.0, &mut rng::from_seed(1));
        assert_eq!(m.params, l.params);
        assert_eq!(m.lineage.len(), 1);
    }

    #[test]
    fn flow_rms_closed_form() {
        let s = FlowSample::new(vec![vec![0.0, 0.0]; 4], vec![vec![3.0, 4.0]; 4]).unwrap();
        assert!((flow_rms(&s).unwrap() - (25.0f64 / 2.0).sqrt()).abs() < 1e-15);
        let z = FlowSample::new(vec![vec![0.0; 3]], vec![vec![0.0; 3]]).unwrap();
        assert!(matches!(flow_rms(&z), Err(Error::DegenerateFlow(_))));
    }

    #[test]
    fn coupling_rows_are_unit_norm() {
        let m = coupling_matrix(5, 4, 3);
        for r in m.chunks(3) {
            let n: f64 = r.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
