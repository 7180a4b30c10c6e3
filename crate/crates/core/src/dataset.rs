//! Evolutionary generation of skew-product systems, held-out partitioning,
//! augmentations, scaling splits and on-disk datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chaos::{self, ChaosVerdict, SelectionConfig};
use crate::error::{Error, Result};
use crate::integrate::{
    attractor_flow_sample, integrate, sample_on_attractor_ic, GuardOutcome, GuardReport,
    IntegrationConfig, Method,
};
use crate::rng::{self, Rng};
use crate::systems::{make_skew_product, perturb_params, pick_pair, SystemSpec};
use crate::trajectory::{self, Trajectory};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub target_count: usize,
    pub max_candidates: usize,
    /// Relative mutation scale.
    pub sigma: f64,
    pub n_points: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_wall_seconds: f64,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub selection: SelectionConfig,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            target_count: 50,
            max_candidates: 2000,
            sigma: 0.05,
            n_points: 4096,
            rtol: 1e-9,
            atol: 1e-10,
            max_wall_seconds: 5.0,
            workers: 0,
            selection: SelectionConfig::default(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("discover.sigma", "must be a finite value >= 0"));
        }
        if self.n_points < 2048 {
            return Err(Error::config("discover.n_points", "the battery needs >= 2048 points"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("discover.rtol", "tolerances must be positive"));
        }
        self.selection.validate()
    }

    fn integration(&self, spec: &SystemSpec) -> IntegrationConfig {
        IntegrationConfig {
            rtol: self.rtol,
            atol: self.atol,
            t_span: (0.0, spec.dt * (self.n_points - 1) as f64),
            n_points: self.n_points,
            max_wall_seconds: self.max_wall_seconds,
            amplitude_bound: self.selection.amplitude_bound,
            method: Method::Dop853,
            ..IntegrationConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Accepted {
    pub candidate_index: usize,
    pub spec: SystemSpec,
    pub trajectory: Trajectory,
    pub guard: GuardReport,
    pub verdict: ChaosVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    pub candidates_evaluated: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Rejections keyed by the stage that failed.
    pub failure_histogram: BTreeMap<String, usize>,
}

enum Outcome {
    Accepted(Box<Accepted>),
    Rejected(String),
}

fn evaluate_candidate(
    founders: &[SystemSpec],
    idx: usize,
    cfg: &EvolveConfig,
    seed: u64,
) -> Outcome {
    let mut r = rng::stream(seed, "candidate", idx as u64);
    let (a, b) = pick_pair(founders.len(), &mut r);
    let driver = perturb_params(&founders[a], cfg.sigma, &mut r);
    let response = perturb_params(&founders[b], cfg.sigma, &mut r);
    let (ds, rs) = match (
        attractor_flow_sample(&driver, 1024),
        attractor_flow_sample(&response, 1024),
    ) {
        (Ok(d), Ok(s)) => (d, s),
        _ => return Outcome::Rejected("sampling".into()),
    };
    let spec = match make_skew_product(&driver, &response, &ds, &rs) {
        Ok(s) => s,
        Err(_) => return Outcome::Rejected("scaling".into()),
    };
    let x0 = match sample_on_attractor_ic(&spec, &mut r) {
        Ok(x) => x,
        Err(_) => return Outcome::Rejected("sampling".into()),
    };
    let (traj, guard) = match integrate(&spec, &x0, &cfg.integration(&spec)) {
        Ok(v) => v,
        Err(_) => return Outcome::Rejected("integration".into()),
    };
    if guard.outcome != GuardOutcome::Completed {
        return Outcome::Rejected("integration".into());
    }
    let verdict = chaos::select(&traj, &cfg.selection, &mut r);
    if !verdict.accepted {
        let stage = verdict.failed_stage.map(|s| s.name()).unwrap_or("unknown");
        return Outcome::Rejected(stage.into());
    }
    Outcome::Accepted(Box::new(Accepted {
        candidate_index: idx,
        spec,
        trajectory: traj,
        guard,
        verdict,
    }))
}

/// Mutate, recombine, integrate and select until `target_count` systems are
/// accepted or `max_candidates` are spent. Candidate `i` depends only on
/// `(founders, cfg, seed, i)`, so results do not depend on worker count.
pub fn evolve_generation(
    founders: &[SystemSpec],
    cfg: &EvolveConfig,
    seed: u64,
) -> Result<(Vec<Accepted>, EvolveReport)> {
    if founders.len() < 2 {
        return Err(Error::invalid("need at least two founders"));
    }
    cfg.validate()?;
    let mut accepted = Vec::new();
    let mut report = EvolveReport::default();
    if cfg.target_count == 0 {
        return Ok((accepted, report));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let chunk = (pool.current_num_threads() * 2).max(4);
    let mut next = 0usize;
    'outer: while next < cfg.max_candidates {
        let end = (next + chunk).min(cfg.max_candidates);
        let outcomes: Vec<Outcome> = pool.install(|| {
            (next..end)
                .into_par_iter()
                .map(|i| evaluate_candidate(founders, i, cfg, seed))
                .collect()
        });
        for o in outcomes {
            report.candidates_evaluated += 1;
            match o {
                Outcome::Accepted(a) => {
                    accepted.push(*a);
                    if accepted.len() >= cfg.target_count {
                        break 'outer;
                    }
                }
                Outcome::Rejected(stage) => {
                    *report.failure_histogram.entry(stage).or_insert(0) += 1;
                }
            }
        }
        next = end;
    }
    report.accepted = accepted.len();
    report.acceptance_rate = if report.candidates_evaluated > 0 {
        report.accepted as f64 / report.candidates_evaluated as f64
    } else {
        0.0
    };
    if accepted.is_empty() {
        log::warn!(
            "no candidates accepted after {} tries: {:?}",
            report.candidates_evaluated,
            report.failure_histogram
        );
    } else {
        log::info!(
            "accepted {} of {} candidates ({:.1}%)",
            report.accepted,
            report.candidates_evaluated,
            100.0 * report.acceptance_rate
        );
    }
    Ok((accepted, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FounderSplit {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub founders: FounderSplit,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

/// Holds out `k` founders and every system whose lineage touches one of
/// them, as driver or response.
pub fn partition_holdout(
    founders: &[SystemSpec],
    k: usize,
    systems: &[SystemSpec],
    rng: &mut Rng,
) -> Result<Partition> {
    if k >= founders.len() {
        return Err(Error::invalid("k must be smaller than the number of founders"));
    }
    let picked: BTreeSet<usize> = index::sample(rng, founders.len(), k).into_iter().collect();
    let mut split = FounderSplit::default();
    for (i, f) in founders.iter().enumerate() {
        let name = f.founder_id.clone().unwrap_or_else(|| f.id.clone());
        if picked.contains(&i) {
            split.held_out.push(name);
        } else {
            split.train.push(name);
        }
    }
    let held: BTreeSet<&String> = split.held_out.iter().collect();
    let mut part = Partition {
        founders: split.clone(),
        ..Default::default()
    };
    for s in systems {
        if s.founders_touched().iter().any(|f| held.contains(f)) {
            part.held_out.push(s.id.clone());
        } else {
            part.train.push(s.id.clone());
        }
    }
    Ok(part)
}

/// Shifts channel `c` by `delays[c]`: `out[c][t] = in[c][t + max − delays[c]]`,
/// i.e. output time `t` corresponds to input time `t + max(delays)`.
pub fn delay_embed_with(traj: &Trajectory, delays: &[usize]) -> Result<Trajectory> {
    if delays.len() != traj.channels() {
        return Err(Error::invalid("one delay per channel required"));
    }
    let dmax = delays.iter().copied().max().unwrap_or(0);
    if traj.len() <= dmax + 1 {
        return Err(Error::invalid("trajectory shorter than the largest delay"));
    }
    let t_out = traj.len() - dmax;
    let v = Array2::from_shape_fn((traj.channels(), t_out), |(c, t)| {
        traj.values[[c, t + dmax - delays[c]]]
    });
    Ok(Trajectory {
        values: v,
        dt: traj.dt,
        t0: traj.t0 + dmax as f64 * traj.dt,
        spec_ref: traj.spec_ref.clone(),
    })
}

/// Random per-channel delays τ ~ U{1..d_embed}.
pub fn augment_delay_embed(traj: &Trajectory, d_embed: usize, rng: &mut Rng) -> Result<Trajectory> {
    if d_embed == 0 || traj.len() <= d_embed {
        return Err(Error::invalid("trajectory must be longer than d_embed"));
    }
    let delays: Vec<usize> = (0..traj.channels())
        .map(|_| rng.random_range(1..=d_embed))
        .collect();
    delay_embed_with(traj, &delays)
}

fn out_dim(rng: &mut Rng) -> usize {
    rng.random_range(3..=10)
}

/// Row-stochastic `d × C` mixing matrix with Dirichlet(α·1) rows.
pub fn dirichlet_rows(d: usize, c: usize, alpha: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut m = Array2::zeros((d, c));
    for mut row in m.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = g.sample(rng);
            }
            let s: f64 = row.sum();
            if s > 0.0 && s.is_finite() {
                row.mapv_inplace(|v| v / s);
                break;
            }
        }
    }
    Ok(m)
}

/// `X ← C X` with `d ~ U{3..10}` output channels.
pub fn augment_convex(traj: &Trajectory, alpha: f64, rng: &mut Rng) -> Result<Trajectory> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let d = out_dim(rng);
    let c = dirichlet_rows(d, traj.channels(), alpha, rng)?;
    Ok(Trajectory {
        values: c.dot(&traj.values),
        dt: traj.dt,
        t0: traj.t0,
        spec_ref: traj.spec_ref.clone(),
    })
}

/// `[A b]` with entries ~ N(0, σ²)/√d.
pub fn affine_matrix(d: usize, c: usize, sigma: f64, rng: &mut Rng) -> Array2<f64> {
    let s = sigma / (d as f64).sqrt();
    Array2::from_shape_fn((d, c + 1), |_| {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    })
}

pub fn apply_affine(traj: &Trajectory, ab: &Array2<f64>) -> Trajectory {
    let c = traj.channels();
    let a = ab.slice(ndarray::s![.., ..c]);
    let b = ab.column(c);
    let mut v = a.dot(&traj.values);
    for (mut row, bi) in v.rows_mut().into_iter().zip(b.iter()) {
        row += *bi;
    }
    Trajectory {
        values: v,
        dt: traj.dt,
        t0: traj.t0,
        spec_ref: traj.spec_ref.clone(),
    }
}

/// `X ← A X + b` with `d ~ U{3..10}` output channels.
pub fn augment_affine(traj: &Trajectory, sigma: f64, rng: &mut Rng) -> Result<Trajectory> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let d = out_dim(rng);
    let ab = affine_matrix(d, traj.channels(), sigma, rng);
    Ok(apply_affine(traj, &ab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub n_sys: usize,
    pub n_ics: usize,
    pub systems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
}

impl SplitPlan {
    /// Equal budgets and strictly nested system sets.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.splits.first() else {
            return Err(Error::invalid("split plan is empty"));
        };
        let budget = first.n_sys * first.n_ics;
        for (j, s) in self.splits.iter().enumerate() {
            if s.systems.len() != s.n_sys || s.n_sys * s.n_ics != budget {
                return Err(Error::invalid(format!("split {j} breaks the fixed budget")));
            }
            if j > 0 {
                let prev: BTreeSet<&String> = self.splits[j - 1].systems.iter().collect();
                if s.n_sys >= self.splits[j - 1].n_sys
                    || !s.systems.iter().all(|x| prev.contains(x))
                {
                    return Err(Error::invalid(format!("split {j} is not a strict subset")));
                }
            }
        }
        Ok(())
    }
}

/// Split `j` uses `N/2^j` systems with `ics_base·2^j` ICs each. The pool is
/// trimmed to a multiple of `2^(n_splits−1)` so every product is equal.
pub fn build_scaling_splits(
    systems: &[String],
    n_splits: usize,
    ics_base: usize,
    rng: &mut Rng,
) -> Result<SplitPlan> {
    if n_splits == 0 || ics_base == 0 {
        return Err(Error::invalid("n_splits and ics_base must be positive"));
    }
    let unit = 1usize << (n_splits - 1);
    if systems.len() < unit {
        return Err(Error::invalid(format!(
            "{} splits need at least {unit} systems, got {}",
            n_splits,
            systems.len()
        )));
    }
    let total = systems.len() / unit * unit;
    let mut order: Vec<String> = systems.to_vec();
    order.sort();
    order.shuffle(rng);
    order.truncate(total);
    let splits = (0..n_splits)
        .map(|j| {
            let n_sys = total >> j;
            Split {
                n_sys,
                n_ics: ics_base << j,
                systems: order[..n_sys].to_vec(),
            }
        })
        .collect();
    let plan = SplitPlan { splits };
    plan.validate()?;
    Ok(plan)
}

/// Additional trajectories of `spec` from fresh on-attractor ICs.
pub fn sample_trajectories(
    spec: &SystemSpec,
    count: usize,
    cfg: &EvolveConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut r = rng::stream(seed, &format!("ics/{}", spec.id), k as u64);
        let x0 = sample_on_attractor_ic(spec, &mut r)?;
        let (tr, rep) = integrate(spec, &x0, &cfg.integration(spec))?;
        if rep.outcome != GuardOutcome::Completed {
            return Err(Error::Unsampleable(format!(
                "`{}` tripped {:?}: {}",
                spec.id, rep.outcome, rep.detail
            )));
        }
        out.push(tr);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEntry {
    pub id: String,
    pub spec: SystemSpec,
    pub bundles: Vec<String>,
    #[serde(default)]
    pub verdict: Option<ChaosVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub id: String,
    pub source: String,
    pub kind: String,
    pub params: BTreeMap<String, f64>,
    pub bundle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub master_seed: u64,
    pub systems: Vec<SystemEntry>,
    pub founder_split: FounderSplit,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
    pub n_sys: usize,
    pub n_ics: usize,
    #[serde(default)]
    pub augmentations: Vec<AugmentationRecord>,
    #[serde(default)]
    pub report: Option<EvolveReport>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&SystemEntry> {
        self.systems.iter().find(|e| e.id == id)
    }

    /// Ids of train systems whose lineage touches a held-out founder.
    pub fn holdout_violations(&self) -> Vec<String> {
        let held: BTreeSet<&String> = self.founder_split.held_out.iter().collect();
        self.train
            .iter()
            .filter_map(|id| self.entry(id))
            .filter(|e| e.spec.founders_touched().iter().any(|f| held.contains(f)))
            .map(|e| e.id.clone())
            .collect()
    }
}

/// A manifest plus its trajectories, keyed by bundle path.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: BTreeMap<String, Trajectory>,
}

impl Dataset {
    /// Builds a dataset from discovery output; each system keeps its
    /// discovery trajectory as `traj_0`.
    pub fn from_accepted(
        accepted: &[Accepted],
        partition: &Partition,
        report: Option<EvolveReport>,
        seed: u64,
    ) -> Self {
        let mut systems = Vec::new();
        let mut trajectories = BTreeMap::new();
        for a in accepted {
            let path = bundle_rel_path(&a.spec.id, 0);
            trajectories.insert(path.clone(), a.trajectory.clone());
            systems.push(SystemEntry {
                id: a.spec.id.clone(),
                spec: a.spec.clone(),
                bundles: vec![path],
                verdict: Some(a.verdict.clone()),
            });
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("corpus".into(), "ode".into());
        Dataset {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                master_seed: seed,
                n_sys: systems.len(),
                n_ics: 1,
                systems,
                founder_split: partition.founders.clone(),
                train: partition.train.clone(),
                held_out: partition.held_out.clone(),
                augmentations: Vec::new(),
                report,
                metadata,
            },
            trajectories,
        }
    }

    pub fn system_trajectories(&self, id: &str) -> Vec<&Trajectory> {
        self.manifest
            .entry(id)
            .map(|e| e.bundles.iter().filter_map(|b| self.trajectories.get(b)).collect())
            .unwrap_or_default()
    }

    /// Trajectories for the listed systems, up to `max_ics` each.
    pub fn collect(&self, ids: &[String], max_ics: usize) -> Vec<Trajectory> {
        ids.iter()
            .flat_map(|id| {
                self.system_trajectories(id)
                    .into_iter()
                    .take(max_ics)
                    .cloned()
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn augmented_trajectories(&self) -> Vec<Trajectory> {
        self.manifest
            .augmentations
            .iter()
            .filter_map(|a| self.trajectories.get(&a.bundle).cloned())
            .collect()
    }

    /// Ensures each listed system has at least `n` trajectories.
    pub fn ensure_ics(&mut self, ids: &[String], n: usize, cfg: &EvolveConfig) -> Result<()> {
        let seed = self.manifest.master_seed;
        for id in ids {
            let entry = self
                .manifest
                .systems
                .iter_mut()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::invalid(format!("unknown system `{id}`")))?;
            let have = entry.bundles.len();
            if have >= n {
                continue;
            }
            let extra = sample_trajectories(&entry.spec, n - have, cfg, seed)?;
            for (k, tr) in extra.into_iter().enumerate() {
                let path = bundle_rel_path(id, have + k);
                self.trajectories.insert(path.clone(), tr);
                entry.bundles.push(path);
            }
        }
        self.manifest.n_ics = self
            .manifest
            .systems
            .iter()
            .map(|e| e.bundles.len())
            .max()
            .unwrap_or(0);
        Ok(())
    }
}

pub fn bundle_rel_path(id: &str, k: usize) -> String {
    format!("systems/{id}/traj_{k}.pnda")
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn write_bundle(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let specs: BTreeMap<&str, &SystemEntry> = ds
        .manifest
        .systems
        .iter()
        .flat_map(|e| e.bundles.iter().map(move |b| (b.as_str(), e)))
        .collect();
    for (rel, tr) in &ds.trajectories {
        let mut extra = serde_json::Map::new();
        if let Some(e) = specs.get(rel.as_str()) {
            extra.insert("spec".into(), serde_json::to_value(&e.spec)?);
            if let Some(v) = &e.verdict {
                extra.insert("verdict".into(), serde_json::to_value(v)?);
            }
        }
        trajectory::write_trajectory(&dir.join(rel), tr, extra)?;
    }
    fs::write(
        manifest_path(dir),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let p = manifest_path(dir);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&p)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

pub fn read_bundle(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut trajectories = BTreeMap::new();
    let paths = manifest
        .systems
        .iter()
        .flat_map(|e| e.bundles.iter())
        .chain(manifest.augmentations.iter().map(|a| &a.bundle));
    for rel in paths {
        let (tr, _) = trajectory::read_trajectory(&dir.join(rel))?;
        trajectories.insert(rel.clone(), tr);
    }
    Ok(Dataset {
        manifest,
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub per_trajectory: usize,
    pub d_embed: usize,
    pub dirichlet_alpha: f64,
    pub affine_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            per_trajectory: 1,
            d_embed: 10,
            dirichlet_alpha: 1.0,
            affine_sigma: 1.0,
        }
    }
}

/// Adds augmented copies of every train trajectory (delay, convex, affine
/// in rotation) and logs them in the manifest.
pub fn augment_dataset(ds: &mut Dataset, cfg: &AugmentConfig) -> Result<()> {
    let seed = ds.manifest.master_seed;
    let mut new = Vec::new();
    for id in ds.manifest.train.clone() {
        let bundles = ds.manifest.entry(&id).map(|e| e.bundles.clone()).unwrap_or_default();
        for (b, bundle) in bundles.iter().enumerate() {
            let tr = &ds.trajectories[bundle];
            for k in 0..cfg.per_trajectory {
                let mut r = rng::stream(seed, &format!("augment/{id}/{b}"), k as u64);
                let (kind, out, params) = match k % 3 {
                    0 => (
                        "delay",
                        augment_delay_embed(tr, cfg.d_embed, &mut r)?,
                        BTreeMap::from([("d_embed".to_string(), cfg.d_embed as f64)]),
                    ),
                    1 => (
                        "convex",
                        augment_convex(tr, cfg.dirichlet_alpha, &mut r)?,
                        BTreeMap::from([("alpha".to_string(), cfg.dirichlet_alpha)]),
                    ),
                    _ => (
                        "affine",
                        augment_affine(tr, cfg.affine_sigma, &mut r)?,
                        BTreeMap::from([("sigma".to_string(), cfg.affine_sigma)]),
                    ),
                };
                let aug_id = format!("{id}_aug{b}_{k}");
                let bundle = format!("augmented/{aug_id}.pnda");
                new.push((
                    AugmentationRecord {
                        id: aug_id,
                        source: id.clone(),
                        kind: kind.into(),
                        params,
                        bundle: bundle.clone(),
                    },
                    out,
                ));
            }
        }
    }
    for (rec, tr) in new {
        ds.trajectories.insert(rec.bundle.clone(), tr);
        ds.manifest.augmentations.push(rec);
    }
    Ok(())
}
