//! The `panda` command line: one subcommand per pipeline stage, all reading
//! and writing under a single output directory.
//!
//! Layout under `--out`:
//!
//! ```text
//! run.json                  resolved config
//! dataset/manifest.json     discover, augment
//! dataset/systems/..        trajectory bundles
//! dataset/augmented/..      augmented bundles
//! dataset/splits.json       split
//! discover_report.json      acceptance rate and failure histogram
//! pretrain/mlm.ckpt         pretrain (+ log.ndjson)
//! train/model.ckpt          train (+ log.ndjson)
//! eval/metrics.csv          eval (+ summary.json)
//! probe/heatmap.{csv,json}  probe (+ mixing.csv)
//! dim/completion.csv        dim
//! ks/ks_mae.csv             ks (+ trajectory bundle)
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    augment_dataset, build_scaling_splits, evolve_generation, partition_holdout, read_bundle, write_bundle,
    AugmentConfig, Dataset, EvolveConfig, SplitPlan,
};
use crate::eval::{completion_eval, evaluate_zero_shot, CompletionConfig, EvalConfig, GpConfig, MetricReport, Persistence};
use crate::integrate::IntegrationConfig;
use crate::interpret::{cross_channel_mixing_map, embedded_patches, two_tone_probe, write_heatmap, ProbeConfig};
use crate::ks::{ks_sidecar, ks_trajectory, ks_zero_shot_eval, KsConfig};
use crate::model::{Checkpoint, ModelConfig};
use crate::rng;
use crate::systems::{founder, list_founders, SystemSpec};
use crate::train::{pretrain_mlm, train_forecast, TrainConfig, TrainIo};
use crate::trajectory::write_trajectory;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverSection {
    /// Founder names; empty means the whole registry.
    pub founders: Vec<String>,
    pub evolve: EvolveConfig,
    pub holdout_k: usize,
    /// Trajectories per system.
    pub n_ics: usize,
}

impl Default for DiscoverSection {
    fn default() -> Self {
        Self {
            founders: Vec::new(),
            evolve: EvolveConfig::default(),
            holdout_k: 3,
            n_ics: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub n_splits: usize,
    pub ics_base: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { n_splits: 4, ics_base: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub trainer: TrainConfig,
    /// Start the encoder from `pretrain/mlm.ckpt`.
    pub mlm_init: bool,
    pub use_augmented: bool,
    /// Train on one scaling split from `dataset/splits.json`.
    pub split: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            trainer: TrainConfig::default(),
            mlm_init: false,
            use_augmented: true,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimSection {
    pub completion: CompletionConfig,
    pub gp: GpConfig,
    /// Held-out systems to complete; 0 means all.
    pub max_systems: usize,
}

impl Default for DimSection {
    fn default() -> Self {
        Self {
            completion: CompletionConfig::default(),
            gp: GpConfig::default(),
            max_systems: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsSection {
    pub ks: KsConfig,
    pub integration: IntegrationConfig,
    pub eval: EvalConfig,
}

impl Default for KsSection {
    fn default() -> Self {
        Self {
            ks: KsConfig::default(),
            integration: IntegrationConfig {
                rtol: 1e-8,
                atol: 1e-10,
                max_wall_seconds: 600.0,
                ..IntegrationConfig::default()
            },
            eval: EvalConfig {
                horizons: vec![16, 32, 64],
                n_windows: 32,
                ..EvalConfig::default()
            },
        }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed` when the
/// config is resolved, so the snapshot in `run.json` pins them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub discover: DiscoverSection,
    pub augment: AugmentConfig,
    pub split: SplitSection,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub dim: DimSection,
    pub ks: KsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            discover: DiscoverSection::default(),
            augment: AugmentConfig::default(),
            split: SplitSection::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            dim: DimSection::default(),
            ks: KsSection::default(),
        }
    }
}

impl RunConfig {
    /// Applies the master seed and worker count to every stage.
    pub fn resolve(mut self, seed: u64, workers: usize) -> Self {
        self.seed = seed;
        self.workers = workers;
        let s = |label: &str| rng::derive_seed(seed, label, 0);
        self.model.seed = s("model");
        self.pretrain.seed = s("pretrain");
        self.train.trainer.seed = s("train");
        self.eval.seed = s("eval");
        self.dim.completion.seed = s("dim");
        self.ks.eval.seed = s("ks_eval");
        self.discover.evolve.workers = workers;
        self.pretrain.workers = workers;
        self.train.trainer.workers = workers;
        self
    }

    /// Every section, before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let founders = self.founder_specs()?;
        if self.discover.holdout_k >= founders.len() {
            return Err(Error::config("discover.holdout_k", "must be smaller than the founder count"));
        }
        if self.discover.n_ics == 0 {
            return Err(Error::config("discover.n_ics", "must be positive"));
        }
        self.discover.evolve.validate()?;
        if self.augment.d_embed == 0 {
            return Err(Error::config("augment.d_embed", "must be positive"));
        }
        if !(self.augment.dirichlet_alpha > 0.0) {
            return Err(Error::config("augment.dirichlet_alpha", "must be positive"));
        }
        if !(self.augment.affine_sigma > 0.0) {
            return Err(Error::config("augment.affine_sigma", "must be positive"));
        }
        if self.split.n_splits == 0 || self.split.ics_base == 0 {
            return Err(Error::config("split.n_splits", "n_splits and ics_base must be positive"));
        }
        self.model.validate()?;
        self.pretrain.validate(self.model.patch_size).map_err(|e| rename(e, "train.", "pretrain."))?;
        self.train.trainer.validate(self.model.patch_size).map_err(|e| rename(e, "train.", "train.trainer."))?;
        self.eval.validate()?;
        if self.probe.n_grid == 0 || self.probe.t_len % self.model.patch_size != 0 {
            return Err(Error::config("probe.t_len", "needs n_grid > 0 and t_len a multiple of the patch size"));
        }
        self.ks.ks.validate()?;
        self.ks.integration.validate().map_err(|e| rename(e, "", "ks.integration."))?;
        self.ks.eval.validate().map_err(|e| rename(e, "eval.", "ks.eval."))?;
        Ok(())
    }

    fn founder_specs(&self) -> Result<Vec<SystemSpec>> {
        if self.discover.founders.is_empty() {
            return Ok(list_founders());
        }
        self.discover
            .founders
            .iter()
            .map(|n| founder(n).ok_or_else(|| Error::config("discover.founders", format!("unknown founder `{n}`"))))
            .collect()
    }
}

fn rename(e: Error, from: &str, to: &str) -> Error {
    match e {
        Error::Config { field, detail } => Error::Config {
            field: format!("{to}{}", field.strip_prefix(from).unwrap_or(&field)),
            detail,
        },
        other => other,
    }
}

#[derive(Debug, Parser)]
#[command(name = "panda", version, about = "Chaotic system discovery and forecasting pipeline")]
pub struct Cli {
    /// JSON run config; missing sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. Precedence: this flag, then PANDA_SEED, then the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = "panda_out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Persistence,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve skew-product systems and hold out founders.
    Discover,
    /// Add delay, convex and affine copies of train trajectories.
    Augment,
    /// Build constant-budget scaling splits.
    Split {
        /// Number of splits (overrides the config).
        #[arg(long)]
        scaling: Option<usize>,
    },
    /// MLM pretraining.
    Pretrain,
    /// Forecast training.
    Train,
    /// Zero-shot metrics on held-out systems.
    Eval {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Two-tone attention probe and mixing map.
    Probe,
    /// Completion correlation dimension.
    Dim,
    /// Kuramoto-Sivashinsky zero-shot forecasting.
    Ks,
    /// Print the resolved config.
    Config,
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Numeric { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Reads the config file (if any) and applies seed and worker overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base: RunConfig = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}:{}:{}", p.display(), e.line(), e.column()), e.to_string()))?
        }
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("PANDA_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::config("PANDA_SEED", format!("`{v}` is not an unsigned integer")))?),
        Err(_) => None,
    };
    let seed = cli.seed.or(env_seed).unwrap_or(base.seed);
    let workers = cli.workers.unwrap_or(base.workers);
    let cfg = base.resolve(seed, workers);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.workers > 0 {
        // Fails harmlessly when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let out = cli.out.as_path();
    if matches!(cli.command, Command::Config) {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&cfg)?)?;
    match &cli.command {
        Command::Discover => cmd_discover(&cfg, out),
        Command::Augment => cmd_augment(&cfg, out),
        Command::Split { scaling } => cmd_split(&cfg, out, scaling.unwrap_or(cfg.split.n_splits)),
        Command::Pretrain => cmd_pretrain(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Eval { baseline } => cmd_eval(&cfg, out, *baseline),
        Command::Probe => cmd_probe(&cfg, out),
        Command::Dim => cmd_dim(&cfg, out),
        Command::Ks => cmd_ks(&cfg, out),
        Command::Config => unreachable!(),
    }
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn splits_path(out: &Path) -> PathBuf {
    dataset_dir(out).join("splits.json")
}

pub fn mlm_checkpoint_path(out: &Path) -> PathBuf {
    out.join("pretrain").join("mlm.ckpt")
}

pub fn model_checkpoint_path(out: &Path) -> PathBuf {
    out.join("train").join("model.ckpt")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

pub fn cmd_discover(cfg: &RunConfig, out: &Path) -> Result<()> {
    let founders = cfg.founder_specs()?;
    let (accepted, report) = evolve_generation(&founders, &cfg.discover.evolve, cfg.seed)?;
    let specs: Vec<SystemSpec> = accepted.iter().map(|a| a.spec.clone()).collect();
    let mut r = rng::stream(cfg.seed, "holdout", 0);
    let part = partition_holdout(&founders, cfg.discover.holdout_k, &specs, &mut r)?;
    let mut ds = Dataset::from_accepted(&accepted, &part, Some(report.clone()), cfg.seed);
    let ids: Vec<String> = specs.iter().map(|s| s.id.clone()).collect();
    ds.ensure_ics(&ids, cfg.discover.n_ics, &cfg.discover.evolve)?;
    let violations = ds.manifest.holdout_violations();
    if !violations.is_empty() {
        return Err(Error::invalid(format!("holdout audit failed for {violations:?}")));
    }
    let dir = dataset_dir(out);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    write_bundle(&ds, &dir)?;
    write_json(&out.join("discover_report.json"), &report)?;
    println!(
        "accepted {} of {} candidates; {} train, {} held out",
        report.accepted,
        report.candidates_evaluated,
        part.train.len(),
        part.held_out.len()
    );
    Ok(())
}

pub fn cmd_augment(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = dataset_dir(out);
    let mut ds = read_bundle(&dir)?;
    for a in std::mem::take(&mut ds.manifest.augmentations) {
        ds.trajectories.remove(&a.bundle);
    }
    augment_dataset(&mut ds, &cfg.augment)?;
    let aug = dir.join("augmented");
    if aug.exists() {
        fs::remove_dir_all(&aug)?;
    }
    write_bundle(&ds, &dir)?;
    println!("{} augmented trajectories", ds.manifest.augmentations.len());
    Ok(())
}

pub fn cmd_split(cfg: &RunConfig, out: &Path, n_splits: usize) -> Result<()> {
    let mut ds = read_bundle(&dataset_dir(out))?;
    let mut r = rng::stream(cfg.seed, "splits", 0);
    let plan = build_scaling_splits(&ds.manifest.train, n_splits, cfg.split.ics_base, &mut r)?;
    for s in &plan.splits {
        ds.ensure_ics(&s.systems, s.n_ics, &cfg.discover.evolve)?;
    }
    write_bundle(&ds, &dataset_dir(out))?;
    write_json(&splits_path(out), &plan)?;
    for s in &plan.splits {
        println!("N_sys {} x N_ics {} = {}", s.n_sys, s.n_ics, s.n_sys * s.n_ics);
    }
    Ok(())
}

pub fn read_splits(out: &Path) -> Result<SplitPlan> {
    let p = splits_path(out);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(&p)?)?;
    plan.validate()?;
    Ok(plan)
}

fn values(trajs: Vec<crate::trajectory::Trajectory>) -> Vec<Array2<f64>> {
    trajs.into_iter().map(|t| t.values).collect()
}

fn training_series(cfg: &RunConfig, out: &Path, ds: &Dataset) -> Result<Vec<Array2<f64>>> {
    let mut series = match cfg.train.split {
        Some(j) => {
            let plan = read_splits(out)?;
            let s = plan
                .splits
                .get(j)
                .ok_or_else(|| Error::config("train.split", format!("plan has {} splits", plan.splits.len())))?;
            values(ds.collect(&s.systems, s.n_ics))
        }
        None => values(ds.collect(&ds.manifest.train, usize::MAX)),
    };
    if cfg.train.use_augmented && cfg.train.split.is_none() {
        series.extend(values(ds.augmented_trajectories()));
    }
    Ok(series)
}

fn io_for(dir: &Path) -> TrainIo {
    TrainIo {
        log: Some(dir.join("log.ndjson")),
        checkpoint_dir: Some(dir.to_path_buf()),
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = read_bundle(&dataset_dir(out))?;
    let mut series = values(ds.collect(&ds.manifest.train, usize::MAX));
    series.extend(values(ds.augmented_trajectories()));
    let (mut ck, rep) = pretrain_mlm(&series, &cfg.model, &cfg.pretrain, &io_for(&out.join("pretrain")))?;
    ck.metadata.insert("corpus".into(), "ode".into());
    ck.save(&mlm_checkpoint_path(out))?;
    println!("pretrain final loss {:.5}", rep.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = read_bundle(&dataset_dir(out))?;
    let series = training_series(cfg, out, &ds)?;
    let init = if cfg.train.mlm_init {
        Some(Checkpoint::load(&mlm_checkpoint_path(out))?)
    } else {
        None
    };
    let (mut ck, rep) = train_forecast(&series, &cfg.model, &cfg.train.trainer, init.as_ref(), &io_for(&out.join("train")))?;
    ck.metadata.insert("corpus".into(), "ode".into());
    if let Some(j) = cfg.train.split {
        ck.metadata.insert("split".into(), j.to_string());
    }
    ck.save(&model_checkpoint_path(out))?;
    println!("train final loss {:.5}", rep.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn held_out_systems(ds: &Dataset) -> Vec<(String, Vec<Array2<f64>>)> {
    ds.manifest
        .held_out
        .iter()
        .map(|id| {
            let v = ds.system_trajectories(id).into_iter().map(|t| t.values.clone()).collect();
            (id.clone(), v)
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, baseline: Option<Baseline>) -> Result<()> {
    let ck = Checkpoint::load(&model_checkpoint_path(out))?;
    let ds = read_bundle(&dataset_dir(out))?;
    let systems = held_out_systems(&ds);
    if systems.is_empty() {
        return Err(Error::InsufficientData("the dataset has no held-out systems".into()));
    }
    let mut reports = vec![evaluate_zero_shot(&ck.model, "model", &systems, &cfg.eval)?];
    if baseline == Some(Baseline::Persistence) {
        let p = Persistence { horizon: ck.model.config.horizon };
        reports.push(evaluate_zero_shot(&p, "persistence", &systems, &cfg.eval)?);
    }
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;
    let mut csv = String::from(MetricReport::csv_header());
    csv.push('\n');
    let mut summary = Vec::new();
    for r in &reports {
        csv.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
        summary.push(serde_json::json!({ "model": r.model, "summary": r.summary }));
        for s in &r.summary {
            println!("{:<12} h={:<4} sMAPE median {:.3} (SIQR {:.3})", r.model, s.horizon, s.smape.median, s.smape.siqr);
        }
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

/// Checkpoint path relative to the output directory, plus its step count,
/// so reports do not depend on where the run lives.
fn checkpoint_id(out: &Path, path: &Path, ck: &Checkpoint) -> String {
    let steps = ck.metadata.get("steps").cloned().unwrap_or_default();
    let rel = path.strip_prefix(out).unwrap_or(path);
    format!("{}@{steps}", rel.display())
}

pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = model_checkpoint_path(out);
    let ck = Checkpoint::load(&path)?;
    let heat = two_tone_probe(&ck.model, &cfg.probe)?;
    let dir = out.join("probe");
    write_heatmap(&dir, "heatmap", &heat, &checkpoint_id(out, &path, &ck))?;
    println!("off-diagonal variance {:.6e}", heat.off_diagonal_variance());
    if ck.model.config.use_channel_attn {
        let ds = read_bundle(&dataset_dir(out))?;
        let ctx_len = cfg.eval.context_len;
        let traj = ds
            .manifest
            .held_out
            .iter()
            .chain(&ds.manifest.train)
            .flat_map(|id| ds.system_trajectories(id))
            .find(|t| t.len() >= ctx_len && t.channels() >= 2);
        if let Some(t) = traj {
            let ctx = t.values.slice(ndarray::s![.., ..ctx_len]).to_owned();
            let emb = embedded_patches(&ck.model, &ctx)?;
            let n = ctx_len / ck.model.config.patch_size - 1;
            let m = cross_channel_mixing_map(&ck.model, &emb, n, 0, 1, 0)?;
            let mut csv = String::new();
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            fs::write(dir.join("mixing.csv"), csv)?;
            write_json(
                &dir.join("mixing.json"),
                &serde_json::json!({ "system": t.spec_ref, "patch": n, "channels": [0, 1], "layer": 0, "checkpoint": checkpoint_id(out, &path, &ck) }),
            )?;
        }
    }
    Ok(())
}

pub fn cmd_dim(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(&mlm_checkpoint_path(out))?;
    let ds = read_bundle(&dataset_dir(out))?;
    let mut ids = ds.manifest.held_out.clone();
    if cfg.dim.max_systems > 0 {
        ids.truncate(cfg.dim.max_systems);
    }
    let mut csv = String::from("system,d2_truth,d2_completion\n");
    for id in &ids {
        let Some(t) = ds.system_trajectories(id).into_iter().next() else { continue };
        let c = completion_eval(&ck.model, &t.values, &cfg.dim.completion, &cfg.dim.gp)?;
        csv.push_str(&format!("{id},{},{}\n", c.d2_truth, c.d2_completion));
        println!("{id}: D2 truth {:.3} completion {:.3}", c.d2_truth, c.d2_completion);
    }
    let dir = out.join("dim");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("completion.csv"), csv)?;
    Ok(())
}

pub fn cmd_ks(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(&model_checkpoint_path(out))?;
    let traj = ks_trajectory(&cfg.ks.ks, &cfg.ks.integration, rng::derive_seed(cfg.seed, "ks", 0))?;
    let dir = out.join("ks");
    write_trajectory(&dir.join("ks_traj.pnda"), &traj, ks_sidecar(&cfg.ks.ks))?;
    let rep = ks_zero_shot_eval(&ck, &traj, &cfg.ks.eval)?;
    let mut csv = String::from("horizon,model_mae,model_se,persistence_mae,persistence_se\n");
    for (m, p) in rep.model.iter().zip(&rep.persistence) {
        csv.push_str(&format!("{},{},{},{},{}\n", m.horizon, m.mean, m.se, p.mean, p.se));
        println!("h={:<4} MAE model {:.4} persistence {:.4}", m.horizon, m.mean, p.mean);
    }
    fs::write(dir.join("ks_mae.csv"), csv)?;
    write_json(&dir.join("ks_report.json"), &rep)?;
    Ok(())
}
