//! Experiment orchestration: datasets, sweeps, scans and reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchHyper, ArchKind, GnnPolicy, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::io::{self, write_atomic};
use crate::sim::{rollout, sample_initial_conditions, ExpertPolicy, FlockingConfig, Policy, SwarmState, Trajectory};
use crate::train::{train_imitation, Dataset, TrainConfig};

/// Version of the `results.csv` column set.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_COLUMNS: [&str; 11] = [
    "schema_version",
    "experiment_id",
    "architecture",
    "G",
    "K",
    "scan_value",
    "mean_normalized_cost",
    "std",
    "realizations",
    "failures",
    "wall_time",
];

/// Deterministic child seed of `base` for a tuple of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 400,
            validation: 20,
            test: 20,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Retries per trajectory before dataset generation gives up.
const MAX_RESAMPLES: u64 = 100;

/// Expert rollouts from fresh initial conditions, split by `counts`.
///
/// Trajectory `i` is drawn from a seed derived from `(seed, i, attempt)`;
/// a rollout that ends in a collision is redrawn with the next attempt.
pub fn generate_dataset(cfg: &FlockingConfig, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if counts.train == 0 || counts.validation == 0 || counts.test == 0 {
        return invalid("every split needs at least one trajectory");
    }
    let trajs: Result<Vec<Trajectory>> = (0..counts.total() as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_RESAMPLES {
                let init = sample_initial_conditions(cfg, derive_seed(seed, &[i, attempt]))?;
                let traj = rollout(&mut ExpertPolicy::new(cfg), &init, cfg);
                match &traj.failure {
                    None => return Ok(traj),
                    Some(f) => eprintln!(
                        "trajectory {i}: expert rollout failed at step {} ({}), resampling",
                        f.time, f.reason
                    ),
                }
            }
            Err(Error::Config(format!(
                "trajectory {i}: {MAX_RESAMPLES} consecutive expert failures"
            )))
        })
        .collect();
    let mut trajs = trajs?;
    let test = trajs.split_off(counts.train + counts.validation);
    let validation = trajs.split_off(counts.train);
    Ok(Dataset {
        flocking: cfg.clone(),
        train: trajs,
        validation,
        test,
    })
}

pub fn dataset_cache_path(dir: &Path, cfg: &FlockingConfig, counts: SplitCounts, seed: u64) -> PathBuf {
    dir.join(format!(
        "dataset_{:016x}_s{seed}_{}-{}-{}.bin",
        cfg.hash(),
        counts.train,
        counts.validation,
        counts.test
    ))
}

/// Loads the cached dataset for `(config, counts, seed)` or generates and
/// stores it.
pub fn load_or_generate_dataset(dir: &Path, cfg: &FlockingConfig, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    let path = dataset_cache_path(dir, cfg, counts, seed);
    if path.exists() {
        return io::load_dataset(&path);
    }
    let data = generate_dataset(cfg, counts, seed)?;
    io::save_dataset(&path, &data)?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    /// Per initial condition `policy cost / expert cost`, failures excluded.
    pub ratios: Vec<f64>,
    pub failures: usize,
    /// Mean terminal velocity variation `c(V(T))` of the policy.
    pub terminal_cost: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs a policy and the expert from each initial state and reports the
/// ratio of cumulative costs.
pub fn evaluate_against_expert<F>(make_policy: F, inits: &[SwarmState], cfg: &FlockingConfig) -> EvalSummary
where
    F: Fn() -> Box<dyn Policy> + Sync,
{
    let runs: Vec<Option<(f64, f64)>> = inits
        .par_iter()
        .map(|init| {
            let mut policy = make_policy();
            let learned = rollout(policy.as_mut(), init, cfg);
            let expert = rollout(&mut ExpertPolicy::new(cfg), init, cfg);
            if learned.failed() || expert.failed() {
                return None;
            }
            Some((
                learned.cumulative_cost() / expert.cumulative_cost(),
                learned.terminal_cost(),
            ))
        })
        .collect();
    let ok: Vec<(f64, f64)> = runs.iter().flatten().copied().collect();
    let ratios: Vec<f64> = ok.iter().map(|r| r.0).collect();
    let (mean, std) = mean_std(&ratios);
    let terminal = mean_std(&ok.iter().map(|r| r.1).collect::<Vec<_>>()).0;
    EvalSummary {
        mean,
        std,
        failures: runs.len() - ok.len(),
        ratios,
        terminal_cost: terminal,
    }
}

/// Normalized cost of a trained controller over a set of initial states.
pub fn evaluate_policy(params: &ModelParams, inits: &[SwarmState], cfg: &FlockingConfig) -> EvalSummary {
    evaluate_against_expert(|| Box::new(GnnPolicy::new(params.clone())), inits, cfg)
}

pub fn initial_states(trajs: &[Trajectory]) -> Vec<SwarmState> {
    trajs.iter().map(|t| t.initial_state().clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Sweep,
    InitVelocity,
    CommRadius,
    TransferScale,
    ReproduceTable1,
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentId::Sweep => "sweep",
            ExperimentId::InitVelocity => "init_velocity",
            ExperimentId::CommRadius => "comm_radius",
            ExperimentId::TransferScale => "transfer_scale",
            ExperimentId::ReproduceTable1 => "reproduce_table1",
        })
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(ExperimentId::Sweep),
            "init_velocity" => Ok(ExperimentId::InitVelocity),
            "comm_radius" => Ok(ExperimentId::CommRadius),
            "transfer_scale" => Ok(ExperimentId::TransferScale),
            "reproduce_table1" => Ok(ExperimentId::ReproduceTable1),
            _ => invalid(format!("unknown experiment `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub architectures: Vec<ArchKind>,
    /// `(G, K)` pairs.
    pub grid: Vec<(usize, usize)>,
    /// Values of the scanned quantity for scan experiments.
    pub scan: Vec<f64>,
    pub realizations: usize,
    pub flocking: FlockingConfig,
    pub train: TrainConfig,
    pub counts: SplitCounts,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; cells of one realization run concurrently.
    pub jobs: usize,
}

impl ExperimentSpec {
    /// Full hyperparameter grid on the default configuration.
    pub fn table1(out_dir: impl Into<PathBuf>) -> Self {
        let grid = [16, 32, 64]
            .iter()
            .flat_map(|&g| [2, 3, 4].map(move |k| (g, k)))
            .collect();
        Self {
            id: ExperimentId::ReproduceTable1,
            architectures: ArchKind::ALL.to_vec(),
            grid,
            scan: Vec::new(),
            realizations: 10,
            flocking: FlockingConfig::default(),
            train: TrainConfig::default(),
            counts: SplitCounts::default(),
            seed: 0,
            out_dir: out_dir.into(),
            jobs: 1,
        }
    }

    /// Default scan values of each scan experiment.
    pub fn default_scan(id: ExperimentId) -> Vec<f64> {
        match id {
            ExperimentId::InitVelocity => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            ExperimentId::CommRadius => vec![1.5, 2.0, 2.5, 3.0],
            ExperimentId::TransferScale => vec![50.0, 62.0, 75.0, 87.0, 100.0],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.architectures.is_empty() {
            return Err(Error::Config("experiment grid must be nonempty".into()));
        }
        if self.realizations == 0 {
            return Err(Error::Config("realizations must be at least 1".into()));
        }
        self.flocking.validate()?;
        self.train.validate()
    }

    fn cell_dir(&self, kind: ArchKind, g: usize, k: usize, realization: usize) -> PathBuf {
        self.out_dir
            .join("cells")
            .join(format!("{kind}_G{g}_K{k}"))
            .join(format!("r{realization}"))
    }

    fn dataset_seed(&self, realization: usize) -> u64 {
        derive_seed(self.seed, &[0xda7a, realization as u64])
    }

    fn train_config(&self, kind: ArchKind, g: usize, k: usize, realization: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[realization as u64, kind.code() as u64, g as u64, k as u64]),
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: ExperimentId,
    pub architecture: ArchKind,
    pub g: usize,
    pub k: usize,
    pub scan_value: Option<f64>,
    pub mean_normalized_cost: f64,
    pub std: f64,
    pub realizations: usize,
    pub failures: usize,
    pub wall_time: f64,
}

/// Outcome of one trained cell in one realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub architecture: ArchKind,
    pub g: usize,
    pub k: usize,
    pub realization: usize,
    pub eval: Option<EvalSummary>,
    pub best_step: usize,
    pub best_val_cost: f64,
    pub error: Option<String>,
    pub wall_time: f64,
    pub checkpoint: PathBuf,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Trains one architecture on a dataset, stores checkpoints and log, and
/// evaluates the selected model on the test split.
pub fn train_and_evaluate(
    dataset: &Dataset,
    hyper: &ArchHyper,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(ModelParams, CellResult)> {
    let started = Instant::now();
    let outcome = train_imitation(dataset, hyper, cfg)?;
    let checkpoint = dir.join("best.ckpt");
    io::save_checkpoint(&checkpoint, &outcome.best)?;
    io::save_checkpoint(&dir.join("last.ckpt"), &outcome.last)?;
    let log = io::log_to_csv(&outcome.log)?;
    write_atomic(&dir.join("log.csv"), |w| Ok(w.write_all(log.as_bytes())?))?;
    let eval = evaluate_policy(&outcome.best, &initial_states(&dataset.test), &dataset.flocking);
    let cell = CellResult {
        architecture: hyper.kind,
        g: hyper.hidden,
        k: hyper.k,
        realization: 0,
        eval: Some(eval),
        best_step: outcome.best_step,
        best_val_cost: outcome.best_val_cost,
        error: outcome.error,
        wall_time: started.elapsed().as_secs_f64(),
        checkpoint,
    };
    write_json(&dir.join("cell.json"), &cell)?;
    Ok((outcome.best, cell))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn aggregate(
    id: ExperimentId,
    kind: ArchKind,
    g: usize,
    k: usize,
    scan_value: Option<f64>,
    per_realization: &[Option<f64>],
    wall_time: f64,
) -> ResultRecord {
    let ok: Vec<f64> = per_realization.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&ok);
    ResultRecord {
        experiment_id: id,
        architecture: kind,
        g,
        k,
        scan_value,
        mean_normalized_cost: mean,
        std,
        realizations: ok.len(),
        failures: per_realization.len() - ok.len(),
        wall_time,
    }
}

/// Architecture x grid x realization: train, evaluate, aggregate.
///
/// Each realization draws one dataset shared by all of its cells. Records
/// hold the mean and standard deviation over realizations of the mean
/// normalized test cost.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let cells: Vec<(ArchKind, usize, usize)> = spec
        .architectures
        .iter()
        .flat_map(|&a| spec.grid.iter().map(move |&(g, k)| (a, g, k)))
        .collect();
    let workers = pool(spec.jobs)?;
    let mut per_cell: Vec<Vec<Option<f64>>> = vec![Vec::new(); cells.len()];
    let mut wall: Vec<f64> = vec![0.0; cells.len()];
    let mut details = Vec::new();
    for r in 0..spec.realizations {
        let dataset = load_or_generate_dataset(
            &spec.out_dir.join("datasets"),
            &spec.flocking,
            spec.counts,
            spec.dataset_seed(r),
        )?;
        let results: Vec<Result<CellResult>> = workers.install(|| {
            cells
                .par_iter()
                .map(|&(kind, g, k)| {
                    let hyper = ArchHyper::flocking(kind, g, k);
                    let cfg = spec.train_config(kind, g, k, r);
                    let (_, mut cell) = train_and_evaluate(&dataset, &hyper, &cfg, &spec.cell_dir(kind, g, k, r))?;
                    cell.realization = r;
                    Ok(cell)
                })
                .collect()
        });
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok(cell) => {
                    per_cell[i].push(cell.eval.as_ref().map(|e| e.mean).filter(|m| m.is_finite()));
                    wall[i] += cell.wall_time;
                    details.push(cell);
                }
                Err(e) => {
                    let (kind, g, k) = cells[i];
                    eprintln!("cell {kind} G={g} K={k} realization {r} failed: {e}");
                    per_cell[i].push(None);
                }
            }
        }
    }
    let records: Vec<ResultRecord> = cells
        .iter()
        .enumerate()
        .map(|(i, &(kind, g, k))| aggregate(spec.id, kind, g, k, None, &per_cell[i], wall[i]))
        .collect();
    write_reports(spec, &records, &details)?;
    Ok(records)
}

/// Lowest mean normalized cost per architecture.
pub fn best_per_architecture(records: &[ResultRecord]) -> Vec<ResultRecord> {
    let mut out: Vec<ResultRecord> = Vec::new();
    for r in records.iter().filter(|r| r.mean_normalized_cost.is_finite()) {
        match out.iter_mut().find(|b| b.architecture == r.architecture) {
            Some(b) if r.mean_normalized_cost < b.mean_normalized_cost => *b = r.clone(),
            Some(_) => {}
            None => out.push(r.clone()),
        }
    }
    out
}

/// Configuration for one point of a scan experiment.
pub fn scanned_config(id: ExperimentId, base: &FlockingConfig, value: f64) -> Result<FlockingConfig> {
    let cfg = match id {
        ExperimentId::TransferScale => {
            if value < 1.0 || value.fract() != 0.0 {
                return invalid(format!("team size must be a positive integer, got {value}"));
            }
            FlockingConfig {
                agents: value as usize,
                ..base.clone()
            }
        }
        ExperimentId::InitVelocity => FlockingConfig {
            init_velocity_max: value,
            ..base.clone()
        },
        ExperimentId::CommRadius => FlockingConfig {
            comm_radius: value,
            ..base.clone()
        },
        _ => return invalid(format!("{id} is not a scan experiment")),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fresh test initial conditions for a configuration.
pub fn sample_test_states(cfg: &FlockingConfig, count: usize, seed: u64) -> Result<Vec<SwarmState>> {
    (0..count as u64)
        .into_par_iter()
        .map(|j| sample_initial_conditions(cfg, derive_seed(seed, &[j])))
        .collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Trains every architecture once per realization on the base
/// configuration and evaluates the stored checkpoint, without retraining,
/// on every scan point (team size, initial velocity or radius).
///
/// A checkpoint already present in the output directory is reused.
pub fn run_transfer(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let scan = if spec.scan.is_empty() {
        ExperimentSpec::default_scan(spec.id)
    } else {
        spec.scan.clone()
    };
    let configs: Vec<FlockingConfig> = scan
        .iter()
        .map(|&v| scanned_config(spec.id, &spec.flocking, v))
        .collect::<Result<_>>()?;
    let cells: Vec<(ArchKind, usize, usize)> = spec
        .architectures
        .iter()
        .flat_map(|&a| spec.grid.iter().map(move |&(g, k)| (a, g, k)))
        .collect();
    let workers = pool(spec.jobs)?;
    let mut per_point: Vec<Vec<Vec<Option<f64>>>> = vec![vec![Vec::new(); scan.len()]; cells.len()];
    let mut wall = vec![0.0; cells.len()];
    let mut details = Vec::new();
    for r in 0..spec.realizations {
        let needs_training = cells
            .iter()
            .any(|&(kind, g, k)| !spec.cell_dir(kind, g, k, r).join("best.ckpt").exists());
        let dataset = if needs_training {
            Some(load_or_generate_dataset(
                &spec.out_dir.join("datasets"),
                &spec.flocking,
                spec.counts,
                spec.dataset_seed(r),
            )?)
        } else {
            None
        };
        let tests: Vec<Vec<SwarmState>> = configs
            .iter()
            .enumerate()
            .map(|(p, cfg)| {
                sample_test_states(
                    cfg,
                    spec.counts.test,
                    derive_seed(spec.seed, &[0x7e57, r as u64, p as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let results: Vec<Result<(Vec<Option<f64>>, f64, serde_json::Value)>> = workers.install(|| {
            cells
                .par_iter()
                .map(|&(kind, g, k)| {
                    let started = Instant::now();
                    let dir = spec.cell_dir(kind, g, k, r);
                    let ckpt = dir.join("best.ckpt");
                    if !ckpt.exists() {
                        let data = dataset.as_ref().expect("dataset loaded when training is needed");
                        let hyper = ArchHyper::flocking(kind, g, k);
                        train_and_evaluate(data, &hyper, &spec.train_config(kind, g, k, r), &dir)?;
                    }
                    let digest = file_digest(&ckpt)?;
                    let mut points = Vec::with_capacity(configs.len());
                    let mut evals = Vec::with_capacity(configs.len());
                    for (cfg, inits) in configs.iter().zip(&tests) {
                        // always evaluate the stored bytes
                        let params = io::load_checkpoint(&ckpt)?;
                        let eval = evaluate_policy(&params, inits, cfg);
                        points.push(Some(eval.mean).filter(|m| m.is_finite()));
                        evals.push(eval);
                    }
                    if file_digest(&ckpt)? != digest {
                        return Err(Error::Format(format!("{} changed during evaluation", ckpt.display())));
                    }
                    let detail = serde_json::json!({
                        "architecture": kind,
                        "G": g,
                        "K": k,
                        "realization": r,
                        "checkpoint": ckpt,
                        "checkpoint_sha256": digest,
                        "scan": scan,
                        "evaluations": evals,
                    });
                    Ok((points, started.elapsed().as_secs_f64(), detail))
                })
                .collect()
        });
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok((points, secs, detail)) => {
                    for (p, v) in points.into_iter().enumerate() {
                        per_point[i][p].push(v);
                    }
                    wall[i] += secs;
                    details.push(detail);
                }
                Err(e) => {
                    let (kind, g, k) = cells[i];
                    eprintln!("cell {kind} G={g} K={k} realization {r} failed: {e}");
                    for p in 0..scan.len() {
                        per_point[i][p].push(None);
                    }
                }
            }
        }
    }
    let mut records = Vec::new();
    for (i, &(kind, g, k)) in cells.iter().enumerate() {
        for (p, &value) in scan.iter().enumerate() {
            records.push(aggregate(spec.id, kind, g, k, Some(value), &per_point[i][p], wall[i]));
        }
    }
    write_reports(spec, &records, &details)?;
    Ok(records)
}

pub fn records_to_csv(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_COLUMNS)?;
    for r in records {
        w.write_record([
            RESULTS_SCHEMA_VERSION.to_string(),
            r.experiment_id.to_string(),
            r.architecture.to_string(),
            r.g.to_string(),
            r.k.to_string(),
            r.scan_value.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:?}", r.mean_normalized_cost),
            format!("{:?}", r.std),
            r.realizations.to_string(),
            r.failures.to_string(),
            format!("{:.3}", r.wall_time),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf8"))
}

fn write_reports<T: Serialize>(spec: &ExperimentSpec, records: &[ResultRecord], details: &[T]) -> Result<()> {
    let csv = records_to_csv(records)?;
    write_atomic(&spec.out_dir.join("results.csv"), |w| Ok(w.write_all(csv.as_bytes())?))?;
    let summary = serde_json::json!({
        "schema_version": RESULTS_SCHEMA_VERSION,
        "spec": spec,
        "records": records,
        "best": best_per_architecture(records),
        "cells": details,
    });
    write_json(&spec.out_dir.join("summary.json"), &summary)
}
