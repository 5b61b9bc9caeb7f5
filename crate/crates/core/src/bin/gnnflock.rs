use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gnnflock::config::KvConfig;
use gnnflock::harness::{
    self, evaluate_policy, initial_states, load_or_generate_dataset, sample_test_states, write_json, ExperimentId,
    ExperimentSpec, SplitCounts,
};
use gnnflock::io;
use gnnflock::{invariants, ArchHyper, ArchKind};

#[derive(Parser)]
#[command(
    name = "gnnflock",
    version,
    about = "Train and evaluate graph neural network flocking controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache an expert dataset.
    Dataset(Common),
    /// Train one architecture on one dataset.
    Train(Common),
    /// Evaluate a checkpoint against the expert.
    Eval(Common),
    /// Train and evaluate an architecture x (G, K) grid.
    Sweep(Common),
    /// Evaluate trained controllers on other team sizes, velocities or radii.
    Transfer(Common),
    /// Run randomized invariant checks.
    Proptest(Common),
}

/// Every flag mirrors a `key=value` entry of the config file and
/// overrides it.
#[derive(Args, Default)]
struct Common {
    /// key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    sampling_time: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    comm_radius: Option<f64>,
    #[arg(long)]
    ca_radius: Option<f64>,
    #[arg(long)]
    max_accel: Option<f64>,
    #[arg(long)]
    init_velocity_max: Option<f64>,
    #[arg(long)]
    bias_max: Option<f64>,
    #[arg(long)]
    min_init_distance: Option<f64>,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    max_loss: Option<f64>,
    /// Seconds of training per cell before giving up.
    #[arg(long)]
    wall_budget: Option<f64>,

    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    validation_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,

    /// GF, GCNN or GRNN (comma-separated for sweeps).
    #[arg(long)]
    arch: Option<String>,
    /// Hidden features G (comma-separated for sweeps).
    #[arg(long)]
    hidden: Option<String>,
    /// Filter order K (comma-separated for sweeps).
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// sweep, reproduce_table1, transfer_scale, init_velocity or comm_radius.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated scan values.
    #[arg(long)]
    scan: Option<String>,
    /// Dataset file for `train`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint file for `eval`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Random instances per invariant.
    #[arg(long)]
    cases: Option<usize>,
}

impl Common {
    fn settings(&self) -> anyhow::Result<KvConfig> {
        let mut kv = match &self.config {
            Some(path) => KvConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => KvConfig::default(),
        };
        let mut flags = KvConfig::default();
        macro_rules! flag {
            ($($name:ident),*) => {
                $(if let Some(v) = &self.$name {
                    flags.set(stringify!($name), v);
                })*
            };
        }
        flag!(
            seed,
            agents,
            sampling_time,
            duration,
            comm_radius,
            ca_radius,
            max_accel,
            init_velocity_max,
            bias_max,
            min_init_distance,
            epochs,
            batch_size,
            lr,
            beta1,
            beta2,
            eps,
            validate_every,
            max_loss,
            wall_budget,
            train_count,
            validation_count,
            test_count,
            arch,
            hidden,
            k,
            realizations,
            jobs,
            experiment,
            scan,
            cases
        );
        for (key, path) in [
            ("out", &self.out),
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = path {
                flags.set(key, p.display());
            }
        }
        kv.merge(&flags);
        Ok(kv)
    }
}

struct Settings {
    kv: KvConfig,
}

impl Settings {
    fn out(&self) -> PathBuf {
        PathBuf::from(self.kv.raw("out").unwrap_or("runs"))
    }

    fn seed(&self) -> anyhow::Result<u64> {
        Ok(self.kv.get_or("seed", 0)?)
    }

    fn counts(&self) -> anyhow::Result<SplitCounts> {
        let d = SplitCounts::default();
        Ok(SplitCounts {
            train: self.kv.get_or("train_count", d.train)?,
            validation: self.kv.get_or("validation_count", d.validation)?,
            test: self.kv.get_or("test_count", d.test)?,
        })
    }

    fn archs(&self) -> anyhow::Result<Vec<ArchKind>> {
        Ok(self.kv.list("arch")?.unwrap_or_else(|| ArchKind::ALL.to_vec()))
    }

    fn grid(&self, default_g: &[usize], default_k: &[usize]) -> anyhow::Result<Vec<(usize, usize)>> {
        let gs = self.kv.list("hidden")?.unwrap_or_else(|| default_g.to_vec());
        let ks = self.kv.list("k")?.unwrap_or_else(|| default_k.to_vec());
        Ok(gs.iter().flat_map(|&g| ks.iter().map(move |&k| (g, k))).collect())
    }

    fn single_hyper(&self) -> anyhow::Result<ArchHyper> {
        let archs = self.archs()?;
        let grid = self.grid(&[32], &[3])?;
        if self.kv.raw("arch").is_none() || archs.len() != 1 || grid.len() != 1 {
            bail!("expected exactly one --arch, --hidden and --k");
        }
        let (g, k) = grid[0];
        Ok(ArchHyper::flocking(archs[0], g, k))
    }

    fn spec(&self, default_id: ExperimentId) -> anyhow::Result<ExperimentSpec> {
        let id: ExperimentId = self.kv.get_or("experiment", default_id)?;
        let base = ExperimentSpec::table1(self.out());
        Ok(ExperimentSpec {
            id,
            architectures: self.archs()?,
            grid: self.grid(&[16, 32, 64], &[2, 3, 4])?,
            scan: self
                .kv
                .list("scan")?
                .unwrap_or_else(|| ExperimentSpec::default_scan(id)),
            realizations: self.kv.get_or("realizations", base.realizations)?,
            flocking: self.kv.flocking()?,
            train: self.kv.train()?,
            counts: self.counts()?,
            seed: self.seed()?,
            out_dir: self.out(),
            jobs: self.kv.get_or("jobs", 1)?,
        })
    }
}

fn dataset_for(settings: &Settings) -> anyhow::Result<gnnflock::Dataset> {
    match settings.kv.raw("dataset") {
        Some(path) => Ok(io::load_dataset(Path::new(path))?),
        None => Ok(load_or_generate_dataset(
            &settings.out().join("datasets"),
            &settings.kv.flocking()?,
            settings.counts()?,
            settings.seed()?,
        )?),
    }
}

fn run(command: Command) -> anyhow::Result<bool> {
    let (common, name) = match &command {
        Command::Dataset(c) => (c, "dataset"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Sweep(c) => (c, "sweep"),
        Command::Transfer(c) => (c, "transfer"),
        Command::Proptest(c) => (c, "proptest"),
    };
    let settings = Settings { kv: common.settings()? };
    let out = settings.out();
    match name {
        "dataset" => {
            let data = dataset_for(&settings)?;
            let path = out.join("dataset.bin");
            io::save_dataset(&path, &data)?;
            let sample = io::trajectory_to_csv(&data.train[0]);
            io::write_atomic(&out.join("trajectory_0.csv"), |w| Ok(w.write_all(sample.as_bytes())?))?;
            println!(
                "{} train / {} validation / {} test trajectories -> {}",
                data.train.len(),
                data.validation.len(),
                data.test.len(),
                path.display()
            );
        }
        "train" => {
            let hyper = settings.single_hyper()?;
            let cfg = settings.kv.train()?;
            let data = dataset_for(&settings)?;
            let (_, cell) = harness::train_and_evaluate(&data, &hyper, &cfg, &out)?;
            if let Some(err) = &cell.error {
                eprintln!("training stopped early: {err}");
            }
            let eval = cell.eval.as_ref().expect("evaluated");
            println!(
                "{} G={} K={}: best step {}, test normalized cost {:.4} +- {:.4} ({} failures)",
                hyper.kind, hyper.hidden, hyper.k, cell.best_step, eval.mean, eval.std, eval.failures
            );
        }
        "eval" => {
            let Some(ckpt) = settings.kv.raw("checkpoint") else {
                bail!("--checkpoint is required");
            };
            let params = io::load_checkpoint(Path::new(ckpt))?;
            let flocking = settings.kv.flocking()?;
            let inits = if settings.kv.raw("dataset").is_some() {
                initial_states(&dataset_for(&settings)?.test)
            } else {
                sample_test_states(&flocking, settings.counts()?.test, settings.seed()?)?
            };
            let eval = evaluate_policy(&params, &inits, &flocking);
            write_json(&out.join("eval.json"), &eval)?;
            println!(
                "normalized cost {:.4} +- {:.4} over {} runs ({} failures), terminal cost {:.4}",
                eval.mean,
                eval.std,
                eval.ratios.len(),
                eval.failures,
                eval.terminal_cost
            );
        }
        "sweep" => {
            let records = harness::run_sweep(&settings.spec(ExperimentId::Sweep)?)?;
            print!("{}", harness::records_to_csv(&records)?);
        }
        "transfer" => {
            let records = harness::run_transfer(&settings.spec(ExperimentId::TransferScale)?)?;
            print!("{}", harness::records_to_csv(&records)?);
        }
        "proptest" => {
            let reports = invariants::run_all(settings.kv.get_or("cases", 32)?, settings.seed()?)?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{} {:<42} cases={:<4} max_error={:.3e} tol={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.cases,
                    r.max_error,
                    r.tolerance
                );
                ok &= r.passed;
            }
            return Ok(ok);
        }
        _ => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
