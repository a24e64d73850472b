use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reflow_core::solvers::{Method, ScheduleKind};
use reflow_lab::config::{ExperimentConfig, SolverSpec};
use reflow_lab::pipelines::{self, Env, OUTPUT_ROOT_VAR, THREADS_VAR};
use reflow_lab::Result;

#[derive(Parser)]
#[command(
    name = "reflow",
    version,
    about = "Train, reflow, sample and evaluate rectified-flow models"
)]
struct Cli {
    /// Root for run directories without an explicit `output_dir`.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR)]
    output_root: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = THREADS_VAR)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model on the configured coupling.
    Train { config: PathBuf },
    /// Train or load a teacher, then run the configured reflow rounds.
    Reflow {
        config: PathBuf,
        /// Start from this checkpoint instead of training a teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Draw samples and trajectories from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// One run per value of a config field, compared in one table.
    Ablate {
        config: PathBuf,
        /// Dotted field path, e.g. `train.weight` or `eval.solvers[0].steps`.
        #[arg(long)]
        axis: String,
        /// A TOML value; bare words are read as strings.
        #[arg(long = "value", required = true)]
        values: Vec<String>,
    },
    /// Evaluate a checkpoint under the config's eval section.
    Metrics {
        config: PathBuf,
        checkpoint: PathBuf,
    },
    /// Project a stored coupling onto the data marginal.
    ProjectPairs { config: PathBuf, pairs: PathBuf },
    /// Entropic OT between data and noise, with plan diagnostics.
    SinkhornDemo {
        config: PathBuf,
        #[arg(short, default_value_t = 256)]
        b: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Euler,
    Heun,
    Dpm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Uniform,
    Sigmoid,
    Edm,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "heun")]
    method: MethodArg,
    /// Intermediate-time exponent for `dpm`.
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = 20.0)]
    kappa: f64,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Replace the last step with an Euler step.
    #[arg(long)]
    final_euler: bool,
}

impl SolverArgs {
    fn spec(&self) -> SolverSpec {
        SolverSpec {
            method: match self.method {
                MethodArg::Euler => Method::Euler,
                MethodArg::Heun => Method::Heun,
                MethodArg::Dpm => Method::Dpm { r: self.r },
            },
            schedule: match self.schedule {
                ScheduleArg::Uniform => ScheduleKind::Uniform,
                ScheduleArg::Sigmoid => ScheduleKind::Sigmoid { kappa: self.kappa },
                ScheduleArg::Edm => ScheduleKind::edm_default(),
            },
            steps: self.steps,
            final_euler: self.final_euler,
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    let mut env = Env::default();
    if let Some(root) = cli.output_root {
        env.output_root = root;
    }
    env.threads = cli.threads;
    let out = match cli.cmd {
        Cmd::Train { config } => pipelines::run_train(&ExperimentConfig::load(&config)?, &env)?,
        Cmd::Reflow { config, teacher } => {
            pipelines::run_reflow(&ExperimentConfig::load(&config)?, teacher.as_deref(), &env)?
        }
        Cmd::Sample {
            checkpoint,
            n,
            seed,
            out,
            solver,
        } => pipelines::run_sample(&checkpoint, &solver.spec(), n, seed, &out, &env)?,
        Cmd::Ablate {
            config,
            axis,
            values,
        } => pipelines::run_ablation(&ExperimentConfig::load(&config)?, &axis, &values, &env)?,
        Cmd::Metrics { config, checkpoint } => {
            pipelines::run_metrics(&ExperimentConfig::load(&config)?, &checkpoint, &env)?
        }
        Cmd::ProjectPairs { config, pairs } => {
            pipelines::run_project_pairs(&ExperimentConfig::load(&config)?, &pairs, &env)?
        }
        Cmd::SinkhornDemo { config, b } => {
            pipelines::run_sinkhorn_demo(&ExperimentConfig::load(&config)?, b, &env)?
        }
    };
    Ok(out.dir)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
