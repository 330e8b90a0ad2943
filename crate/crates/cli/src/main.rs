mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dtr::evaluation::Estimator;

/// Failure with its process exit code: 2 configuration, 3 data, 4 fitting.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<dtr::Error> for CliError {
    fn from(e: dtr::Error) -> Self {
        use dtr::Error::*;
        let code = match &e {
            Config(_) | Range(_) | Syntax { .. } | Unsupported(_) | Format(_) => 2,
            Schema(_) | Value(_) | Domain(_) | Structure(_) | Key(_) | Alignment(_) | Io(_) => 3,
            Fit(_) | Positivity(_) => 4,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "dtr", version, about = "Evaluate and learn sequential decision policies")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Single,
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ipw,
    Or,
    Dr,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Ipw => Estimator::Ipw,
            EstimatorArg::Or => Estimator::Or,
            EstimatorArg::Dr => Estimator::Dr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a data set from a built-in simulation model and write it as CSV.
    Simulate {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Parameters as `key=value` pairs separated by commas.
        #[arg(long)]
        par: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the wide-layout schema of the generated columns.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Estimate the value of a policy or of a learning procedure.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorArg>,
        /// Influence values per id as CSV.
        #[arg(long)]
        ic_out: Option<PathBuf>,
    },
    /// Fit a policy learner and write the learned policy.
    Learn {
        #[command(flatten)]
        run: RunArgs,
        /// Cross-fitting folds inside the learner.
        #[arg(long)]
        learner_folds: Option<usize>,
        /// Also estimate the cross-fitted value of the learner.
        #[arg(long)]
        value_out: Option<PathBuf>,
    },
    /// Apply a policy to data and write the recommended actions.
    Apply {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-fitting folds for evaluation.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { model, n, seed, par, out, schema_out } => {
            commands::simulate(matches!(model, Model::Two), n, seed, par.as_deref(), out, schema_out)
        }
        Command::Evaluate { run, estimator, ic_out } => {
            let mut cfg = load(&run)?;
            if let Some(e) = estimator {
                cfg.run.estimator = e.into();
            }
            if ic_out.is_some() {
                cfg.run.output.ic = ic_out;
            }
            if run.out.is_some() {
                cfg.run.output.result = run.out;
            }
            commands::evaluate(&cfg)
        }
        Command::Learn { run, learner_folds, value_out } => {
            let mut cfg = load(&run)?;
            if let Some(l) = learner_folds {
                let spec = cfg.run.learner.as_mut().ok_or_else(|| config::config_error("/learner", "missing"))?;
                spec.folds = l;
            }
            if value_out.is_some() {
                cfg.run.output.value = value_out;
            }
            if run.out.is_some() {
                cfg.run.output.policy = run.out;
            }
            commands::learn(&cfg)
        }
        Command::Apply { run, policy } => {
            let mut cfg = load(&run)?;
            if let Some(p) = policy {
                cfg.run.policy = None;
                cfg.run.policy_file = Some(p);
            }
            if run.out.is_some() {
                cfg.run.output.actions = run.out;
            }
            commands::apply(&cfg)
        }
    }
}

fn load(args: &RunArgs) -> Result<config::Loaded, CliError> {
    let mut cfg = config::Loaded::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(f) = args.folds {
        if f == 0 {
            return Err(CliError::config("--folds: at least one fold is needed"));
        }
        cfg.run.folds = f;
    }
    if let Some(a) = args.alpha {
        if !(0.0..0.5).contains(&a) {
            return Err(CliError::config(format!("--alpha: must lie in [0, 0.5), got {a}")));
        }
        cfg.run.alpha = Some(a);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
