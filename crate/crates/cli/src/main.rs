//! `abstain`: training, evaluation and verification runs for score-based
//! abstention.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 training failure,
//! 4 inconclusive (oracle non-convergence), 5 bound violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Training(String),
    Inconclusive(String),
    Violation(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Training(_) => 3,
            Failure::Inconclusive(_) => 4,
            Failure::Violation(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::Training(m)
            | Failure::Inconclusive(m)
            | Failure::Violation(m) => m,
        }
    }
}

impl From<abstention::Error> for Failure {
    fn from(e: abstention::Error) -> Self {
        match e {
            abstention::Error::NonFinite { .. } => Failure::Training(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "abstain", version, about = "Multi-class classification with abstention")]
pub struct Cli {
    /// Worker threads for sweeps and harnesses [default: available parallelism]
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a single-stage scorer or a two-stage predictor/rejector pair
    Train(TrainArgs),
    /// Evaluate saved models on a labeled CSV
    Eval(EvalArgs),
    /// Randomized checks of the consistency bounds
    Verify(VerifyArgs),
    /// Minimizability-gap sweeps and the bounded-margin demonstration
    Gaps(GapsArgs),
    /// Two-stage training on certified-margin separable data
    Realizable(RealizableArgs),
    /// Coverage of the finite-sample bound over repeated samples
    FiniteSample(FiniteSampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiArg {
    Exp,
    Logistic,
}

impl From<PhiArg> for abstention::losses::MarginFunction {
    fn from(p: PhiArg) -> Self {
        match p {
            PhiArg::Exp => Self::Exponential,
            PhiArg::Logistic => Self::Logistic,
        }
    }
}

/// Named members of the comp-sum family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    /// Uses --mu
    CompSum,
    /// Sum-exponential, mu = 0
    SumExp,
    /// Cross-entropy, mu = 1
    Ce,
    /// Generalized cross-entropy, uses --mu in (1, 2)
    Gce,
    /// Mean absolute error, mu = 2
    Mae,
}

/// Model and optimizer flags shared by training commands.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainerArgs {
    /// Model family
    #[arg(long, value_enum, default_value_t = ModelArg::Linear)]
    pub model: ModelArg,
    /// Hidden width for --model mlp
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Clamp scores to [-clamp, clamp] [default: none]
    #[arg(long)]
    pub clamp: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    /// Heavy-ball momentum (SGD only)
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// L2 penalty on all parameters
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
    pub schedule: ScheduleArg,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training CSV with a header row; required [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Label column name
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Loss family member for single-stage training [default: comp-sum]
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Comp-sum parameter for single-stage training [default: 1]
    #[arg(long, conflicts_with = "two_stage")]
    pub mu: Option<f64>,
    /// Train a predictor, then a rejector on the second-stage loss [default: off]
    #[arg(long, default_value_t = false)]
    pub two_stage: bool,
    /// Margin function of the second stage
    #[arg(long, value_enum, default_value_t = PhiArg::Exp)]
    pub phi: PhiArg,
    /// Comp-sum parameter of the first stage
    #[arg(long, default_value_t = 1.0)]
    pub stage1_mu: f64,
    /// Abstention cost in (0, 1). A value near the best-in-class zero-one
    /// error of the task is a reasonable starting point.
    #[arg(long, default_value_t = 0.2)]
    pub cost: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub trainer: TrainerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file (flags override it) [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Model files; two-stage predictors pair with --rejector in order;
    /// required [default: none]
    #[arg(long, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Rejector files for two-stage evaluation [default: none]
    #[arg(long, num_args = 1..)]
    pub rejector: Vec<PathBuf>,
    /// Evaluation CSV with a header row; required [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Abstention cost [default: taken from the first model]
    #[arg(long)]
    pub cost: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckArg {
    /// Abstention loss against L_mu with Gamma_mu
    CompSum,
    /// Abstention loss against a generic base loss through the transformed Gamma
    Transformed,
    /// Abstention loss against the two-stage surrogate
    TwoStage,
    /// Empirical calibration functions dominated by Gamma_mu
    Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseArg {
    DoubledLogistic,
    MeanAbsolute,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Which bound to check
    #[arg(long, value_enum, default_value_t = CheckArg::CompSum)]
    pub check: CheckArg,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,3")]
    pub mu: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.9")]
    pub cost: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
    pub n: Vec<usize>,
    /// Margin functions for the two-stage check
    #[arg(long, value_enum, value_delimiter = ',', default_value = "exp,logistic")]
    pub phi: Vec<PhiArg>,
    /// Base losses for the transformed check
    #[arg(long, value_enum, value_delimiter = ',', default_value = "doubled-logistic,mean-absolute")]
    pub base: Vec<BaseArg>,
    /// Random trials per cell
    #[arg(long, default_value_t = 10000)]
    pub trials: usize,
    /// Random problems per cell
    #[arg(long, default_value_t = 10)]
    pub problems: usize,
    /// Atoms per random problem
    #[arg(long, default_value_t = 5)]
    pub atoms: usize,
    /// Self-test: weaken the bound constant so violations must appear [default: off]
    #[arg(long, default_value_t = false)]
    pub mutate: bool,
    /// Largest tolerated fraction of non-converged oracle calls
    #[arg(long, default_value_t = 0.01)]
    pub max_nonconverged: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoArg {
    /// Bounded exponential margin: best bounded minus best unbounded risk
    BoundedMargin,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GapsArgs {
    /// Grid start:stop:step (inclusive)
    #[arg(long, default_value = "0:4:0.1")]
    pub mu_grid: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub cost: Vec<f64>,
    /// Tolerance between closed form and numeric oracle
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Run a demonstration instead of the sweep [default: none]
    #[arg(long, value_enum)]
    pub demo: Option<DemoArg>,
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RealizableArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Margin of the generating separator
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    pub cost: Vec<f64>,
    #[arg(long, default_value_t = 60)]
    pub atoms: usize,
    /// Training sample size
    #[arg(long, default_value_t = 600)]
    pub m: usize,
    #[arg(long, value_enum, default_value_t = PhiArg::Exp)]
    pub phi: PhiArg,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Largest accepted abstention loss
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeArg {
    #[value(name = "separable_margin")]
    SeparableMargin,
    #[value(name = "label_noise")]
    LabelNoise,
    #[value(name = "chow_stress")]
    ChowStress,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FiniteSampleArgs {
    /// Synthetic recipe (ignored with --problem)
    #[arg(long, value_enum, default_value_t = RecipeArg::LabelNoise)]
    pub recipe: RecipeArg,
    /// Problem spec file with features [default: none]
    #[arg(long)]
    pub problem: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub atoms: usize,
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.3)]
    pub cost: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Sample size per trial
    #[arg(long, default_value_t = 500)]
    pub m: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Repeated samples (at least 20)
    #[arg(long, default_value_t = 40)]
    pub trials: usize,
    /// Score clamp; required [default: none]
    #[arg(long)]
    pub clamp: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub sigma_draws: usize,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Ascent step size for the Rademacher suprema
    #[arg(long, default_value_t = 0.05)]
    pub ascent_lr: f64,
    #[arg(long, default_value_t = 20)]
    pub reference_runs: usize,
    #[arg(long, default_value_t = 500)]
    pub reference_epochs: usize,
    /// ERM training epochs per trial
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run() -> Result<(), Failure> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Err(Failure::Config(String::new()))
            } else {
                Ok(())
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Config(e.to_string()))?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Config("--workers must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand required");
    match cli.command {
        Command::Train(a) => {
            let file = a.config.clone();
            commands::train(config::overlay(a, sub, file.as_deref())?)
        }
        Command::Eval(a) => {
            let file = a.config.clone();
            commands::eval(config::overlay(a, sub, file.as_deref())?)
        }
        Command::Verify(a) => {
            let file = a.config.clone();
            commands::verify(config::overlay(a, sub, file.as_deref())?)
        }
        Command::Gaps(a) => {
            let file = a.config.clone();
            commands::gaps(config::overlay(a, sub, file.as_deref())?)
        }
        Command::Realizable(a) => {
            let file = a.config.clone();
            commands::realizable(config::overlay(a, sub, file.as_deref())?)
        }
        Command::FiniteSample(a) => {
            let file = a.config.clone();
            commands::finite_sample(config::overlay(a, sub, file.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message().is_empty() {
                eprintln!("error: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}
