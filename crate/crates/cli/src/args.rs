use std::path::PathBuf;

use addsub_core::dataset::DEFAULT_REFINEMENT;
use addsub_core::gof::DEFAULT_DRAWS;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "addsub", version, about = "Additive subdistribution hazards for clustered competing risks")]
pub struct Cli {
    /// Record wall-clock time in the run manifest (breaks byte-identical reruns).
    #[arg(long, global = true)]
    pub record_timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and report coefficients, robust SEs and the baseline.
    Fit(FitArgs),
    /// Goodness-of-fit tests based on cumulative residual processes.
    Gof(GofArgs),
    /// Simulate a clustered competing-risks dataset.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo replication study.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ipcw,
    Cc,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum VarianceArg {
    Cluster,
    Individual,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Delimited input file with a header row.
    pub input: PathBuf,
    #[arg(long, default_value = "cluster")]
    pub cluster_var: String,
    #[arg(long, default_value = "time")]
    pub time_var: String,
    #[arg(long, default_value = "status")]
    pub status_var: String,
    /// Censoring-time column, used when present.
    #[arg(long, default_value = "ctime")]
    pub ctime_var: String,
    /// Comma-separated covariate columns; default is every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Covariates entered as `x * exp(-t)`.
    #[arg(long, value_delimiter = ',')]
    pub time_varying: Vec<String>,
    #[arg(long)]
    pub n_causes: Option<u8>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Cause of interest.
    #[arg(long, default_value_t = 1)]
    pub cause: u8,
    #[arg(long, value_enum, default_value_t = ModeArg::Ipcw)]
    pub mode: ModeArg,
    /// Analysis horizon; defaults to the largest uncensored time.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Trapezoid panels per knot interval for time-varying covariates.
    #[arg(long, default_value_t = DEFAULT_REFINEMENT)]
    pub quadrature: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = VarianceArg::Cluster)]
    pub variance: VarianceArg,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TestArg {
    Additivity,
    FunctionalForm,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GofArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = TestArg::Additivity)]
    pub test: TestArg,
    /// Covariate name, 1-based position, or `all`.
    #[arg(long, default_value = "all")]
    pub covariate: String,
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving one CSV trace per test process.
    #[arg(long)]
    pub export_processes: Option<PathBuf>,
    /// Perturbed draws written to each exported trace.
    #[arg(long, default_value_t = 50)]
    pub plot_draws: usize,
    /// Report (1 + exceedances) / (B + 1).
    #[arg(long)]
    pub pvalue_add_one: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    M1,
    M2,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CovariatesArg {
    /// One covariate, U(0, 1).
    Uniform,
    /// N(0, 1) and Bernoulli(0.5).
    NormalBernoulli,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Clamp,
    Reject,
}

/// Every flag overrides the matching field of `--config` (or the built-in
/// defaults: M1, n = 100, m = 10, rho = 0.5, theta = 0.7, beta1 = 1,
/// beta2 = 0.2, gamma = 0.35).
#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON simulation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Number of clusters.
    #[arg(long)]
    pub n: Option<usize>,
    /// Cluster size.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta1: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta2: Option<Vec<f64>>,
    /// Exponential censoring rate.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub covariates: Option<CovariatesArg>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write ctime, true_time, true_cause and frailty.
    #[arg(long)]
    pub truth: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum StudyArg {
    Table1,
    Table2,
    Table3,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplicateArgs {
    #[arg(long, value_enum)]
    pub study: StudyArg,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "ADDSUB_PARALLEL")]
    #[serde(skip)]
    pub parallel: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Perturbation draws per replicate (table3).
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    /// Restrict to cells with this number of clusters.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Censoring percentage: 20, 40 or 60.
    #[arg(long)]
    pub censoring: Option<u32>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub quadrature: Option<usize>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
