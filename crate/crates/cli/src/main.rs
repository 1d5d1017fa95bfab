//! `psbayes`: fit one method to a CSV dataset, run a simulation preset, or
//! merge result documents into tables.
//!
//! Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical failure.

mod doc;
mod fit;
mod report;
mod simulate;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use psbayes_core::baselines::MethodTag;
use psbayes_core::{AcceptanceForm, Estimand, InvalidDesignRule, OmegaRule, StrataPriorKind};

#[derive(Debug, Parser)]
#[command(name = "psbayes", version, about = "Bayesian propensity-score subclassification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one estimator on a dataset (CSV with columns y, a, x1..xp).
    Fit(FitArgs),
    /// Run a named simulation preset.
    Simulate(SimulateArgs),
    /// Merge result documents into comparison tables and plot-ready CSV.
    Report(ReportArgs),
}

/// Sampler settings shared by `fit` and `simulate`.
#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    /// Reversible-jump acceptance ratio.
    #[arg(long, value_enum)]
    pub acceptance: Option<AcceptanceArg>,
    /// Handling of propensity draws that leave a stratum without treated or control units.
    #[arg(long, value_enum)]
    pub invalid_design: Option<InvalidDesignArg>,
    /// Learning rate: "calibrated", "frozen" or a fixed non-negative number.
    #[arg(long, value_parser = parse_omega)]
    pub omega: Option<OmegaRule>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// ipw, subclass-freq, subclass-select, gbayes-fixed, gbayes-rjmcmc or llb.
    #[arg(long)]
    pub method: MethodTag,
    #[arg(long, value_enum, default_value_t = EstimandArg::Ate)]
    pub estimand: EstimandArg,
    /// Number of strata for the fixed-K methods.
    #[arg(long)]
    pub k: Option<usize>,
    /// Largest K for selection and the reversible-jump sampler (default grows with n).
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub kmin: usize,
    #[arg(long, value_enum, default_value_t = PriorArg::Uniform)]
    pub prior: PriorArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bootstrap replicates for llb.
    #[arg(long, default_value_t = 2000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 10.0)]
    pub alpha_prior_sd: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub theta_prior_mean: f64,
    /// 0 gives a flat prior on each arm mean.
    #[arg(long, default_value_t = 1e-6)]
    pub theta_prior_precision: f64,
    #[arg(long, default_value_t = 50)]
    pub max_invalid: usize,
    /// Known propensity scores, one per line in data order; skips propensity estimation.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Write the chain trace (iteration, tau, k) as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// table1-n100, table1-n400, table1-n800 (each also with -desk), or clusterC.
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "PSBAYES_JOBS", default_value_t = 1)]
    pub jobs: usize,
    /// Run only these method labels (comma separated, e.g. ipw/estimated/-).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Metric table as CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Per-replication estimates as long CSV.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Posterior of K per replication as CSV.
    #[arg(long)]
    pub kpost: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Merged metric table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-replication estimates as long CSV.
    #[arg(long)]
    pub long: Option<PathBuf>,
    /// Chain trace of a single fit document as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Posterior of K as CSV.
    #[arg(long)]
    pub kpost: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimandArg {
    Ate,
    Att,
}

impl From<EstimandArg> for Estimand {
    fn from(e: EstimandArg) -> Self {
        match e {
            EstimandArg::Ate => Estimand::Ate,
            EstimandArg::Att => Estimand::Att,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorArg {
    Uniform,
    Linear,
}

impl From<PriorArg> for StrataPriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Uniform => StrataPriorKind::Uniform,
            PriorArg::Linear => StrataPriorKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AcceptanceArg {
    Evidence,
    DrawDensity,
}

impl From<AcceptanceArg> for AcceptanceForm {
    fn from(a: AcceptanceArg) -> Self {
        match a {
            AcceptanceArg::Evidence => AcceptanceForm::Evidence,
            AcceptanceArg::DrawDensity => AcceptanceForm::DrawDensity,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InvalidDesignArg {
    Reject,
    Resample,
}

impl From<InvalidDesignArg> for InvalidDesignRule {
    fn from(r: InvalidDesignArg) -> Self {
        match r {
            InvalidDesignArg::Reject => InvalidDesignRule::Reject,
            InvalidDesignArg::Resample => InvalidDesignRule::Resample,
        }
    }
}

fn parse_omega(s: &str) -> Result<OmegaRule, String> {
    match s {
        "calibrated" => Ok(OmegaRule::Calibrated),
        "frozen" => Ok(OmegaRule::FrozenAfterBurnIn),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|w| w.is_finite() && *w >= 0.0)
            .map(OmegaRule::Fixed)
            .ok_or_else(|| format!("expected calibrated, frozen or a non-negative number, got '{s}'")),
    }
}

impl SamplerArgs {
    pub fn apply(&self, run: &mut psbayes_core::RunConfig) {
        if let Some(a) = self.acceptance {
            run.acceptance = a.into();
        }
        if let Some(r) = self.invalid_design {
            run.invalid_design = r.into();
        }
        if let Some(w) = self.omega {
            run.omega = w;
        }
        if let Some(b) = self.burn_in {
            run.burn_in = b;
        }
        if let Some(d) = self.draws {
            run.n_draws = d;
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }

    pub fn write(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::usage(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<psbayes_core::Error> for CliError {
    fn from(e: psbayes_core::Error) -> Self {
        let code = if e.is_data_error() || matches!(e, psbayes_core::Error::Io(_)) {
            2
        } else if e.is_config_error() {
            1
        } else {
            3
        };
        CliError { code, message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(args) => fit::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::Report(args) => report::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psbayes: {e}");
            ExitCode::from(e.code)
        }
    }
}

/// Writes a document as pretty JSON to `path`, or stdout.
pub fn emit_document(doc: &doc::ResultDocument, path: Option<&std::path::Path>) -> Result<(), CliError> {
    doc.check_finite()?;
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| CliError::numerical(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::write(p, e)),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::usage(format!("stdout: {e}")))
        }
    }
}

pub fn tool_name() -> String {
    format!("psbayes {}", env!("CARGO_PKG_VERSION"))
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
