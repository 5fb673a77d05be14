mod bench;
mod check;
mod fixture;
mod mask;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use lion_core::{Form, LionError, ScalingMode, ZooConfig};

/// Environment variable that takes precedence over `--seed`.
const SEED_ENV: &str = "LION_SEED";

#[derive(Parser)]
#[command(
    name = "lion",
    version,
    about = "Bidirectional linear-attention forms: fixtures, checks, masks and sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded fixture (tokens, weights, projected inputs) as CSV plus a JSON manifest.
    Gen(GenArgs),
    /// Run every applicable form on one input and compare them pairwise.
    Check(CheckArgs),
    /// Sweep sequence lengths and chunk sizes, emitting memory and timing as CSV.
    Bench(BenchArgs),
    /// Dump a bidirectional decay mask as CSV.
    Mask(MaskArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Zoo configuration name.
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Fixture directory written by `gen`; otherwise inputs are generated from the flags below.
    #[arg(long, conflicts_with_all = ["config", "length", "dim", "seed"])]
    fixture: Option<PathBuf>,
    #[arg(long, default_value = "lion-s")]
    config: String,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Scaling mode (none, sum, max-one, sum-unmasked); defaults to the configuration's own.
    #[arg(long)]
    mode: Option<String>,
    /// Maximum relative error allowed between any two forms.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    /// Comma-separated subset of attention, rnn, chunk, parallel-chunk.
    #[arg(long, value_delimiter = ',')]
    forms: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "lion-s")]
    config: String,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    /// Comma-separated chunk sizes for the chunked forms.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    chunks: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated subset of attention, rnn, chunk, parallel-chunk.
    #[arg(long, value_delimiter = ',')]
    forms: Vec<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(skip)]
#[command(group(ArgGroup::new("decay").required(true).args(["fixed", "selective"])))]
struct MaskArgs {
    /// Constant decay λ in (0, 1].
    #[arg(long)]
    fixed: Option<f64>,
    /// CSV file of per-token log-decays ln λ (one value per line).
    #[arg(long)]
    selective: Option<PathBuf>,
    /// Sequence length; required with --fixed, must match the file with --selective.
    #[arg(long)]
    length: Option<usize>,
    /// Use the nested-loop reference instead of the builder.
    #[arg(long)]
    oracle: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A comparison exceeded its tolerance.
#[derive(Debug)]
struct ToleranceExceeded {
    worst: f64,
    tolerance: f64,
}

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "forms disagree: max relative error {:e} exceeds tolerance {:e}",
            self.worst, self.tolerance
        )
    }
}

impl std::error::Error for ToleranceExceeded {}

/// `LION_SEED` wins over the flag when set.
fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

fn parse_config(name: &str) -> Result<ZooConfig> {
    ZooConfig::from_name(name).with_context(|| {
        let known: Vec<_> = ZooConfig::ALL.iter().map(|c| c.name()).collect();
        format!(
            "unknown config {name:?}; expected one of {}",
            known.join(", ")
        )
    })
}

fn parse_mode(name: &str) -> Result<ScalingMode> {
    ScalingMode::from_name(name).with_context(|| {
        let known: Vec<_> = ScalingMode::ALL.iter().map(|m| m.name()).collect();
        format!(
            "unknown scaling mode {name:?}; expected one of {}",
            known.join(", ")
        )
    })
}

/// Empty means every form.
fn parse_forms(names: &[String]) -> Result<Vec<Form>> {
    if names.is_empty() {
        return Ok(Form::ALL.to_vec());
    }
    let mut forms = Vec::new();
    for name in names {
        let form = Form::from_name(name.trim()).with_context(|| {
            let known: Vec<_> = Form::ALL.iter().map(|f| f.name()).collect();
            format!(
                "unknown form {name:?}; expected one of {}",
                known.join(", ")
            )
        })?;
        if !forms.contains(&form) {
            forms.push(form);
        }
    }
    Ok(forms)
}

/// 2 for numerical failures (tolerance, stability, degenerate scaling), 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LionError>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
        if cause.is::<ToleranceExceeded>() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => fixture::cmd_gen(args),
        Command::Check(args) => check::cmd_check(args),
        Command::Bench(args) => bench::cmd_bench(args),
        Command::Mask(args) => mask::cmd_mask(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
