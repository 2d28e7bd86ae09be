use std::path::PathBuf;

use clap::{Arg, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand};
use tron_core::config::KEYS;

pub const DATA_DIR_ENV: &str = "TRON_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "tron",
    version,
    about = "Session-based recommendation with optimized negative sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Parse a click log, filter it and cache the train/test split.
    Prep(PrepArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Rank the full catalog for every test transition with a checkpoint.
    Eval(EvalArgs),
    /// Measure negative-sampling throughput per granularity.
    Bench(BenchArgs),
    /// Write the per-epoch metrics of a training run as CSV.
    Export(ExportArgs),
}

/// Settings shared by every verb. Each configuration key is also accepted as
/// `--<key> VALUE` (for example `--negs.uniform.count 8192`).
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// TOML configuration file; command-line settings take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Named experiment settings, applied before every other key.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Loss: bce, bpr-max or ssm.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long = "eval.k", value_name = "K")]
    pub eval_k: Option<usize>,
    #[arg(long)]
    pub min_support: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub holdout_days: Option<f64>,
    /// Any configuration key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Raw input: session JSON lines (.jsonl) or session_id,item_id,timestamp CSV.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Input format (jsonl or csv); guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// Skip malformed records instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Where the prepared dataset is written.
    #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
    pub output_dir: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoints, report and metrics [default: runs/<preset>].
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Continue from a checkpoint of an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Prepared dataset directory.
    #[arg(long, env = DATA_DIR_ENV, value_name = "DIR")]
    pub data: PathBuf,
    /// Where eval.json is written [default: the checkpoint's directory].
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Negatives per position, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "8192")]
    pub negs: Vec<usize>,
    /// Granularities to compare, comma-separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "batchwise,sessionwise,elementwise"
    )]
    pub granularity: Vec<String>,
    /// Catalog size to sample from.
    #[arg(long, default_value_t = 43_000)]
    pub items: usize,
    /// Minimum measuring time per row, in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub min_seconds: f64,
    /// Also write bench.csv here.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Destination [default: <run>/metrics.csv].
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Keys that have a dedicated flag above.
const DEDICATED: &[&str] = &["preset", "seed", "epochs", "loss", "eval.k"];

const VERBS: &[&str] = &["prep", "train", "eval", "bench", "export"];

pub fn command() -> Command {
    let mut cmd = Cli::command();
    for verb in VERBS {
        cmd = cmd.mut_subcommand(*verb, |mut sub| {
            for (key, help) in KEYS.iter().filter(|(k, _)| !DEDICATED.contains(k)) {
                sub = sub.arg(
                    Arg::new(*key)
                        .long(*key)
                        .value_name("VALUE")
                        .help(*help)
                        .help_heading("Configuration keys"),
                );
            }
            sub
        });
    }
    cmd
}

/// Parsed command line plus the `--<key>` overrides in command-line order.
pub struct Invocation {
    pub cli: Cli,
    pub key_overrides: Vec<(String, String)>,
}

pub fn parse(argv: impl IntoIterator<Item = String>) -> Result<Invocation, clap::Error> {
    let matches = command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let key_overrides = match matches.subcommand() {
        Some((_, sub)) => key_overrides(sub),
        None => Vec::new(),
    };
    Ok(Invocation { cli, key_overrides })
}

fn key_overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut found: Vec<(usize, String, String)> = Vec::new();
    for (key, _) in KEYS.iter().filter(|(k, _)| !DEDICATED.contains(k)) {
        if let (Some(values), Some(indices)) = (m.get_many::<String>(key), m.indices_of(key)) {
            for (v, i) in values.zip(indices) {
                found.push((i, key.to_string(), v.clone()));
            }
        }
    }
    found.sort_by_key(|(i, _, _)| *i);
    found.into_iter().map(|(_, k, v)| (k, v)).collect()
}
