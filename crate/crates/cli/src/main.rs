//! Config-driven command line for the fair clustering engine.
//!
//! Every command reads one JSON config that fully describes the run;
//! the only flags are the config path and an optional seed override, so
//! a run is reproducible from its config alone. Log verbosity comes
//! from the `FAIRCLUST_LOG` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use fairclust::data::{load_csv, synth_blobs, write_csv, written_schema, SynthConfig};
use fairclust::trainer::{load_checkpoint, save_checkpoint, write_embeddings};
use fairclust::{
    cluster, evaluate_checkpoint, into_checkpoint, run_train, transfer_checkpoint, Error, Result,
    SchemaConfig, TrainConfig, TransferConfig, TransferResult, Variant,
};

#[derive(Parser)]
#[command(name = "fairclust", version, about = "fair deep clustering runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset with its schema file.
    Synth(RunArgs),
    /// Train a model and write a checkpoint.
    Train(RunArgs),
    /// Score a checkpoint's clustering on a dataset.
    Eval(RunArgs),
    /// Few-shot transfer against one or more stored encoders.
    Transfer(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config describing the run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSpec {
    synth: SynthConfig,
    csv: PathBuf,
    schema: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    dataset: PathBuf,
    schema: PathBuf,
    train: TrainConfig,
    #[serde(default)]
    variant: Variant,
    checkpoint: PathBuf,
    #[serde(default)]
    report: Option<PathBuf>,
    #[serde(default)]
    embeddings: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSpec {
    dataset: PathBuf,
    schema: PathBuf,
    checkpoint: PathBuf,
    #[serde(default)]
    report: Option<PathBuf>,
    #[serde(default)]
    report_text: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferSpec {
    dataset: PathBuf,
    schema: PathBuf,
    /// Named checkpoints; results are reported per name so two encoders
    /// can be compared side by side in one run.
    checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    transfer: TransferConfig,
    #[serde(default)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("FAIRCLUST_LOG", "warn"),
    )
    .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage or config, 2 data or artifact, 3 numerical abort.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => 1,
        Error::Io(_) | Error::Csv(_) | Error::Data(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite(_) => 3,
    }
}

/// Reads a command's config. Problems with the config file itself are
/// usage errors, not data errors.
fn load_spec<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Transfer(args) => cmd_transfer(&args),
    }
}

fn cmd_synth(args: &RunArgs) -> Result<()> {
    let mut spec: SynthSpec = load_spec(&args.config)?;
    if let Some(seed) = args.seed {
        spec.synth.seed = seed;
    }
    let ds = synth_blobs(&spec.synth)?;
    write_csv(&spec.csv, &ds)?;
    written_schema(spec.synth.mode, true).to_file(&spec.schema)?;
    println!(
        "wrote {} ({} rows, {} features) and {}",
        spec.csv.display(),
        ds.n(),
        ds.dim(),
        spec.schema.display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let mut spec: TrainSpec = load_spec(&args.config)?;
    if let Some(seed) = args.seed {
        spec.train.seed = seed;
    }
    let schema = SchemaConfig::from_file(&spec.schema)?;
    let ds = load_csv(&spec.dataset, &schema)?;
    let run = run_train(&ds, &spec.train, spec.variant, schema.standardize)?;
    let (cp, report) = into_checkpoint(run, &ds);
    save_checkpoint(&cp, &spec.checkpoint)?;
    println!("wrote checkpoint {}", spec.checkpoint.display());

    if let Some(last) = report.records.last() {
        println!(
            "epoch {}: l_r={:.6} l_c={:.6} l_s={:.6} total={:.6} churn={:.3}",
            last.epoch, last.l_r, last.l_c, last.l_s, last.total, last.churn
        );
    }
    if let Some(path) = &spec.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("wrote report {}", path.display());
    }
    if let Some(path) = &spec.embeddings {
        let x = match &cp.standardizer {
            Some(s) => s.transform(&ds.x)?,
            None => ds.x.clone(),
        };
        let z = cp.autoencoder.embed(&x);
        let clusters = cluster::nearest_assign(&z, &cp.centers);
        write_embeddings(path, &z, &clusters, &ds.sensitive)?;
        println!("wrote embeddings {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let mut spec: EvalSpec = load_spec(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let schema = SchemaConfig::from_file(&spec.schema)?;
    let ds = load_csv(&spec.dataset, &schema)?;
    let cp = load_checkpoint(&spec.checkpoint)?;
    let rep = evaluate_checkpoint(&cp, &ds, spec.seed)?;
    print!("{}", rep.to_text());
    if let Some(path) = &spec.report {
        std::fs::write(path, rep.to_json()?)?;
    }
    if let Some(path) = &spec.report_text {
        std::fs::write(path, rep.to_text())?;
    }
    Ok(())
}

fn cmd_transfer(args: &RunArgs) -> Result<()> {
    let mut spec: TransferSpec = load_spec(&args.config)?;
    if let Some(seed) = args.seed {
        spec.transfer.seed = seed;
    }
    if spec.checkpoints.is_empty() {
        return Err(Error::Config("transfer needs at least one checkpoint".into()));
    }
    let schema = SchemaConfig::from_file(&spec.schema)?;
    let ds = load_csv(&spec.dataset, &schema)?;
    let mut results: BTreeMap<String, TransferResult> = BTreeMap::new();
    for (name, path) in &spec.checkpoints {
        let cp = load_checkpoint(path)?;
        let result = transfer_checkpoint(&cp, &ds, &spec.transfer)?;
        println!("[{name}]");
        print!("{}", result.to_text());
        results.insert(name.clone(), result);
    }
    if let Some(path) = &spec.report {
        std::fs::write(path, serde_json::to_string_pretty(&results)?)?;
    }
    Ok(())
}
