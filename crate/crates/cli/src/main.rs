//! `stride`: synthesize data, train, evaluate, report and collect runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};
use stride_core::data::{synth_generate, SynthConfig};
use stride_core::metrics::{read_predictions, report, write_predictions};
use stride_core::train::{
    evaluate, train_from_config, write_weights, Checkpoint, Dataset, Example, Mode, Model, RunRecord, TrainConfig,
    TrainOptions, PREDICTIONS_FILE, RECORD_FILE, WEIGHTS_FILE,
};
use stride_core::Error;

pub const TRADEOFF_HEADER: [&str; 9] = [
    "run_id",
    "mode",
    "seed",
    "acc_overall",
    "pqd_race",
    "eom_race",
    "pqd_rg",
    "eom_rg",
    "probe_acc",
];

#[derive(Parser)]
#[command(name = "stride", version, about = "Fair patch-selection experiments on synthetic or manifest data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: manifest, lesion map and PGM images.
    Synth(SynthArgs),
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Predict with a saved checkpoint.
    Eval(EvalArgs),
    /// Subgroup accuracy, PQD and EOM from a predictions CSV.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        /// Output prefix; writes PREFIX.json and PREFIX.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect run records under a directory into one CSV row per run.
    Tradeoff {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base settings as TOML or JSON; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// erm, got or stridenet; overrides the config file.
    #[arg(long)]
    mode: Option<String>,
    /// `key=value`, applied after the file and `--mode`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint directory written by the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the manifest recorded in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = PREDICTIONS_FILE)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Usage(_) | Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

/// Reads `STRIDE_THREADS`. Every kernel runs on one thread, so larger values
/// are accepted but have no effect.
fn threads() -> anyhow::Result<usize> {
    let n = match std::env::var("STRIDE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Usage(format!("STRIDE_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    if n > 1 {
        warn!("STRIDE_THREADS={n}: computation stays single-threaded for bitwise determinism");
    }
    Ok(n)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report { predictions, out } => {
            let records = read_predictions(&predictions)?;
            let r = report(&records, false)?;
            r.write(&out)?;
            println!("{}", serde_json::to_string(&stride_core::train::FinalMetrics::from(&r))?);
            Ok(())
        }
        Command::Tradeoff { runs, out } => tradeoff(&runs, &out),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_file(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { cfg.$field = v; })*};
    }
    set!(n => n, rho => rho, seed => seed, h => height, w => width, patch => patch,
         signal => signal_strength, bias => bias_strength, noise => noise_std);
    let m = synth_generate(&cfg, &a.out)?;
    info!("wrote {} samples to {}", m.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    for kv in &a.overrides {
        cfg.apply_override(kv)?;
    }
    let out = train_from_config(&cfg, &TrainOptions { resume: a.resume })?;
    let r = &out.record;
    info!(
        "{}: acc {:.4}, PQD {:.4}, EOM {:.4}, probe {:.4}",
        r.run_id, r.metrics.acc_overall, r.metrics.pqd_race, r.metrics.eom_race, r.probe_acc
    );
    println!("{}", cfg.out_dir.join(RECORD_FILE).display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.meta.config.clone();
    let manifest = a.manifest.clone().unwrap_or_else(|| cfg.manifest.clone());
    let data = Dataset::load(&manifest, cfg.height, cfg.width, cfg.train_frac, cfg.seed)?;
    let examples: Vec<Example> = match a.split.as_str() {
        "test" => data.test,
        "train" => data.train,
        "all" => data.train.into_iter().chain(data.test).collect(),
        other => bail!(Error::Usage(format!("unknown split {other:?}; valid splits: test, train, all"))),
    };
    if examples.is_empty() {
        bail!(Error::Data(format!("the {} split of {} is empty", a.split, manifest.display())));
    }
    let model = Model::from_store(&cfg, &ck.params)?;
    let stride = cfg.effective().stride;
    let ev = evaluate(&cfg, &model, &ck.params, &stride, &examples)?;
    write_predictions(&a.out, &ev.records).with_context(|| format!("writing {}", a.out.display()))?;
    if cfg.mode == Mode::Stridenet {
        let path = a.out.parent().unwrap_or(Path::new(".")).join(WEIGHTS_FILE);
        let ids: Vec<String> = ev.records.iter().map(|r| r.id.clone()).collect();
        write_weights(&path, &ids, &ev.weights)?;
    }
    info!("wrote {} predictions to {}", ev.records.len(), a.out.display());
    Ok(())
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn tradeoff(runs: &Path, out: &Path) -> anyhow::Result<()> {
    let mut paths = Vec::new();
    find_records(runs, &mut paths)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(TRADEOFF_HEADER)?;
    let mut rows = 0;
    for p in &paths {
        let r = match RunRecord::load(p) {
            Ok(r) => r,
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                continue;
            }
        };
        let m = r.metrics;
        w.write_record([
            r.run_id,
            r.mode.to_string(),
            r.seed.to_string(),
            m.acc_overall.to_string(),
            m.pqd_race.to_string(),
            m.eom_race.to_string(),
            m.pqd_rg.to_string(),
            m.eom_rg.to_string(),
            r.probe_acc.to_string(),
        ])?;
        rows += 1;
    }
    w.flush()?;
    info!("wrote {rows} run(s) to {}", out.display());
    Ok(())
}
