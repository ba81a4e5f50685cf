//! Experiment CLI for evolutionary pruning on MNIST.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime or numeric
//! error. All randomness flows from `--seed` (default 0).

mod report;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use evoprune_core::checkpoint::{load_checkpoint, save_checkpoint};
use evoprune_core::data::{load_standard_split, Dataset, Split};
use evoprune_core::experiment::{
    epoch_record, reports_to_csv, reports_to_json, sparsity_sweep, threshold_sweep, train_epoch,
    MetricsLog, TrainConfig, TrainState, DEFAULT_FRACTIONS, DEFAULT_THRESHOLDS,
};
use evoprune_core::gradcheck;
use evoprune_core::model::{evaluate, ModelDims};
use evoprune_core::DynamicsKind;

const DATA_DIR_ENV: &str = "EVOPRUNE_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "evoprune",
    version,
    about = "Train a population-gated MLP on MNIST under selection dynamics and benchmark post-training pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured selection dynamic; writes checkpoints and metrics
    Train(TrainArgs),
    /// Quantile-sparsity pruning sweep from a trained checkpoint
    Sweep(SweepArgs),
    /// Fixed-threshold pruning sweep from a trained checkpoint
    ThresholdSweep(ThresholdArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Finite-difference verification of the backward pass
    Gradcheck(GradcheckArgs),
    /// Merge sweep tables from several run directories
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Selection dynamic: replicator | normalized | mutation
    #[arg(long)]
    dynamic: Option<DynamicsKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory holding the four MNIST IDX files (falls back to config,
    /// then $EVOPRUNE_DATA_DIR, then ./data)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and histograms
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated target pruned fractions
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory (defaults to the checkpoint's directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated fixed mass thresholds
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network size: tiny (6-4-3-2) or small (12-8-6-4)
    #[arg(long, default_value = "tiny")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of well-conditioned random networks to check
    #[arg(long, default_value_t = 20)]
    networks: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each containing sweep.csv (and optionally
    /// threshold_sweep.csv)
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Output directory for the merged tables
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not usage errors
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.downcast_ref::<UsageError>().map_or(2, |_| 1)
        }
    };
    std::process::exit(code);
}

/// Marker for problems that are the caller's fault (exit code 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ThresholdSweep(args) => cmd_threshold_sweep(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn resolve_data_dir(flag: &Option<PathBuf>, config_dir: &Option<PathBuf>) -> PathBuf {
    if let Some(d) = flag {
        return d.clone();
    }
    if let Some(d) = config_dir {
        return d.clone();
    }
    if let Ok(d) = std::env::var(DATA_DIR_ENV) {
        return PathBuf::from(d);
    }
    PathBuf::from("data")
}

fn load_mnist(dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let train = load_standard_split::<f32>(dir, Split::Train).with_context(|| {
        format!(
            "loading MNIST training files from {} (set --data-dir or ${DATA_DIR_ENV})",
            dir.display()
        )
    })?;
    let test = load_standard_split::<f32>(dir, Split::Test)
        .with_context(|| format!("loading MNIST test files from {}", dir.display()))?;
    Ok((train, test))
}

fn load_test_split(dir: &Path) -> Result<Dataset<f32>> {
    load_standard_split::<f32>(dir, Split::Test).with_context(|| {
        format!(
            "loading MNIST test files from {} (set --data-dir or ${DATA_DIR_ENV})",
            dir.display()
        )
    })
}

/// Histogram of the mass vector in 0.05-wide bins over [0, 1.1].
fn mass_histogram_rows(epoch: u64, masses: &[f32]) -> String {
    const BIN: f64 = 0.05;
    const BINS: usize = 22;
    let mut counts = [0usize; BINS];
    for &m in masses {
        let idx = ((m as f64 / BIN).floor() as usize).min(BINS - 1);
        counts[idx] += 1;
    }
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.2},{:.2},{}\n",
            epoch,
            i as f64 * BIN,
            (i + 1) as f64 * BIN,
            c
        ));
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| usage_err(format!("invalid config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = args.dynamic {
        config.dynamic = d;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(d) = &args.data_dir {
        config.data_dir = Some(d.clone());
    }
    config
        .validate()
        .map_err(|e| usage_err(format!("invalid config: {e}")))?;

    let data_dir = resolve_data_dir(&args.data_dir, &config.data_dir);
    let (train_set, test_set) = load_mnist(&data_dir)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;
    std::fs::write(args.out.join("config.json"), config.canonical_json())?;

    let mut state = TrainState::<f32>::new(config.clone())?;
    let mut log = MetricsLog::default();
    let mut hist = String::from("epoch,bin_lo,bin_hi,count\n");
    let last_path = args.out.join("last.ckpt");

    println!(
        "training dynamic={} epochs={} seed={} data={}",
        config.dynamic,
        config.epochs,
        config.seed,
        data_dir.display()
    );
    while state.epochs_completed < config.epochs as u64 {
        let stats = match train_epoch(&mut state, &train_set) {
            Ok(stats) => stats,
            Err(e) => {
                eprintln!(
                    "aborting at epoch {}: {e}; last checkpoint: {}",
                    state.epochs_completed + 1,
                    last_path.display()
                );
                return Err(e.into());
            }
        };
        let acc = evaluate(&state.params, &state.population, &test_set);
        let record = epoch_record(state.epochs_completed, &stats, acc, &state.population);
        println!(
            "epoch {:>2}/{} loss {:.4} test_acc {:.4} mass[min {:.4} med {:.4} max {:.4}] total {:.1} extinct {}",
            record.epoch,
            config.epochs,
            record.train_loss,
            record.test_accuracy,
            record.mass_min,
            record.mass_median,
            record.mass_max,
            record.mass_total,
            record.near_extinct
        );
        hist.push_str(&mass_histogram_rows(
            record.epoch,
            state.population.masses.as_slice().expect("contiguous"),
        ));
        log.records.push(record);
        save_checkpoint(&state, &last_path)?;
    }

    std::fs::write(args.out.join("metrics.csv"), log.to_csv())?;
    std::fs::write(args.out.join("mass_hist.csv"), hist)?;
    let final_path = args.out.join("final.ckpt");
    save_checkpoint(&state, &final_path)?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn sweep_common(
    checkpoint: &Path,
    data_dir: &Option<PathBuf>,
    out: &Option<PathBuf>,
    run: impl Fn(&TrainState<f32>, &Dataset<f32>) -> Vec<evoprune_core::PruneReport>,
    stem: &str,
) -> Result<()> {
    let state = load_state(checkpoint)?;
    let dir = resolve_data_dir(data_dir, &state.config.data_dir);
    let test_set = load_test_split(&dir)?;
    let reports = run(&state, &test_set);

    let out_dir = out
        .clone()
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let csv = reports_to_csv(&reports);
    std::fs::write(out_dir.join(format!("{stem}.csv")), &csv)?;
    std::fs::write(
        out_dir.join(format!("{stem}.json")),
        reports_to_json(&reports)?,
    )?;
    print!("{csv}");
    println!("written: {}", out_dir.join(format!("{stem}.csv")).display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let fractions = args.fractions.unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    for &f in &fractions {
        if !(0.0..1.0).contains(&f) {
            return Err(usage_err(format!("fraction {f} outside [0, 1)")));
        }
    }
    sweep_common(
        &args.checkpoint,
        &args.data_dir,
        &args.out,
        |state, test| sparsity_sweep(state, test, &fractions),
        "sweep",
    )
}

fn cmd_threshold_sweep(args: ThresholdArgs) -> Result<()> {
    let thresholds = args
        .thresholds
        .unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    for &t in &thresholds {
        if t < 0.0 {
            return Err(usage_err(format!("threshold {t} must be non-negative")));
        }
    }
    sweep_common(
        &args.checkpoint,
        &args.data_dir,
        &args.out,
        |state, test| threshold_sweep(state, test, &thresholds),
        "threshold_sweep",
    )
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let state = load_state(&args.checkpoint)?;
    let dir = resolve_data_dir(&args.data_dir, &state.config.data_dir);
    let test_set = load_test_split(&dir)?;
    let acc = evaluate(&state.params, &state.population, &test_set);
    println!(
        "checkpoint {} (dynamic {}, {} epochs): test accuracy {:.4}",
        args.checkpoint.display(),
        state.config.dynamic,
        state.epochs_completed,
        acc
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let dims = match args.size.as_str() {
        "tiny" => gradcheck::TINY_DIMS,
        "small" => ModelDims {
            input: 12,
            hidden1: 8,
            hidden2: 6,
            classes: 4,
        },
        other => return Err(usage_err(format!("unknown size '{other}' (tiny|small)"))),
    };
    let report = gradcheck::run(dims, args.networks, args.seed, 5);
    println!(
        "gradcheck: {} networks ({} skipped near the relu kink), max relative error {:.3e}, tolerance {:.0e}",
        report.networks,
        report.skipped,
        report.max_rel_error,
        gradcheck::REL_TOLERANCE
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        bail!("gradient check failed")
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut wrote_any = false;
    for (stem, label) in [("sweep", "quantile"), ("threshold_sweep", "fixed-threshold")] {
        let mut rows = Vec::new();
        let mut found = 0;
        for dir in &args.run_dirs {
            let path = dir.join(format!("{stem}.csv"));
            if path.exists() {
                rows.extend(report::parse_sweep_csv(&path)?);
                found += 1;
            } else if stem == "sweep" {
                return Err(anyhow!(
                    "{} has no sweep.csv (run `evoprune sweep` there first)",
                    dir.display()
                ));
            }
        }
        if found == 0 {
            continue;
        }
        let merged = report::merge(rows)?;
        let csv_path = args.out.join(format!("report_{stem}.csv"));
        let md_path = args.out.join(format!("report_{stem}.md"));
        std::fs::write(&csv_path, merged.to_csv())?;
        std::fs::write(&md_path, merged.to_markdown())?;
        println!("{label} comparison across {found} run dir(s):");
        print!("{}", merged.to_markdown());
        println!("written: {} and {}", csv_path.display(), md_path.display());
        wrote_any = true;
    }
    if !wrote_any {
        return Err(usage_err("no sweep CSVs found in the given directories"));
    }
    Ok(())
}
