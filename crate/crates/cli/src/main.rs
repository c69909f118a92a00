//! Command line front end for the adaptive-augmentation trainer.
//!
//! One process, six subcommands: `train`, `eval`, `sweep-epsilon`,
//! `ablation`, `oracle-check` and `gen-data`. Configuration comes from an
//! optional flat key=value file plus repeatable `--set` overrides; every
//! output file is written atomically so an interrupted run never leaves a
//! truncated report behind.
//!
//! Exit codes are a stable contract for scripting: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advaug::adapt::Strategy;
use advaug::config::{self, RawConfig, TrainerConfig};
use advaug::data::{
    load_dataset, write_idx, TEST_IMAGES_FILE, TEST_LABELS_FILE, TRAIN_IMAGES_FILE,
    TRAIN_LABELS_FILE,
};
use advaug::nn::checkpoint;
use advaug::oracle::run_oracle_checks;
use advaug::report::write_atomic;
use advaug::trainer::{self, run_ablation, run_epsilon_sweep};
use advaug::{Error, Result};

#[derive(Parser)]
#[command(
    name = "advaug",
    version,
    about = "Train small image classifiers against a self-adjusting augmentation pipeline"
)]
struct Cli {
    /// Flat key=value configuration file (every key has a default).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied after the
    /// file, last occurrence wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for reports, checkpoints and generated data.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Worker threads for candidate evaluation (default: all logical
    /// processors). Results are identical for any worker count.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes report.json, epochs.csv and model.ckpt.
    Train,
    /// Score a saved checkpoint on the configured test split.
    Eval {
        /// Checkpoint file to load.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train one run per (step size, seed) plus the no-adaptation
    /// baseline, and aggregate the accuracies.
    SweepEpsilon {
        /// Update step sizes to sweep (the zero baseline is implicit).
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        epsilons: Vec<i32>,
        /// Seeds shared by every row of the sweep.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Train one run per (update strategy, seed) and aggregate the
    /// accuracies.
    Ablation {
        /// Strategies to compare: maximize, minimize, random, none.
        #[arg(long, value_delimiter = ',', default_value = "maximize,minimize,random,none")]
        strategies: Vec<String>,
        /// Seeds shared by every strategy.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Run the built-in self-checks and print one line per property.
    OracleCheck,
    /// Write the configured dataset out as IDX files for reuse.
    GenData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    install_worker_pool(cli.workers)?;
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Eval { checkpoint } => cmd_eval(cli, checkpoint),
        Command::SweepEpsilon { epsilons, seeds } => cmd_sweep_epsilon(cli, epsilons, seeds),
        Command::Ablation { strategies, seeds } => cmd_ablation(cli, strategies, seeds),
        Command::OracleCheck => cmd_oracle_check(),
        Command::GenData => cmd_gen_data(cli),
    }
}

fn install_worker_pool(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

/// Assemble the effective configuration: file, then `--set` overrides in
/// order, then the `--seed` shorthand. Warnings go to stderr.
fn effective_config(cli: &Cli) -> Result<TrainerConfig> {
    let mut raw = RawConfig::default();
    if let Some(path) = &cli.config {
        let (file_raw, warnings) = config::load_file(path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config(format!("cannot read config file {path}: {source}"))
            }
            other => other,
        })?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        raw.merge_from(&file_raw);
    }
    let mut seen: HashSet<String> = HashSet::new();
    for setting in &cli.set {
        if let Some((key, _)) = setting.split_once('=') {
            if !seen.insert(key.trim().to_string()) {
                eprintln!("warning: --set {} given more than once; the last value wins", key.trim());
            }
        }
        raw.apply_set(setting)?;
    }
    let mut cfg = TrainerConfig::from_raw(&raw)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli) -> Result<ExitCode> {
    let cfg = effective_config(cli)?;
    let outcome = trainer::train(&cfg)?;

    let report_path = cli.out.join("report.json");
    let csv_path = cli.out.join("epochs.csv");
    let ckpt_path = cli.out.join("model.ckpt");
    write_atomic(&report_path, outcome.report.to_json()?.as_bytes())?;
    write_atomic(&csv_path, outcome.csv.as_bytes())?;
    write_atomic(&ckpt_path, &checkpoint::to_bytes(&outcome.model)?)?;

    println!(
        "trained {} for {} epochs ({} train / {} test samples)",
        cfg.arch, cfg.epochs, cfg.data.train_count, cfg.data.test_count
    );
    println!(
        "final train loss {:.6}, test accuracy {:.6}",
        outcome.report.final_train_loss, outcome.report.final_test_acc
    );
    println!(
        "forward evals {} ({} cache hits), backward evals {}",
        outcome.report.total_forward_evals,
        outcome.report.total_cache_hits,
        outcome.report.total_backward_evals
    );
    println!(
        "wrote {}, {}, {}",
        report_path.display(),
        csv_path.display(),
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, ckpt: &Path) -> Result<ExitCode> {
    let cfg = effective_config(cli)?;
    let model = checkpoint::load(ckpt)?;
    let split = load_dataset(&cfg.data)?;
    let (accuracy, mean_loss) = trainer::evaluate(&model, &split.test)?;
    println!("test_accuracy={accuracy:.6}");
    println!("test_mean_loss={mean_loss:.6}");
    Ok(ExitCode::SUCCESS)
}

/// Sample mean and standard deviation; the deviation is zero for a
/// single observation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_run_dir(dir: &Path, report_json: &str, csv: &str) -> Result<()> {
    write_atomic(&dir.join("report.json"), report_json.as_bytes())?;
    write_atomic(&dir.join("epochs.csv"), csv.as_bytes())?;
    Ok(())
}

fn cmd_sweep_epsilon(cli: &Cli, epsilons: &[i32], seeds: &[u64]) -> Result<ExitCode> {
    let cfg = effective_config(cli)?;
    let points = run_epsilon_sweep(&cfg, epsilons, seeds)?;

    let mut grouped: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    let mut train_losses: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    let mut gaps: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for p in &points {
        let dir = cli.out.join(format!("eps{}-seed{}", p.epsilon, p.seed));
        write_run_dir(&dir, &p.report.to_json()?, &p.csv)?;
        grouped.entry(p.epsilon).or_default().push(p.final_test_acc);
        train_losses
            .entry(p.epsilon)
            .or_default()
            .push(p.final_train_loss);
        gaps.entry(p.epsilon).or_default().push(p.mean_loss_gap);
    }

    let mut csv =
        String::from("epsilon,runs,mean_test_acc,sd_test_acc,mean_train_loss,mean_loss_gap\n");
    for (eps, accs) in &grouped {
        let (mean_acc, sd_acc) = mean_sd(accs);
        let (mean_loss, _) = mean_sd(&train_losses[eps]);
        let (mean_gap, _) = mean_sd(&gaps[eps]);
        csv.push_str(&format!(
            "{eps},{},{mean_acc:.6},{sd_acc:.6},{mean_loss:.6},{mean_gap:.6}\n",
            accs.len()
        ));
        println!(
            "epsilon {eps}: mean test acc {mean_acc:.6} +/- {sd_acc:.6} over {} seeds",
            accs.len()
        );
    }
    let agg_path = cli.out.join("sweep.csv");
    write_atomic(&agg_path, csv.as_bytes())?;
    println!("wrote {} and {} run reports", agg_path.display(), points.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablation(cli: &Cli, strategies: &[String], seeds: &[u64]) -> Result<ExitCode> {
    let cfg = effective_config(cli)?;
    let parsed: Vec<Strategy> = strategies
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let points = run_ablation(&cfg, &parsed, seeds)?;

    let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut train_losses: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in &points {
        let dir = cli.out.join(format!("{}-seed{}", p.strategy, p.seed));
        write_run_dir(&dir, &p.report.to_json()?, &p.csv)?;
        let slot = parsed
            .iter()
            .position(|s| *s == p.strategy)
            .expect("every point comes from the requested strategies");
        grouped.entry(slot).or_default().push(p.final_test_acc);
        train_losses
            .entry(slot)
            .or_default()
            .push(p.final_train_loss);
    }

    let mut csv = String::from("strategy,runs,mean_test_acc,sd_test_acc,mean_train_loss\n");
    for (slot, accs) in &grouped {
        let (mean_acc, sd_acc) = mean_sd(accs);
        let (mean_loss, _) = mean_sd(&train_losses[slot]);
        csv.push_str(&format!(
            "{},{},{mean_acc:.6},{sd_acc:.6},{mean_loss:.6}\n",
            parsed[*slot],
            accs.len()
        ));
        println!(
            "{}: mean test acc {mean_acc:.6} +/- {sd_acc:.6} over {} seeds",
            parsed[*slot],
            accs.len()
        );
    }
    let agg_path = cli.out.join("ablation.csv");
    write_atomic(&agg_path, csv.as_bytes())?;
    println!("wrote {} and {} run reports", agg_path.display(), points.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check() -> Result<ExitCode> {
    let results = run_oracle_checks();
    let mut failures = 0u32;
    for r in &results {
        let tag = if r.passed { "ok  " } else { "FAIL" };
        println!("{tag} {}: {}", r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: {failures} of {} self-checks failed", results.len());
        Ok(ExitCode::from(1))
    }
}

fn cmd_gen_data(cli: &Cli) -> Result<ExitCode> {
    let cfg = effective_config(cli)?;
    let split = load_dataset(&cfg.data)?;
    write_idx(
        &split.train,
        &cli.out.join(TRAIN_IMAGES_FILE),
        &cli.out.join(TRAIN_LABELS_FILE),
    )?;
    write_idx(
        &split.test,
        &cli.out.join(TEST_IMAGES_FILE),
        &cli.out.join(TEST_LABELS_FILE),
    )?;
    println!(
        "wrote {TRAIN_IMAGES_FILE}, {TRAIN_LABELS_FILE}, {TEST_IMAGES_FILE}, {TEST_LABELS_FILE} to {}",
        cli.out.display()
    );
    println!(
        "dataset_checksum={:016x}-{:016x}",
        split.train.checksum(),
        split.test.checksum()
    );
    Ok(ExitCode::SUCCESS)
}
