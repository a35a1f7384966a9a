//! `btlab` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use btlab_core::pipeline::{self, ExperimentConfig};
use btlab_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "btlab", version, about = "Bayes label transition learning on synthetic noisy-label benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the clean training pool and the test set.
    Generate(Common),
    /// Add instance-dependent noise and split off the noisy validation set.
    InjectNoise(Common),
    /// Train the noisy-posterior estimator.
    Warmup(Common),
    /// Collect distilled examples with the warm-up network.
    Distill(Common),
    /// Fit the Bayes label transition network.
    TrainTransition(Common),
    /// Train the corrected classifier, the baselines and the revision.
    TrainClassifier(Common),
    /// Score every trained classifier and write the metrics report.
    Evaluate(Common),
    /// Every stage for every seed, then the report.
    RunAll(Common),
    /// Repeat the pipeline for several distillation bounds.
    SweepRho {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rho_max values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.25, 0.3, 0.35, 0.4])]
        rho: Vec<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::InjectNoise(c)
            | Command::Warmup(c)
            | Command::Distill(c)
            | Command::TrainTransition(c)
            | Command::TrainClassifier(c)
            | Command::Evaluate(c)
            | Command::RunAll(c) => c,
            Command::SweepRho { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn per_seed(cfg: &ExperimentConfig, stage: fn(&ExperimentConfig, u64) -> btlab_core::Result<()>) -> Result<()> {
    for &seed in &cfg.seeds {
        stage(cfg, seed).with_context(|| format!("seed {seed}"))?;
        info!("seed {seed} done: {}", cfg.seed_dir(seed).display());
    }
    Ok(())
}

fn run(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    match command {
        Command::Generate(_) => per_seed(cfg, pipeline::run_generate),
        Command::InjectNoise(_) => per_seed(cfg, pipeline::run_inject),
        Command::Warmup(_) => per_seed(cfg, pipeline::run_warmup),
        Command::Distill(_) => per_seed(cfg, pipeline::run_distill),
        Command::TrainTransition(_) => per_seed(cfg, pipeline::run_train_transition),
        Command::TrainClassifier(_) => per_seed(cfg, pipeline::run_train_classifier),
        Command::Evaluate(_) => {
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                reports.push(pipeline::run_evaluate_seed(cfg, seed).with_context(|| format!("seed {seed}"))?);
            }
            let report = pipeline::write_report(cfg, reports)?;
            println!("{}", pipeline::metrics_path(cfg).display());
            print_summary(&report);
            Ok(())
        }
        Command::RunAll(_) => {
            let report = pipeline::run_comparison(cfg)?;
            println!("{}", pipeline::metrics_path(cfg).display());
            print_summary(&report);
            let failures = report.failures();
            if let Some((seed, f)) = failures.first() {
                anyhow::bail!(Error::stage(
                    f.stage.clone(),
                    format!("{} of {} seeds failed; first was seed {seed}: {}", failures.len(), cfg.seeds.len(), f.message)
                ));
            }
            Ok(())
        }
        Command::SweepRho { rho, .. } => {
            let rows = pipeline::sweep_rho(cfg, rho)?;
            println!("{}", cfg.output_dir.join("sweep.csv").display());
            for r in rows {
                println!(
                    "rho={:<5} acc={} sd={} flagged={}",
                    r.rho,
                    fmt(r.acc_mean),
                    fmt(r.acc_sd),
                    r.flagged
                );
            }
            Ok(())
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_summary(report: &btlab_core::metrics::MetricsReport) {
    println!(
        "{}: acc_vs_bayes {} (sd {}), heldout row-l1 {}",
        report.method,
        fmt(report.test_accuracy_vs_bayes.mean),
        fmt(report.test_accuracy_vs_bayes.sd),
        fmt(report.mean_row_l1_heldout.mean)
    );
    for (name, m) in &report.baselines {
        println!(
            "{name}: acc_vs_bayes {} (sd {}), heldout row-l1 {}",
            fmt(m.test_accuracy_vs_bayes.mean),
            fmt(m.test_accuracy_vs_bayes.sd),
            fmt(m.mean_row_l1_heldout.mean)
        );
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(cli.command.common()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
