use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clsdf::cotrain::Baseline;
use clsdf::dataset::NoiseKind;
use clsdf::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "clsdf", version, about = "Label-noise robust radar target recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    noise_kind: Option<NoiseKind>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<Baseline>,
}

fn parse_kind(s: &str) -> Result<NoiseKind, String> {
    s.parse()
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the dataset and write it to --out.
    GenData(Common),
    /// Corrupt the training labels of the dataset directory --out.
    InjectNoise(Common),
    /// Train and write a run directory to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-data; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write CSV series from a run directory's report to --out.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
    /// Per-class normalized-loss histograms of a checkpoint, split by audit status.
    LossHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(kind) = common.noise_kind {
        cfg.noise.kind = kind;
    }
    if let Some(rate) = common.noise_rate {
        cfg.noise.rate = rate;
    }
    if let Some(epochs) = common.epochs {
        cfg.train.schedule.total_epochs = epochs;
    }
    if let Some(baseline) = common.baseline {
        cfg.train.baseline = baseline;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, HarnessError> {
    cfg.out
        .as_deref()
        .ok_or_else(|| HarnessError::Config("--out is required".into()))
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::GenData(common) => {
            let cfg = config(&common)?;
            let dir = out_dir(&cfg)?;
            let n = harness::gen_data(&cfg, dir)?;
            println!("wrote {n} samples to {}", dir.display());
        }
        Command::InjectNoise(common) => {
            let cfg = config(&common)?;
            let dir = out_dir(&cfg)?;
            let n = harness::inject_noise_dir(&cfg, dir)?;
            println!("corrupted {n} training labels in {}", dir.display());
        }
        Command::Train { common, data } => {
            let cfg = config(&common)?;
            let trained = harness::train(&cfg, data.as_deref(), cfg.out.as_deref())?;
            let r = &trained.report;
            println!(
                "final accuracy {:.4}, best {:.4}, {:.1} s",
                r.final_accuracy, r.best_accuracy, r.wall_clock_secs
            );
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = config(&common)?;
            let eval = harness::eval_checkpoint(&checkpoint, &cfg, data.as_deref())?;
            println!("accuracy {:.4}", eval.accuracy);
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
                harness::write_confusion(&dir.join(harness::CONFUSION_FILE), &eval.confusion)?;
            }
        }
        Command::ExportPlots { common, run } => {
            let cfg = config(&common)?;
            let report = harness::read_report(&run.join(harness::REPORT_FILE))?;
            let dir = cfg.out.clone().unwrap_or(run);
            for name in harness::export_plots(&report, &dir)? {
                println!("{}", dir.join(name).display());
            }
        }
        Command::LossHist {
            common,
            checkpoint,
            data,
            bins,
        } => {
            let cfg = config(&common)?;
            let rows = harness::loss_hist(&checkpoint, &cfg, data.as_deref(), bins)?;
            let path = match &cfg.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
                    dir.join("loss_hist.csv")
                }
                None => PathBuf::from("loss_hist.csv"),
            };
            harness::write_histogram(&path, &rows)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
