//! `planeshift` command-line interface.
//!
//! Stages run in order: `synth`, `train-diffusion`, `train-classifier`,
//! `train-oracle`, `train-features`, `generate`, `evaluate`, `report`.
//! Every stage is driven by one JSON config (defaults built in, file values
//! override defaults, CLI flags override the file) and writes a run manifest
//! with content hashes next to its outputs.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use planeshift_core::config::{ExperimentConfig, Method};
use planeshift_core::pipeline::{self, Paths};
use planeshift_core::Error;

#[derive(Parser)]
#[command(name = "planeshift", version, about = "Counterfactual plane-quality experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; omitted fields fall back to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for generation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labelled phantom dataset and splits.
    Synth(Common),
    /// Train the unconditional denoiser.
    TrainDiffusion(Common),
    /// Train the segmenter, then the predictor against it (frozen).
    TrainClassifier(Common),
    /// Train the independent oracle scorer.
    TrainOracle(Common),
    /// Train the guidance and evaluation feature extractors.
    TrainFeatures(Common),
    /// Generate counterfactuals for the NSP test images.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Restrict to one method (diff_ice, diff_ice_1, diff_ice_1_xt).
        #[arg(long)]
        method: Option<Method>,
        /// Run the ablation grid instead of the configured methods.
        #[arg(long)]
        ablation: bool,
        /// Cap the number of explained images.
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Compute metric reports from persisted records.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        ablation: bool,
    },
    /// Print a previously computed report as a table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_json(&fs::read(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.generate.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            let manifest = pipeline::stage_synth(&cfg)?;
            println!("synth: {} files under {}", manifest.outputs.len(), cfg.out_dir.display());
        }
        Command::TrainDiffusion(common) => {
            let cfg = load_config(&common)?;
            pipeline::stage_train_diffusion(&cfg)?;
            println!("train-diffusion: checkpoint written");
        }
        Command::TrainClassifier(common) => {
            let cfg = load_config(&common)?;
            pipeline::stage_train_classifier(&cfg)?;
            let manifest = planeshift_core::checkpoint::read_manifest(
                &Paths::new(&cfg.out_dir).checkpoint(pipeline::ROLE_CLASSIFIER),
            )?;
            println!("train-classifier: metrics {}", manifest.metrics);
        }
        Command::TrainOracle(common) => {
            let cfg = load_config(&common)?;
            pipeline::stage_train_oracle(&cfg)?;
            println!("train-oracle: checkpoint written");
        }
        Command::TrainFeatures(common) => {
            let cfg = load_config(&common)?;
            pipeline::stage_train_features(&cfg)?;
            println!("train-features: both checkpoints written");
        }
        Command::Generate {
            common,
            method,
            ablation,
            max_images,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.generate.methods = vec![m];
            }
            if max_images.is_some() {
                cfg.generate.max_images = max_images;
            }
            if ablation {
                let manifests = pipeline::stage_generate_ablation(&cfg)?;
                println!("generate: {} ablation cells", manifests.len());
            } else {
                let manifests = pipeline::stage_generate(&cfg)?;
                println!("generate: {} method runs", manifests.len());
            }
        }
        Command::Evaluate {
            common,
            method,
            ablation,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.generate.methods = vec![m];
            }
            if ablation {
                let rows = pipeline::stage_evaluate_ablation(&cfg)?;
                println!("evaluate: {} ablation rows -> reports/ablation/ablation.csv", rows.len());
            } else {
                for report in pipeline::stage_evaluate(&cfg)? {
                    let it = report.final_iteration();
                    println!(
                        "evaluate {}: FR={:.3} MAD={:.3} BKL={:.3} MQD={:.3}",
                        report.method, it.flip_ratio, it.mad, it.bkl, it.mqd
                    );
                }
            }
        }
        Command::Report { common, method } => {
            let cfg = load_config(&common)?;
            let methods = match method {
                Some(m) => vec![m],
                None => cfg.generate.methods.clone(),
            };
            for m in methods {
                print_report(&cfg, m.dir_name())?;
            }
        }
    }
    Ok(())
}

fn print_report(cfg: &ExperimentConfig, method_dir: &str) -> Result<(), Error> {
    let dir = Paths::new(&cfg.out_dir).reports(method_dir);
    let path = dir.join("report.json");
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: format!("report:{method_dir}"),
            hint: "evaluate".into(),
        });
    }
    let report: planeshift_core::metrics::MetricsReport =
        serde_json::from_slice(&fs::read(path)?)?;
    println!(
        "method {} ({} records, {} eligible NSP, {} confident-oracle)",
        report.method, report.n_records, report.n_eligible, report.n_confident_oracle
    );
    println!("iter |    FR |   MAD |   BKL |   MQD |   cos |     FD | valid");
    for it in &report.per_iteration {
        println!(
            "{:>4} | {:>5.3} | {:>5.3} | {:>5.3} | {:>5.3} | {} | {} | {:>5}",
            it.iteration,
            it.flip_ratio,
            it.mad,
            it.bkl,
            it.mqd,
            it.feature_cosine
                .map_or("    -".into(), |v| format!("{v:>5.3}")),
            it.frechet.map_or("     -".into(), |v| format!("{v:>6.2}")),
            it.n_valid
        );
    }
    let eff = dir.join("efficiency.csv");
    if let Ok(text) = fs::read_to_string(eff) {
        if let Some(line) = text.lines().nth(1) {
            println!("efficiency: {line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
