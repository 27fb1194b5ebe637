use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dacx::error::Error;
use dacx::manifest::RunManifest;
use dacx::pipeline::{self, Layout, PipelineConfig, ReportInputs, StageError};

#[derive(Parser)]
#[command(
    name = "dacx",
    version,
    about = "Abstaining multi-task text classifier with global explanations"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true, env = "DACX_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, env = "DACX_SEED")]
    seed: Option<u64>,
    /// Output root shared by all stages.
    #[arg(long, global = true, env = "DACX_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "DACX_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its split.
    Gen,
    /// Train and tune the abstaining model, then predict the analysis split.
    Train,
    /// Gradient × input explanations for the analysis split.
    Explain,
    /// Build and truncate the ALE matrices.
    Aggregate {
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// PCA of every built cohort.
    Pca {
        #[arg(long)]
        variance_goal: Option<f64>,
    },
    /// Metrics tables and plots.
    Report {
        /// Predictions JSONL (defaults to the one under --out).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Corpus directory holding the ground truth.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Accuracy–abstention trade-off sweep, e.g. `--targets 0.80..0.97`.
    Sweep {
        #[arg(long)]
        targets: Option<String>,
    },
    /// gen → train → explain → aggregate → pca → report.
    Pipeline,
    /// Check artifact digests against the manifest.
    Verify,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        match e.error {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut cfg = load_config(common)?;
    let root = common.out.as_path();
    let out = Layout::new(root);
    match cli.command {
        Command::Gen => pipeline::run_stage("gen", &cfg, root, || pipeline::stage_gen(&cfg, &out))?,
        Command::Train => pipeline::run_stage("train", &cfg, root, || pipeline::stage_train(&cfg, &out))?,
        Command::Explain => pipeline::run_stage("explain", &cfg, root, || pipeline::stage_explain(&cfg, &out))?,
        Command::Aggregate { cap, threshold } => {
            if let Some(c) = cap {
                cfg.aggregate.cap = c;
            }
            if threshold.is_some() {
                cfg.aggregate.threshold = threshold;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let statuses = pipeline::run_stage("aggregate", &cfg, root, || pipeline::stage_aggregate(&cfg, &out))?;
            for s in statuses {
                match s.reason {
                    None => println!("{}: {} rows × {} words", s.cohort, s.rows, s.columns),
                    Some(r) => println!("{}: skipped ({r})", s.cohort),
                }
            }
        }
        Command::Pca { variance_goal } => {
            if let Some(g) = variance_goal {
                cfg.pca.variance_goal = g;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            pipeline::run_stage("pca", &cfg, root, || pipeline::stage_pca(&cfg, &out))?;
        }
        Command::Report { pred, truth } => {
            let inputs = ReportInputs {
                predictions: pred.unwrap_or_else(|| out.predictions()),
                corpus: truth.unwrap_or_else(|| out.corpus()),
                pca: Some(out.pca()),
                task: None,
            };
            pipeline::run_stage("report", &cfg, root, || {
                pipeline::stage_report(&cfg, &inputs, &out.report())
            })?;
        }
        Command::Sweep { targets } => {
            let targets = match targets {
                Some(t) => pipeline::parse_targets(&t).map_err(|e| Failure::Usage(e.to_string()))?,
                None => cfg.sweep.targets.clone(),
            };
            let points = pipeline::run_stage("sweep", &cfg, root, || pipeline::stage_sweep(&cfg, &out, &targets))?;
            for p in points {
                println!(
                    "target {:.3}: retained accuracy {}, abstention {:.4}",
                    p.target,
                    dacx::metrics::fmt_opt(p.retained_accuracy),
                    p.abstention
                );
            }
        }
        Command::Pipeline => {
            let manifest = pipeline::run_pipeline(&cfg, root)?;
            println!("{} artifacts written under {}", manifest.files.len(), root.display());
        }
        Command::Verify => {
            let manifest = RunManifest::load_or_new(root).map_err(|e| Failure::Runtime(e.to_string()))?;
            let bad = manifest.verify(root).map_err(|e| Failure::Runtime(e.to_string()))?;
            if !bad.is_empty() {
                return Err(Failure::Runtime(format!("digest mismatch: {}", bad.join(", "))));
            }
            println!("{} files verified", manifest.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
