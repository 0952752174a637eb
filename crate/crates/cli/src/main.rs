use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cascade_seg::pipeline;
use cascade_seg::{PipelineConfig, SegError};
use clap::{Parser, Subcommand};

/// Coarse-to-fine multi-organ segmentation.
#[derive(Debug, Parser)]
#[command(name = "cascade-seg", version)]
struct Cli {
    /// TOML pipeline configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cross-validation fold (0..3).
    #[arg(long, global = true, default_value_t = 0)]
    fold: usize,
    /// Worker threads (1 gives the deterministic sequential schedule).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory: data dir for `phantom`, report dir for `evaluate`,
    /// work dir otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic phantom cohort.
    Phantom,
    /// Hold out test cases and write the cross-validation folds.
    CvSplit,
    /// Normalize, resample and pad every case onto the coarse grid.
    Preprocess,
    /// Train the coarse multi-organ model for one fold.
    TrainCoarse,
    /// Predict every case with the coarse model, on the native grid.
    InferCoarse,
    /// Sample and store refine patches from the coarse priors.
    BuildPatches,
    /// Train the single binary refine model.
    TrainRefine,
    /// Run both stages on the test cases and fuse the patch votes.
    Infer,
    /// Score predictions against ground truth.
    Evaluate {
        /// Prediction directory; with `--gt`, scores an arbitrary pair of
        /// directories instead of the fold's outputs.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        match cli.command {
            Command::Phantom => cfg.paths.data_dir = out.clone(),
            Command::Evaluate { .. } => {}
            _ => cfg.paths.work_dir = out.clone(),
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        cascade_seg::par::init_threads(n).map_err(|e| SegError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let fold = cli.fold;
    match &cli.command {
        Command::Phantom => {
            let ids = pipeline::run_phantom(&cfg)?;
            println!("generated {} cases in {}", ids.len(), cfg.paths.data_dir.display());
        }
        Command::CvSplit => {
            let s = pipeline::run_split(&cfg)?;
            println!("{} test cases, {} folds", s.test.len(), s.folds.len());
            for f in &s.folds {
                println!("fold {}: {} train / {} val", f.fold, f.train.len(), f.val.len());
            }
        }
        Command::Preprocess => {
            let n = pipeline::run_preprocess(&cfg)?;
            println!("preprocessed {n} cases");
        }
        Command::TrainCoarse => {
            let h = pipeline::run_train_coarse(&cfg, fold)?;
            println!("fold {fold}: coarse best epoch {}", h.best_epoch);
        }
        Command::InferCoarse => {
            let n = pipeline::run_infer_coarse(&cfg, fold)?;
            println!("fold {fold}: {n} coarse predictions");
        }
        Command::BuildPatches => {
            let (train, val) = pipeline::run_build_patches(&cfg, fold)?;
            println!(
                "fold {fold}: {} train patches (expected {}), {} val patches",
                train.patch_count(),
                train.expected(),
                val.patch_count()
            );
        }
        Command::TrainRefine => {
            let h = pipeline::run_train_refine(&cfg, fold)?;
            println!("fold {fold}: refine best epoch {}", h.best_epoch);
        }
        Command::Infer => {
            let ids = pipeline::run_infer(&cfg, fold)?;
            println!("fold {fold}: predicted {} test cases", ids.len());
        }
        Command::Evaluate { pred, gt } => {
            let reports = match (pred, gt) {
                (Some(p), Some(g)) => {
                    let r = pipeline::evaluate_dirs(p, g, None, "pred")?;
                    let dir = cli.out.clone().unwrap_or_else(|| p.join("report"));
                    cascade_seg::metrics::write_reports(&dir, "dice", std::slice::from_ref(&r))?;
                    vec![r]
                }
                _ => pipeline::run_evaluate(&cfg, fold, cli.out.as_deref())?,
            };
            print!("{}", cascade_seg::metrics::to_csv(&reports));
        }
    }
    Ok(())
}

/// One JSON line on stderr: `{"kind": ..., "message": ...}`.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<SegError>())
        .map_or("internal", SegError::kind);
    serde_json::json!({ "kind": kind, "message": format!("{err:#}") }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
