//! `segkit` — command-line frontend for the segmentation toolkit.
//!
//! Exit codes: 0 success, 1 validation/data errors, 2 usage errors.
//! Diagnostics go to stderr; machine-readable output goes to stdout or to
//! files named by `--out` flags, never anywhere else.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};

use segkit::coco;
use segkit::eval::{evaluate, EvalParams, IouKind};
use segkit::harness::{self, PipelineConfig};
use segkit::postprocess::{soft_nms, SoftNmsParams};
use segkit::swa;

#[derive(Parser)]
#[command(name = "segkit", version, about = "Instance-segmentation toolkit: augmentation, fusion, evaluation")]
struct Cli {
    /// Seed for randomized commands; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Verbosity of diagnostics on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Augment a dataset: photometric jitter, copy-paste, scale/crop/pad/flip.
    /// Writes PNGs plus an `annotations.json` into the output directory.
    Augment {
        /// Augmentation config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// COCO ground-truth JSON.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the input images; defaults to the dataset's
        /// directory.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Soft-NMS over a results file, applied per image.
    Postprocess {
        /// Input results JSON.
        #[arg(long = "in", value_name = "RESULTS")]
        input: PathBuf,
        /// Output results JSON.
        #[arg(long)]
        out: PathBuf,
        /// Suppression parameters JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Average checkpoint archives into one.
    Swa {
        /// Input archives, two or more for a real average.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output archive.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results file against ground truth; prints the report JSON.
    Eval {
        /// COCO ground-truth JSON.
        #[arg(long)]
        gt: PathBuf,
        /// COCO results JSON.
        #[arg(long)]
        results: PathBuf,
        /// Overlap kind for matching (default mask).
        #[arg(long, value_enum)]
        iou_kind: Option<IouKindArg>,
    },
    /// Full run: detector views, calibration, TTA fusion, evaluation.
    /// Prints the report JSON.
    Pipeline {
        /// Pipeline config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Write the merged detections here, overriding the config's
        /// `results_out`.
        #[arg(long)]
        results_out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks; one line per check.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum IouKindArg {
    Mask,
    Box,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.log_level {
            LogLevel::Error => LevelFilter::Error,
            LogLevel::Warn => LevelFilter::Warn,
            LogLevel::Info => LevelFilter::Info,
            LogLevel::Debug => LevelFilter::Debug,
        })
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Augment {
            config,
            dataset,
            out,
            images,
        } => {
            let cfg = match config {
                Some(path) => parse_strict(&read(&path)?, &path)?,
                None => segkit::augment::AugmentConfig::default(),
            };
            let gt = coco::load_coco(&dataset)?;
            let images_dir = images.unwrap_or_else(|| {
                dataset
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            std::fs::create_dir_all(&out)?;
            let seed = cli.seed.unwrap_or(0);
            let augmented = segkit::augment::run_augment(&gt, &images_dir, &out, &cfg, seed)?;
            let ann_path = out.join("annotations.json");
            coco::write_coco(&augmented, &ann_path)?;
            info!(
                "augmented {} images into {}, annotations in {}",
                augmented.images.len(),
                out.display(),
                ann_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Postprocess { input, out, config } => {
            let params: SoftNmsParams = match config {
                Some(path) => parse_strict(&read(&path)?, &path)?,
                None => SoftNmsParams::default(),
            };
            let dets = coco::load_results(&input)?;
            // Suppress per image, in order of first appearance.
            let mut order = Vec::new();
            let mut by_image: HashMap<u64, Vec<coco::Detection>> = HashMap::new();
            for d in dets {
                if !by_image.contains_key(&d.image_id) {
                    order.push(d.image_id);
                }
                by_image.entry(d.image_id).or_default().push(d);
            }
            let mut kept = Vec::new();
            for id in order {
                kept.extend(soft_nms(&by_image[&id], &params));
            }
            coco::write_results(&kept, &out)?;
            info!("wrote {} detections to {}", kept.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Swa { inputs, out } => {
            let checkpoints = inputs
                .iter()
                .map(|p| swa::read_archive(p))
                .collect::<Result<Vec<_>, _>>()?;
            let mean = swa::average_checkpoints(&checkpoints)?;
            swa::write_archive(&mean, &out)?;
            info!(
                "averaged {} archives ({} tensors) into {}",
                checkpoints.len(),
                mean.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            gt,
            results,
            iou_kind,
        } => {
            let dataset = coco::load_coco(&gt)?;
            let dets = coco::load_results(&results)?;
            let mut params = EvalParams::default();
            if let Some(kind) = iou_kind {
                params.iou_kind = match kind {
                    IouKindArg::Mask => IouKind::Mask,
                    IouKindArg::Box => IouKind::Box,
                };
            }
            let report = evaluate(&dets, &dataset, &params)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline {
            config,
            results_out,
        } => {
            let mut cfg = PipelineConfig::from_json(&read(&config)?)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(path) = results_out {
                cfg.results_out = Some(path);
            }
            let output = harness::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string(&output.report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let results = segkit::selftest::run_all();
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(()) => println!("ok   {}", r.name),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL {}: {msg}", r.name);
                    }
                }
            }
            println!("selftest: {} passed, {failed} failed", results.len() - failed);
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Box<dyn std::error::Error>> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// Strict JSON parse for config files: unknown keys are errors and messages
/// carry the path to the offending value.
fn parse_strict<T: serde::de::DeserializeOwned>(
    text: &str,
    path: &PathBuf,
) -> Result<T, Box<dyn std::error::Error>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| format!("{} at {}: {}", path.display(), e.path(), e.inner()).into())
}
