//! `fsad`: build splits, generate the synthetic dataset, train, evaluate,
//! explain and embed from the command line.
//!
//! Exit status is 0 on success, 2 for usage errors and 1 for runtime failures,
//! which are reported on stderr as a single JSON line `{"error": kind, "message": …}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use fsad_core::checkpoint::Checkpoint;
use fsad_core::config::{RunConfig, TrainConfig};
use fsad_core::data::{self, generate_synthetic, make_kshot_split, scan_dataset, KShotSplit, SyntheticConfig};
use fsad_core::eval::{self, evaluate};
use fsad_core::interpret::{explain, export_heatmap};
use fsad_core::model::AnomalyModel;
use fsad_core::train::{train, write_log_csv, TrainOutcome};

#[derive(Parser)]
#[command(name = "fsad", version, about = "Few-shot interpretable anomaly detection")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a k-shot split of an MVTec-style dataset category.
    Split {
        /// Dataset root holding `<category>/train`, `test` and `ground_truth`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic defect dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        normals: usize,
        #[arg(long, default_value_t = 40)]
        anomalies: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "synthetic")]
        category: String,
    },
    /// Train a model on a split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        split: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train once per lambda in `start:stop:step` (inclusive), one subdirectory each.
        #[arg(long, value_name = "START:STOP:STEP")]
        sweep_lambda: Option<String>,
    },
    /// Evaluate a checkpoint on the test items of a split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Report path; defaults to `report.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the imputation noise of the ROAD score.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write interpretation heatmaps for images.
    Explain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Output directory; defaults to each image's own directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export pooled embeddings of a split's images as CSV.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to embed with; without it the untrained model from the config is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also embed the training images of the split.
        #[arg(long)]
        include_train: bool,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn apply(&self, run: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            run.apply_text(&text)?;
        }
        for item in &self.overrides {
            let Some((key, value)) = item.split_once('=') else {
                bail!(fsad_core::Error::Config(format!("override '{item}' is not KEY=VALUE")));
            };
            run.set(key.trim(), value)?;
        }
        Ok(())
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut run = RunConfig::default();
        self.apply(&mut run)?;
        run.validate()?;
        Ok(run)
    }

    /// Run config for a trained model: training keys come from the checkpoint.
    fn resolve_for(&self, checkpoint: &Checkpoint) -> Result<RunConfig> {
        let mut run = RunConfig {
            train: checkpoint.config.clone(),
            ..RunConfig::default()
        };
        self.apply(&mut run)?;
        let weights = run.train.backbone_weights.clone();
        if run.train != checkpoint.config {
            info!("training keys are taken from the checkpoint; overrides other than backbone_weights are ignored");
        }
        run.train = TrainConfig {
            backbone_weights: weights,
            ..checkpoint.config.clone()
        };
        run.validate()?;
        Ok(run)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// `<artifact stem>.config.json` beside an artifact, describing how it was produced.
fn snapshot_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("config.json")
}

fn write_snapshot(path: &Path, command: &str, run: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let snapshot = json!({ "command": command, "arguments": extra, "run_config": run });
    let mut text = serde_json::to_string_pretty(&snapshot)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fsad_core::Error::Config(format!("sweep '{spec}' is not START:STOP:STEP")))?;
    let [start, stop, step] = parts[..] else {
        bail!(fsad_core::Error::Config(format!("sweep '{spec}' is not START:STOP:STEP")));
    };
    if step.is_nan() || step <= 0.0 || stop < start || start < 0.0 {
        bail!(fsad_core::Error::Config(format!(
            "sweep '{spec}' needs 0 <= START <= STOP and STEP > 0"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn save_run(out: &Path, outcome: &TrainOutcome, run: &RunConfig) -> Result<()> {
    create_dir(out)?;
    let bin = out.join("model.bin");
    outcome.checkpoint.save(&bin)?;
    write_log_csv(&outcome.log, &out.join("train_log.csv"))?;
    write_snapshot(
        &snapshot_path(&bin),
        "train",
        run,
        json!({ "stop": outcome.stop, "best_epoch": outcome.best_epoch, "epochs_run": outcome.log.len() }),
    )
}

fn run_train(cfg: &ConfigArgs, split_path: &Path, out: &Path, seed: Option<u64>, sweep: Option<&str>) -> Result<()> {
    let mut run = cfg.resolve()?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run.validate()?;
    let split = KShotSplit::load(split_path)?;
    let Some(sweep) = sweep else {
        let outcome = train(&split, &run.train)?;
        save_run(out, &outcome, &run)?;
        println!(
            "{}",
            json!({ "checkpoint": out.join("model.bin"), "best_epoch": outcome.best_epoch, "stop": outcome.stop })
        );
        return Ok(());
    };
    create_dir(out)?;
    let mut table = String::from("lambda,best_epoch,best_val_total,epochs_run\n");
    for lambda in parse_sweep(sweep)? {
        let mut r = run.clone();
        r.train.lambda = lambda;
        let outcome = train(&split, &r.train)?;
        let dir = out.join(format!("lambda_{lambda}"));
        save_run(&dir, &outcome, &r)?;
        let val = outcome.checkpoint.best_val_loss.map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!("{lambda},{},{val},{}\n", outcome.best_epoch, outcome.log.len()));
        info!("lambda {lambda}: best epoch {}, validation {val}", outcome.best_epoch);
    }
    let path = out.join("sweep.csv");
    fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
    write_snapshot(&snapshot_path(&path), "train", &run, json!({ "sweep_lambda": sweep }))?;
    println!("{}", json!({ "sweep": path }));
    Ok(())
}

fn load_model(checkpoint: &Path, cfg: &ConfigArgs) -> Result<(AnomalyModel, RunConfig)> {
    let ck = Checkpoint::load(checkpoint)?;
    let run = cfg.resolve_for(&ck)?;
    let ck = Checkpoint {
        config: run.train.clone(),
        ..ck
    };
    Ok((ck.to_model()?, run))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Split {
            dataset,
            category,
            k,
            seed,
            out,
        } => {
            let index = scan_dataset(&absolute(&dataset), &category)?;
            let split = make_kshot_split(&index, k, seed)?;
            split.save(&out)?;
            let mut run = RunConfig::default();
            run.train.k = k;
            run.train.seed = seed;
            write_snapshot(&snapshot_path(&out), "split", &run, json!({ "dataset": absolute(&dataset), "category": category }))?;
            println!(
                "{}",
                json!({ "split": out, "train_normals": split.train_normals.len(),
                        "train_anomalies": split.train_anomalies.len(), "test": split.test.len() })
            );
        }
        Command::Synth {
            out,
            seed,
            normals,
            anomalies,
            size,
            category,
        } => {
            let config = SyntheticConfig {
                category,
                ..SyntheticConfig::new(normals, anomalies, size, seed)
            };
            let index = generate_synthetic(&config, &out)?;
            let mut run = RunConfig::default();
            run.train.image_size = size;
            run.train.seed = seed;
            write_snapshot(&out.join("synth.config.json"), "synth", &run, serde_json::to_value(&config)?)?;
            println!(
                "{}",
                json!({ "dataset": out.join(&config.category), "normals": index.normal_train.len(),
                        "test": index.test_items.len(), "anomalies": index.anomaly_count() })
            );
        }
        Command::Train {
            cfg,
            split,
            out,
            seed,
            sweep_lambda,
        } => run_train(&cfg, &split, &out, seed, sweep_lambda.as_deref())?,
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
            seed,
        } => {
            let (model, run) = load_model(&checkpoint, &cfg)?;
            let split = KShotSplit::load(&split)?;
            let report = evaluate(&model, &split, &run, seed)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("report.json"));
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            write_snapshot(&snapshot_path(&out), "eval", &run, json!({ "checkpoint": checkpoint, "seed": seed }))?;
            println!(
                "{}",
                json!({ "report": out, "image_auroc": report.image_auroc, "pixel_auroc": report.pixel_auroc,
                        "road": report.road, "recall_at_1": report.recall_at_1, "map_at_r": report.map_at_r })
            );
        }
        Command::Explain {
            cfg,
            checkpoint,
            images,
            out,
        } => {
            let (model, run) = load_model(&checkpoint, &cfg)?;
            let size = run.train.image_size;
            for path in &images {
                let image = data::load_image(path, size)?;
                let heat = explain(&model, &image, &run.interpret)?;
                let dir = out.clone().unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
                create_dir(&dir)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                let written = export_heatmap(&heat, &dir, &stem)?;
                write_snapshot(
                    &dir.join(format!("{stem}.heat.config.json")),
                    "explain",
                    &run,
                    json!({ "checkpoint": checkpoint, "image": path }),
                )?;
                println!(
                    "{}",
                    json!({ "image": path, "heatmap": written[0], "s0": heat.s0, "s1": heat.s1,
                            "low_score": heat.low_score() })
                );
            }
        }
        Command::Embed {
            cfg,
            checkpoint,
            split,
            out,
            include_train,
        } => {
            let (model, run) = match &checkpoint {
                Some(ck) => load_model(ck, &cfg)?,
                None => {
                    let run = cfg.resolve()?;
                    (AnomalyModel::new(&run.train)?, run)
                }
            };
            let split = KShotSplit::load(&split)?;
            let mut items: Vec<(PathBuf, u8)> = split.test.iter().map(|t| (split.resolve(&t.path), t.label)).collect();
            if include_train {
                items.extend(split.train_normals.iter().map(|p| (split.resolve(p), 0)));
                items.extend(split.train_anomalies.iter().map(|t| (split.resolve(&t.path), 1)));
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            eval::export_embeddings(&model, &items, run.train.image_size, &out)?;
            write_snapshot(&snapshot_path(&out), "embed", &run, json!({ "checkpoint": checkpoint, "include_train": include_train }))?;
            println!("{}", json!({ "embeddings": out, "rows": items.len() }));
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    message.replace('\n', " ")
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<fsad_core::Error>())
        .map(fsad_core::Error::kind)
        .unwrap_or("runtime")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = describe(&e);
            eprintln!("{}", json!({ "error": error_kind(&e), "message": message }));
            ExitCode::from(1)
        }
    }
}
