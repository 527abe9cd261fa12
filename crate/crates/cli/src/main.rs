use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use vie_core::cfam::CfamMode;
use vie_core::datamodel::{load_dataset, write_dataset, LoadOptions, SplitName};
use vie_core::evaluation::ImagePrediction;
use vie_core::pipeline::{evaluate_model, load_run_data, train, BoxMode, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "vie", version, about = "Visual information extraction: synthesize, train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a built-in run config as JSON.
    Preset {
        #[arg(value_enum)]
        name: PresetName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instance-entity mode for the benchmark preset.
        #[arg(long, value_enum, default_value_t = Mode::On)]
        cfam: Mode,
        /// Contrastive loss weight for the benchmark preset.
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
    },
    /// Write the synthetic splits of a run config to disk.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes loss.csv, metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on an annotated dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run inference and write one JSON object per image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Glob of raw images; needs a model trained with a detector.
        #[arg(long, required_unless_present = "data")]
        images: Option<String>,
        /// Annotated dataset; its boxes feed oracle-box models.
        #[arg(long, conflicts_with = "images")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    /// 32 training images, 5 entities.
    Overfit,
    /// 256 training and 64 test images, 8 entities.
    Benchmark,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    On,
    Off,
    ClassifyHead,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Preset {
            name,
            seed,
            cfam,
            lambda,
        } => {
            let cfg = match name {
                PresetName::Overfit => RunConfig::overfit(seed),
                PresetName::Benchmark => {
                    let mode = match cfam {
                        Mode::On => CfamMode::On,
                        Mode::Off => CfamMode::Off,
                        Mode::ClassifyHead => CfamMode::ClassifyHead,
                    };
                    RunConfig::standard_benchmark(seed, mode, lambda)
                }
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Synth { config, out } => synth(&config, &out),
        Command::Train { config, out } => run_train(&config, &out),
        Command::Eval { ckpt, data, json } => eval(&ckpt, &data, json.as_deref()),
        Command::Predict {
            ckpt,
            images,
            data,
            out,
        } => predict(&ckpt, images.as_deref(), data.as_deref(), &out),
    }
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if cfg.synth.is_none() {
        bail!("{} has no `synth` section", config.display());
    }
    let data = load_run_data(&cfg)?;
    write_dataset(&data.train, &data.schema, out.join("train"))?;
    if let Some(test) = &data.test {
        write_dataset(test, &data.schema, out.join("test"))?;
    }
    log::info!(
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.as_ref().map_or(0, |t| t.len()),
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let outcome = train(&cfg, Some(out))?;
    match outcome.best {
        Some((epoch, report)) => {
            println!("best epoch {epoch}");
            print!("{}", report.table());
        }
        None => println!("no evaluation was run"),
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, json_out: Option<&Path>) -> Result<()> {
    let (model, meta) = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let split = load_dataset(
        data,
        &model.schema,
        LoadOptions {
            split: SplitName::Test,
            ..LoadOptions::default()
        },
    )?;
    let report = evaluate_model(&model, &split, &meta.config.eval)?;
    print!("{}", report.table());
    if let Some(path) = json_out {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn prediction_json(image: &str, pred: &ImagePrediction) -> serde_json::Value {
    json!({
        "image": image,
        "entities": pred.entities,
        "boxes": pred.boxes,
        "texts": pred.texts,
    })
}

fn predict(ckpt: &Path, images: Option<&str>, data: Option<&Path>, out: &Path) -> Result<()> {
    let (model, _) = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let (mut ok, mut failed) = (0usize, 0usize);
    if let Some(dir) = data {
        let split = load_dataset(dir, &model.schema, LoadOptions::default())?;
        for sample in &split.samples {
            let boxes = (model.config.mode == BoxMode::OracleBoxes).then(|| sample.boxes());
            match model.predict(&sample.image, boxes.as_deref()) {
                Ok(pred) => {
                    writeln!(w, "{}", prediction_json(&sample.id, &pred))?;
                    ok += 1;
                }
                Err(e) => {
                    log::error!("{}: {e}", sample.id);
                    failed += 1;
                }
            }
        }
    } else if let Some(pattern) = images {
        if model.config.mode == BoxMode::OracleBoxes {
            bail!("this checkpoint uses oracle boxes; pass --data with an annotated dataset instead of --images");
        }
        for entry in glob::glob(pattern).with_context(|| format!("bad glob {pattern:?}"))? {
            let path = match entry {
                Ok(p) => p,
                Err(e) => {
                    log::error!("{e}");
                    failed += 1;
                    continue;
                }
            };
            let result = image::open(&path)
                .map_err(anyhow::Error::from)
                .and_then(|img| Ok(model.predict(&img.to_rgb8(), None)?));
            match result {
                Ok(pred) => {
                    writeln!(w, "{}", prediction_json(&path.display().to_string(), &pred))?;
                    ok += 1;
                }
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    failed += 1;
                }
            }
        }
    }
    w.flush()?;
    log::info!("{ok} predictions written to {}, {failed} failed", out.display());
    Ok(())
}
