use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, BoxMode, Model, Optimizer, RunConfig};
use crate::datamodel::{load_dataset, DatasetSplit, DocumentSample, EntitySchema, LoadOptions, SplitName, SCHEMA_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport, ImagePrediction};
use crate::objectives::{loss_total, LossParts, LossReport};
use crate::synthgen::generate;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIM_FILE: &str = "optim.safetensors";
pub const META_FILE: &str = "meta.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Schema plus the splits a run trains and evaluates on.
#[derive(Clone, Debug)]
pub struct RunData {
    pub schema: EntitySchema,
    pub train: DatasetSplit,
    pub test: Option<DatasetSplit>,
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    if let Some(dir) = &cfg.train_data {
        let schema = EntitySchema::load(dir.join(SCHEMA_FILE))?;
        let train = load_dataset(dir, &schema, LoadOptions::default())?;
        let test = match &cfg.test_data {
            Some(t) => {
                let other = EntitySchema::load(t.join(SCHEMA_FILE))?;
                if other != schema {
                    return Err(Error::Config(format!(
                        "schema of {} differs from the training schema",
                        t.display()
                    )));
                }
                Some(load_dataset(
                    t,
                    &schema,
                    LoadOptions {
                        split: SplitName::Test,
                        ..LoadOptions::default()
                    },
                )?)
            }
            None => None,
        };
        return Ok(RunData { schema, train, test });
    }
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("either train_data or synth must be given".into()))?;
    let schema = synth.schema()?;
    let train = generate(&synth.train, &schema)?;
    let test = synth.test.as_ref().map(|t| generate(t, &schema)).transpose()?;
    Ok(RunData { schema, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Per-step reports averaged over the epoch.
    pub loss: LossReport,
    pub lr: f64,
    pub eval: Option<EvalReport>,
}

pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch and report with the highest IE F1; earlier epochs win ties.
    pub best: Option<(usize, EvalReport)>,
}

/// Loads the data named by `cfg` and trains. With `out_dir`, writes the
/// loss CSV, per-evaluation metrics and the best and last checkpoints.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_run_data(cfg)?;
    train_on(cfg, &data, out_dir)
}

fn mean_report(reports: &[LossReport], cfg: &RunConfig) -> Result<LossReport> {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport::combine(avg(|r| r.det), avg(|r| r.rec), avg(|r| r.ie), avg(|r| r.contrastive), &cfg.loss)
}

fn batch_parts(model: &Model, samples: &[&DocumentSample], cfg: &RunConfig) -> Result<LossParts> {
    let mut sum: Option<LossParts> = None;
    for sample in samples {
        let p = model.losses(sample, &cfg.loss)?;
        sum = Some(match sum {
            None => p,
            Some(s) => LossParts {
                det: (s.det + p.det)?,
                rec: (s.rec + p.rec)?,
                ie: (s.ie + p.ie)?,
                contrastive: (s.contrastive + p.contrastive)?,
            },
        });
    }
    let s = sum.ok_or_else(|| Error::Input("empty batch".into()))?;
    let k = samples.len() as f64;
    Ok(LossParts {
        det: (s.det / k)?,
        rec: (s.rec / k)?,
        ie: (s.ie / k)?,
        contrastive: (s.contrastive / k)?,
    })
}

/// Sample order of epoch `epoch`; depends only on the seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn train_on(cfg: &RunConfig, data: &RunData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(&cfg.model, &data.schema, cfg.precision.dtype(), cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, model.store.names(), model.store.vars(), cfg.grad_clip)?;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let eval_split = data.test.as_ref().unwrap_or(&data.train);

    let mut loss_csv = None;
    let mut metrics = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("config.json"), to_json(cfg)?).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        loss_csv = Some((f, path));
        let path = dir.join(METRICS_FILE);
        metrics = Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path));
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut reports = Vec::with_capacity(steps_per_epoch);
        let mut lr = cfg.lr_start;
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(step, total_steps, cfg.lr_start, cfg.lr_end);
            let samples: Vec<&DocumentSample> = chunk.iter().map(|&i| &data.train.samples[i]).collect();
            let parts = batch_parts(&model, &samples, cfg)?;
            let (total, report) = loss_total(&parts, &cfg.loss).inspect_err(|e| {
                let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
                log::error!("epoch {} step {step}: {e}; batch {ids:?}", epoch + 1);
            })?;
            let grads = total.backward()?;
            optimizer.step(&grads, lr)?;
            reports.push(report);
            step += 1;
        }
        let loss = mean_report(&reports, cfg)?;
        if let Some((f, path)) = &mut loss_csv {
            writeln!(f, "{}", loss.csv_row(epoch + 1)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::info!(
            "epoch {}/{}: total {:.4} rec {:.4} ie {:.4} contrastive {:.4}",
            epoch + 1,
            cfg.epochs,
            loss.total,
            loss.rec,
            loss.ie,
            loss.contrastive
        );
        let last = epoch + 1 == cfg.epochs;
        let eval = if (epoch + 1) % cfg.eval_every == 0 || last {
            let report = evaluate_model(&model, eval_split, &cfg.eval)?;
            log::info!(
                "epoch {}: det {:.4} rec {:.4} ie {:.4}",
                epoch + 1,
                report.det_f1,
                report.rec_f1,
                report.ie_f1
            );
            if let Some((f, path)) = &mut metrics {
                let line = serde_json::json!({ "epoch": epoch + 1, "report": report });
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            let improved = best.as_ref().is_none_or(|(_, b)| report.ie_f1 > b.ie_f1);
            if improved {
                best = Some((epoch + 1, report.clone()));
                if let Some(dir) = out_dir {
                    let meta = CheckpointMeta::new(cfg, &model, epoch + 1, optimizer.steps(), Some(report.clone()));
                    Checkpoint::save(&dir.join("best"), &model, Some(&optimizer), &meta)?;
                }
            }
            Some(report)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            lr,
            eval,
        });
    }
    if let Some(dir) = out_dir {
        let meta = CheckpointMeta::new(cfg, &model, cfg.epochs, optimizer.steps(), None);
        Checkpoint::save(&dir.join("last"), &model, Some(&optimizer), &meta)?;
    }
    Ok(TrainOutcome { model, history, best })
}

/// Predictions for every sample; oracle-box models read the gold boxes.
pub fn predict_split(model: &Model, split: &DatasetSplit) -> Result<Vec<ImagePrediction>> {
    split
        .samples
        .iter()
        .map(|s| {
            let boxes = (model.config.mode == BoxMode::OracleBoxes).then(|| s.boxes());
            model.predict(&s.image, boxes.as_deref())
        })
        .collect()
}

pub fn evaluate_model(model: &Model, split: &DatasetSplit, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = predict_split(model, split)?;
    Ok(evaluate(&preds, &split.samples, opts))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::json("serialization", e))
}

/// Everything besides tensors that a checkpoint records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub optimizer_steps: usize,
    pub config: RunConfig,
    pub config_sha256: String,
    pub schema: EntitySchema,
    /// Shuffling depends only on the seed and the epoch, so these two
    /// determine the data order of any resumed epoch.
    pub rng_seed: u64,
    pub next_epoch: usize,
    pub eval: Option<EvalReport>,
}

impl CheckpointMeta {
    pub fn new(cfg: &RunConfig, model: &Model, epoch: usize, steps: usize, eval: Option<EvalReport>) -> Self {
        CheckpointMeta {
            epoch,
            optimizer_steps: steps,
            config: cfg.clone(),
            config_sha256: cfg.hash(),
            schema: model.schema.clone(),
            rng_seed: cfg.seed,
            next_epoch: epoch,
            eval,
        }
    }
}

/// Directory layout: parameters, optimizer slots and `meta.json`.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save(dir: &Path, model: &Model, optimizer: Option<&Optimizer>, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.store.save(dir.join(PARAMS_FILE))?;
        if let Some(opt) = optimizer {
            candle_core::safetensors::save(&opt.state_tensors()?, dir.join(OPTIM_FILE))?;
        }
        let path = dir.join(META_FILE);
        fs::write(&path, to_json(meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if meta.config.hash() != meta.config_sha256 {
            return Err(Error::Checkpoint(format!("config hash mismatch in {}", path.display())));
        }
        Ok(meta)
    }

    /// Rebuilds the model from the stored config and loads its parameters.
    pub fn load(dir: &Path) -> Result<(Model, CheckpointMeta)> {
        let meta = Self::load_meta(dir)?;
        let model = Model::new(
            &meta.config.model,
            &meta.schema,
            meta.config.precision.dtype(),
            meta.config.seed,
        )?;
        model.store.load(dir.join(PARAMS_FILE))?;
        Ok((model, meta))
    }

    /// Optimizer with the slots saved next to `model`'s parameters.
    pub fn load_optimizer(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<Optimizer> {
        let mut opt = Optimizer::new(
            meta.config.optimizer,
            model.store.names(),
            model.store.vars(),
            meta.config.grad_clip,
        )?;
        let tensors = candle_core::safetensors::load(dir.join(OPTIM_FILE), model.store.device())?;
        opt.load_state(&tensors, meta.optimizer_steps)?;
        Ok(opt)
    }
}
