//! Run configuration, model assembly, training, checkpoints and inference.

mod model;
mod optim;
mod train;

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use model::{Model, ModelConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    evaluate_model, load_run_data, predict_split, train, train_on, Checkpoint, CheckpointMeta, EpochRecord,
    RunData, TrainOutcome,
};

use crate::cfam::{CfamConfig, CfamMode};
use crate::datamodel::{EntitySchema, SplitName, NUTRITION_ENTITIES};
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::features::BackboneConfig;
use crate::objectives::LossConfig;
use crate::recognizer::AttentionConfig;
use crate::synthgen::{default_grammar, SynthConfig, ValueForm, ValueGrammar};

const BENCHMARK_SPLIT_PROB: f64 = 0.8;
const BENCHMARK_IMAGE_SIZE: [usize; 2] = [128, 112];
const BENCHMARK_MAX_CHARS: usize = 16;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "VIE_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    /// Ground-truth boxes stand in for the detector.
    #[default]
    OracleBoxes,
    TrainedDetector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Synthetic train/test splits generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    /// Size of the schema; entities are the first `num_entities` built-in
    /// nutrition fields.
    pub num_entities: usize,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    pub train: SynthConfig,
    #[serde(default)]
    pub test: Option<SynthConfig>,
}

fn default_max_chars() -> usize {
    24
}

impl SynthData {
    /// Train and test splits over the first `num_entities` nutrition
    /// entities; the test seed is offset so the splits never share samples.
    pub fn new(num_entities: usize, num_train: usize, num_test: usize, image_size: [usize; 2], seed: u64) -> Self {
        let subset: Vec<String> = NUTRITION_ENTITIES[..num_entities.min(NUTRITION_ENTITIES.len())]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let train = SynthConfig::new(num_train, image_size, subset.clone(), seed);
        let test = (num_test > 0).then(|| {
            let mut t = SynthConfig::new(num_test, image_size, subset, seed.wrapping_add(1 << 32));
            t.split = SplitName::Test;
            t
        });
        SynthData {
            num_entities,
            max_chars: default_max_chars(),
            train,
            test,
        }
    }

    pub fn schema(&self) -> Result<EntitySchema> {
        EntitySchema::nutrition(self.num_entities, self.max_chars)
    }
}

fn default_eval_every() -> usize {
    1
}

/// Everything a training run needs; serialized as one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset directory with `annotations.jsonl` and `schema.json`.
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    /// Used when `train_data` is absent.
    #[serde(default)]
    pub synth: Option<SynthData>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the
    /// last one).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_data: None,
            test_data: None,
            synth: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerKind::default(),
            lr_start: 2e-4,
            lr_end: 2e-6,
            grad_clip: None,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            eval_every: default_eval_every(),
            eval: EvalOptions::default(),
            precision: Precision::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.train_data.is_none() && self.synth.is_none() {
            return Err(Error::Config("either train_data or synth must be given".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Reads a config file and applies the [`SEED_ENV`] override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Desk-scale model: narrow backbone, `C = 64`, Adam.
    pub fn desk(synth: SynthData, epochs: usize, seed: u64) -> Self {
        RunConfig {
            synth: Some(synth),
            model: ModelConfig {
                backbone: BackboneConfig {
                    channels: [16, 32, 64, 64],
                    strides: [1, 2, 2, 1],
                },
                attention: AttentionConfig {
                    heads: 4,
                    width: 64,
                    layers: 2,
                },
                cfam_config: CfamConfig {
                    heads: 4,
                    ..CfamConfig::default()
                },
                ..ModelConfig::default()
            },
            optimizer: OptimizerKind::adam(),
            lr_start: 2e-3,
            lr_end: 2e-5,
            grad_clip: Some(5.0),
            epochs,
            batch_size: 1,
            seed,
            eval_every: epochs.max(1),
            ..RunConfig::default()
        }
    }

    /// Overfit setting: 32 training images with 5 entities.
    pub fn overfit(seed: u64) -> Self {
        let synth = SynthData::new(5, 32, 0, [160, 144], seed);
        RunConfig::desk(synth, 50, seed)
    }

    /// Ablation benchmark: 256 training and 64 test images, 8 entities.
    /// Most images carry one entity whose key and value sit on separate
    /// lines, so tagging the value line needs context from other lines.
    /// Values use the plain `12g` form so lines stay short enough for the
    /// recognizer to generalize within the epoch budget.
    pub fn standard_benchmark(seed: u64, cfam: CfamMode, lambda: f64) -> Self {
        let mut synth = SynthData::new(8, 256, 64, BENCHMARK_IMAGE_SIZE, seed);
        synth.max_chars = BENCHMARK_MAX_CHARS;
        for split in std::iter::once(&mut synth.train).chain(synth.test.as_mut()) {
            split.split_prob = BENCHMARK_SPLIT_PROB;
            split.value_grammar = split
                .entity_subset
                .iter()
                .map(|e| {
                    let grammar = ValueGrammar {
                        forms: vec![ValueForm::Plain],
                        ..default_grammar(e)
                    };
                    (e.clone(), grammar)
                })
                .collect();
        }
        let mut cfg = RunConfig::desk(synth, 16, seed);
        cfg.model.cfam = cfam;
        cfg.loss.lambda = lambda;
        cfg
    }
}

/// Linear interpolation from `lr_start` at step 0 to `lr_end` at
/// `total_steps`; `lr_start` when there are no steps.
pub fn lr_at(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_start + (lr_end - lr_start) * frac
}

#[cfg(test)]
mod tests;
