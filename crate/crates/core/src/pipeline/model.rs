use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::BoxMode;
use crate::cfam::{build_similarity_target, Cfam, CfamConfig, CfamMode, ClassifyHead};
use crate::datamodel::{BBox, DocumentSample, EntitySchema, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::ImagePrediction;
use crate::extraction::{decode_entities, gold_tags, FusedFeatures, Fusion, TagSet, Tagger};
use crate::features::{
    images_to_tensor, Backbone, BackboneConfig, DetectConfig, DetectionHead, FeatureMap, InstanceProjector,
    RoiAlignConfig,
};
use crate::nn::ParamStore;
use crate::objectives::{loss_contrastive, loss_ie, loss_rec, LossConfig, LossParts};
use crate::recognizer::{encode_targets, AttentionConfig, Recognizer};

fn default_detector_hidden() -> usize {
    64
}

/// Architecture choices; the model width `C` is `attention.width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: BoxMode,
    pub cfam: CfamMode,
    pub backbone: BackboneConfig,
    pub roi: RoiAlignConfig,
    pub attention: AttentionConfig,
    pub cfam_config: CfamConfig,
    pub detect: DetectConfig,
    #[serde(default = "default_detector_hidden")]
    pub detector_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: BoxMode::default(),
            cfam: CfamMode::default(),
            backbone: BackboneConfig::default(),
            roi: RoiAlignConfig::default(),
            attention: AttentionConfig::default(),
            cfam_config: CfamConfig::default(),
            detect: DetectConfig::default(),
            detector_hidden: default_detector_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.attention.width
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.dim() % 2 != 0 {
            return Err(Error::Config(format!("model width {} must be even", self.dim())));
        }
        if self.cfam == CfamMode::On && (self.cfam_config.heads == 0 || self.dim() % self.cfam_config.heads != 0) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} CFAM heads",
                self.dim(),
                self.cfam_config.heads
            )));
        }
        if self.backbone.channels.contains(&0) || self.backbone.strides.contains(&0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        if self.roi.cells() == 0 || self.roi.sampling_ratio == 0 {
            return Err(Error::Config("RoIAlign grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// The assembled network: backbone, optional detector, region projector,
/// recognizer, instance-entity module, fusion and tagger.
pub struct Model {
    pub config: ModelConfig,
    pub schema: EntitySchema,
    pub vocab: Vocab,
    pub tagset: TagSet,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub detector: Option<DetectionHead>,
    pub projector: InstanceProjector,
    pub recognizer: Recognizer,
    pub cfam: Option<Cfam>,
    pub classify: Option<ClassifyHead>,
    pub fusion: Fusion,
    pub tagger: Tagger,
}

impl Model {
    pub fn new(config: &ModelConfig, schema: &EntitySchema, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let c = config.dim();
        let m = schema.num_entities();
        let cf = config.backbone.out_channels();
        let vocab = Vocab::new(schema);
        let tagset = TagSet::new(m);
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone)?;
        let detector = match config.mode {
            BoxMode::TrainedDetector => Some(DetectionHead::new(&mut store, "detector", cf, config.detector_hidden)?),
            BoxMode::OracleBoxes => None,
        };
        let projector = InstanceProjector::new(&mut store, "projector", config.roi, cf, c)?;
        let recognizer = Recognizer::new(
            &mut store,
            "recognizer",
            &config.attention,
            vocab.len(),
            schema.max_chars + 1,
            (config.roi.pooled_h, config.roi.pooled_w),
            cf,
        )?;
        let cfam = match config.cfam {
            CfamMode::On => Some(Cfam::new(&mut store, "cfam", &config.cfam_config, c, m)?),
            _ => None,
        };
        let classify = match config.cfam {
            CfamMode::ClassifyHead => Some(ClassifyHead::new(&mut store, "classify", c, m)?),
            _ => None,
        };
        let fusion = Fusion::new(&mut store, "fusion", m, c)?;
        let tagger = Tagger::new(&mut store, "tagger", c, tagset)?;
        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            vocab,
            tagset,
            store,
            backbone,
            detector,
            projector,
            recognizer,
            cfam,
            classify,
            fusion,
            tagger,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn zero(&self) -> Result<Tensor> {
        Ok(Tensor::zeros((), self.dtype(), self.store.device())?)
    }

    pub fn features(&self, image: &RgbImage) -> Result<FeatureMap> {
        let x = images_to_tensor(&[image], self.dtype(), self.store.device())?;
        self.backbone.extract_features(&x)
    }

    /// Instance-entity adjustment and fusion. Returns the fused features
    /// and the similarity logits when the mode produces them.
    pub fn adjust(&self, instances: &Tensor, t: &Tensor, lengths: &[usize]) -> Result<(FusedFeatures, Option<Tensor>)> {
        match self.config.cfam {
            CfamMode::On => {
                let cfam = self.cfam.as_ref().expect("built with CFAM");
                let out = cfam.forward(instances)?;
                let fused = self.fusion.fuse(t, Some(&out.encoded), Some(&out.similarity), lengths)?;
                Ok((fused, Some(out.similarity)))
            }
            CfamMode::ClassifyHead => {
                let s = self.classify.as_ref().expect("built with a classification head").forward(instances)?;
                let fused = self.fusion.fuse(t, Some(instances), Some(&s), lengths)?;
                Ok((fused, Some(s)))
            }
            CfamMode::Off => Ok((self.fusion.fuse(t, Some(instances), None, lengths)?, None)),
        }
    }

    /// Unweighted loss terms for one annotated image. The detection term
    /// is zero without a detector; downstream stages always see the gold
    /// boxes during training.
    pub fn losses(&self, sample: &DocumentSample, loss: &LossConfig) -> Result<LossParts> {
        let fmap = self.features(&sample.image)?;
        let boxes = sample.boxes();
        let det = match &self.detector {
            Some(head) => head.loss(&fmap, std::slice::from_ref(&boxes), &self.config.detect)?,
            None => self.zero()?,
        };
        if boxes.is_empty() {
            return Ok(LossParts {
                det,
                rec: self.zero()?,
                ie: self.zero()?,
                contrastive: self.zero()?,
            });
        }
        let inst = self.projector.roi_pool(&fmap, 0, &boxes)?;
        let texts: Vec<&str> = sample.instances.iter().map(|i| i.transcript.as_str()).collect();
        let targets = encode_targets(&texts, &self.vocab, self.recognizer.l_max(), self.dtype(), self.store.device())?;
        let rec_out = self.recognizer.forward_teacher(&inst.grid, &targets, &self.vocab)?;
        let (rec, _) = loss_rec(&rec_out.logits, &targets.targets, &targets.mask)?;
        let (fused, s) = self.adjust(&inst.tensor, &rec_out.features, &targets.lengths)?;
        let gold = gold_tags(sample, &self.schema, &self.tagset)?;
        let ie = loss_ie(&self.tagger.nll(&fused, &gold)?)?;
        let contrastive = match s {
            Some(s) if loss.lambda != 0.0 => {
                let order: Vec<usize> = (0..boxes.len()).collect();
                let target = build_similarity_target(sample, &order, self.schema.num_entities(), self.dtype(), self.store.device())?;
                loss_contrastive(&s, &target, loss)?
            }
            _ => self.zero()?,
        };
        Ok(LossParts { det, rec, ie, contrastive })
    }

    /// End-to-end inference. In oracle mode `boxes` must be supplied; with
    /// a detector they override detection when given.
    pub fn predict(&self, image: &RgbImage, boxes: Option<&[BBox]>) -> Result<ImagePrediction> {
        let fmap = self.features(image)?;
        let boxes: Vec<BBox> = match (boxes, &self.detector) {
            (Some(b), _) => b.to_vec(),
            (None, Some(head)) => head
                .detect(&fmap, &self.config.detect)?
                .pop()
                .map(|d| d.bboxes())
                .unwrap_or_default(),
            (None, None) => {
                return Err(Error::Input(
                    "oracle-box model needs ground-truth boxes; train with a detector for raw images".into(),
                ))
            }
        };
        if boxes.is_empty() {
            return Ok(ImagePrediction::default());
        }
        let inst = self.projector.roi_pool(&fmap, 0, &boxes)?;
        let rec = self.recognizer.recognize(&inst.grid, &self.vocab)?;
        let (fused, _) = self.adjust(&inst.tensor, &rec.features, &rec.lengths)?;
        let tags = self.tagger.decode(&fused)?;
        let entities = decode_entities(&tags, &rec.texts, &boxes, &self.tagset, &self.schema);
        Ok(ImagePrediction {
            boxes,
            texts: rec.texts,
            entities,
        })
    }

    /// Teacher-forced tagger unaries for `sample`, used to compare model
    /// states.
    pub fn probe(&self, sample: &DocumentSample) -> Result<Tensor> {
        let fmap = self.features(&sample.image)?;
        let boxes = sample.boxes();
        let inst = self.projector.roi_pool(&fmap, 0, &boxes)?;
        let texts: Vec<&str> = sample.instances.iter().map(|i| i.transcript.as_str()).collect();
        let targets = encode_targets(&texts, &self.vocab, self.recognizer.l_max(), self.dtype(), self.store.device())?;
        let rec = self.recognizer.forward_teacher(&inst.grid, &targets, &self.vocab)?;
        let (fused, _) = self.adjust(&inst.tensor, &rec.features, &targets.lengths)?;
        self.tagger.unaries(&fused)
    }
}
