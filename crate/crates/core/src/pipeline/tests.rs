use super::train::epoch_order;
use super::*;
use crate::features::BackboneConfig;
use image::{Rgb, RgbImage};

fn tiny(cfam: CfamMode) -> RunConfig {
    let synth = SynthData::new(3, 3, 2, [96, 96], 4);
    let mut cfg = RunConfig::desk(synth, 2, 9);
    cfg.model.backbone = BackboneConfig {
        channels: [4, 8, 8, 8],
        strides: [1, 2, 2, 1],
    };
    cfg.model.attention = AttentionConfig {
        heads: 2,
        width: 16,
        layers: 1,
    };
    cfg.model.cfam_config.heads = 2;
    cfg.model.cfam_config.blocks = 1;
    cfg.model.cfam = cfam;
    cfg
}

#[test]
fn lr_schedule_endpoints() {
    assert_eq!(lr_at(0, 1000, 2e-4, 2e-6), 2e-4);
    assert!((lr_at(1000, 1000, 2e-4, 2e-6) - 2e-6).abs() < 1e-18);
    // Midpoint: (2e-4 + 2e-6) / 2.
    assert!((lr_at(500, 1000, 2e-4, 2e-6) - 1.01e-4).abs() < 1e-15);
    assert_eq!(lr_at(0, 0, 2e-4, 2e-6), 2e-4);
    let mut prev = f64::INFINITY;
    for s in 0..=10 {
        let lr = lr_at(s, 10, 1.0, 0.1);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn config_validation() {
    let good = tiny(CfamMode::On);
    good.validate().unwrap();
    for bad in [
        RunConfig { lr_end: 0.0, ..good.clone() },
        RunConfig { lr_start: 1e-5, lr_end: 1e-4, ..good.clone() },
        RunConfig { epochs: 0, ..good.clone() },
        RunConfig { batch_size: 0, ..good.clone() },
        RunConfig { synth: None, ..good.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = RunConfig::standard_benchmark(3, CfamMode::ClassifyHead, 0.0);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(RunConfig::standard_benchmark(4, CfamMode::ClassifyHead, 0.0).hash(), cfg.hash());

    let minimal = r#"{"synth": {"num_entities": 2, "train": {"num_samples": 1, "image_size": [64, 64],
        "entity_subset": ["Energy"], "seed": 0}}, "lr_start": 1.0, "lr_end": 0.5, "epochs": 1,
        "batch_size": 4, "seed": 5}"#;
    let cfg: RunConfig = serde_json::from_str(minimal).unwrap();
    assert_eq!(cfg.optimizer, OptimizerKind::default());
    assert_eq!(cfg.model.mode, BoxMode::OracleBoxes);
    assert_eq!(cfg.model.cfam, CfamMode::On);
    assert_eq!(cfg.loss.gamma, 10.0);
    cfg.validate().unwrap();
}

#[test]
fn seed_override() {
    let mut cfg = tiny(CfamMode::On);
    cfg.apply_seed_override(None).unwrap();
    assert_eq!(cfg.seed, 9);
    cfg.apply_seed_override(Some(" 42 ")).unwrap();
    assert_eq!(cfg.seed, 42);
    assert!(cfg.apply_seed_override(Some("-1")).is_err());
}

#[test]
fn config_file_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string(&tiny(CfamMode::Off)).unwrap()).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    if std::env::var(SEED_ENV).is_err() {
        assert_eq!(loaded, tiny(CfamMode::Off));
    }
    assert!(RunConfig::load(dir.path().join("missing.json")).is_err());
}

#[test]
fn shuffling_is_a_seeded_permutation() {
    let a = epoch_order(20, 1, 0);
    assert_eq!(a, epoch_order(20, 1, 0));
    assert_ne!(a, epoch_order(20, 1, 1));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
}

#[test]
fn every_mode_trains_and_predicts() {
    for mode in [CfamMode::On, CfamMode::Off, CfamMode::ClassifyHead] {
        let cfg = tiny(mode);
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|h| h.loss.total.is_finite()));
        let best = out.best.unwrap();
        assert!((0.0..=1.0).contains(&best.1.ie_f1));
        assert_eq!(best.1.det_f1, 1.0, "oracle boxes are exact");
    }
}

#[test]
fn untrained_model_scores_low() {
    let cfg = tiny(CfamMode::On);
    let data = load_run_data(&cfg).unwrap();
    let model = Model::new(&cfg.model, &data.schema, DType::F32, 0).unwrap();
    let report = evaluate_model(&model, &data.train, &EvalOptions::default()).unwrap();
    assert!(report.rec_f1 < 0.1 && report.ie_f1 < 0.1, "{report:?}");
}

#[test]
fn blank_image_gives_empty_prediction() {
    let mut cfg = tiny(CfamMode::On);
    cfg.model.mode = BoxMode::TrainedDetector;
    cfg.model.detect.score_threshold = 1.0;
    let schema = cfg.synth.as_ref().unwrap().schema().unwrap();
    let model = Model::new(&cfg.model, &schema, DType::F32, 0).unwrap();
    let blank = RgbImage::from_pixel(96, 96, Rgb([255, 255, 255]));
    let pred = model.predict(&blank, None).unwrap();
    assert!(pred.boxes.is_empty() && pred.texts.is_empty() && pred.entities.is_empty());
    let json = serde_json::to_value(&pred).unwrap();
    assert!(json["entities"].as_object().unwrap().is_empty());
    assert!(json["boxes"].as_array().unwrap().is_empty());

    cfg.model.mode = BoxMode::OracleBoxes;
    let oracle = Model::new(&cfg.model, &schema, DType::F32, 0).unwrap();
    assert!(oracle.predict(&blank, None).is_err());
    assert!(oracle.predict(&blank, Some(&[])).unwrap().entities.is_empty());
}

#[test]
fn detector_mode_trains() {
    let mut cfg = tiny(CfamMode::On);
    cfg.model.mode = BoxMode::TrainedDetector;
    cfg.epochs = 1;
    let out = train(&cfg, None).unwrap();
    assert!(out.history[0].loss.det > 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny(CfamMode::On);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, Some(dir.path())).unwrap();
    let data = load_run_data(&cfg).unwrap();
    let sample = &data.train.samples[0];
    let before = out.model.probe(sample).unwrap().to_vec3::<f32>().unwrap();

    let (loaded, meta) = Checkpoint::load(&dir.path().join("last")).unwrap();
    assert_eq!(meta.config, cfg);
    assert_eq!(meta.epoch, 2);
    assert_eq!(loaded.probe(sample).unwrap().to_vec3::<f32>().unwrap(), before);
    let opt = Checkpoint::load_optimizer(&dir.path().join("last"), &loaded, &meta).unwrap();
    assert_eq!(opt.steps(), meta.optimizer_steps);

    let (best, best_meta) = Checkpoint::load(&dir.path().join("best")).unwrap();
    assert_eq!(best_meta.eval.as_ref().unwrap().ie_f1, out.best.as_ref().unwrap().1.ie_f1);
    drop(best);

    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,total,det,rec,ie,contrastive"));

    // A tampered config is rejected.
    let meta_path = dir.path().join("last").join("meta.json");
    let text = std::fs::read_to_string(&meta_path).unwrap();
    std::fs::write(&meta_path, text.replacen("\"batch_size\": 1", "\"batch_size\": 2", 1)).unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("last")), Err(Error::Checkpoint(_))));
}

#[test]
fn dataset_directories_load() {
    let cfg = tiny(CfamMode::Off);
    let data = load_run_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    crate::datamodel::write_dataset(&data.train, &data.schema, dir.path().join("train")).unwrap();
    crate::datamodel::write_dataset(data.test.as_ref().unwrap(), &data.schema, dir.path().join("test")).unwrap();
    let from_disk = RunConfig {
        synth: None,
        train_data: Some(dir.path().join("train")),
        test_data: Some(dir.path().join("test")),
        ..cfg.clone()
    };
    let loaded = load_run_data(&from_disk).unwrap();
    assert_eq!(loaded.schema, data.schema);
    assert_eq!(loaded.train.len(), 3);
    assert_eq!(loaded.test.unwrap().len(), 2);

    let other = EntitySchema::nutrition(4, 24).unwrap();
    other.save(dir.path().join("test").join(crate::datamodel::SCHEMA_FILE)).unwrap();
    assert!(matches!(load_run_data(&from_disk), Err(Error::Config(_))));
}
