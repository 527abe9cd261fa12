use std::collections::BTreeMap;

use vie_core::cfam::CfamMode;
use vie_core::pipeline::{load_run_data, predict_split, train, RunConfig, SynthData};

fn tiny(mode: CfamMode, epochs: usize) -> RunConfig {
    let synth = SynthData::new(3, 2, 0, [96, 112], 11);
    let mut cfg = RunConfig::desk(synth, epochs, 1);
    cfg.model.cfam = mode;
    cfg.eval_every = epochs;
    cfg
}

#[test]
fn memorizes_two_documents() {
    let cfg = tiny(CfamMode::On, 150);
    let data = load_run_data(&cfg).unwrap();
    let out = train(&cfg, None).unwrap();
    let first = out.history.first().unwrap().loss.total;
    let last = out.history.last().unwrap().loss.total;
    assert!(last < first / 10.0, "loss {first} -> {last}");

    let preds = predict_split(&out.model, &data.train).unwrap();
    for (pred, sample) in preds.iter().zip(&data.train.samples) {
        let gold: Vec<&str> = sample.instances.iter().map(|i| i.transcript.as_str()).collect();
        assert_eq!(pred.texts, gold, "{}", sample.id);
        let want: BTreeMap<String, String> = sample.entity_values.iter().cloned().collect();
        assert_eq!(pred.entities, want, "{}", sample.id);
    }
}

#[test]
fn training_is_seeded() {
    let a = train(&tiny(CfamMode::Off, 2), None).unwrap();
    let b = train(&tiny(CfamMode::Off, 2), None).unwrap();
    let la: Vec<f64> = a.history.iter().map(|h| h.loss.total).collect();
    let lb: Vec<f64> = b.history.iter().map(|h| h.loss.total).collect();
    assert_eq!(la, lb);

    let mut other = tiny(CfamMode::Off, 2);
    other.seed = 2;
    let c = train(&other, None).unwrap();
    assert_ne!(la, c.history.iter().map(|h| h.loss.total).collect::<Vec<_>>());
}
