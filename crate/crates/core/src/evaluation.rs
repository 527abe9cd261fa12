//! Detection, end-to-end recognition, and entity-extraction F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, DocumentSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub ignore_case: bool,
    /// Trim and collapse internal whitespace runs before comparing text.
    pub collapse_whitespace: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_threshold: 0.5,
            ignore_case: false,
            collapse_whitespace: false,
        }
    }
}

impl EvalOptions {
    pub fn normalize(&self, s: &str) -> String {
        let s = if self.collapse_whitespace {
            s.split_whitespace().collect::<Vec<_>>().join(" ")
        } else {
            s.to_string()
        };
        if self.ignore_case {
            s.to_lowercase()
        } else {
            s
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub num_pred: usize,
    pub num_gold: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.num_pred += other.num_pred;
        self.num_gold += other.num_gold;
    }

    pub fn precision(&self) -> f64 {
        if self.num_pred == 0 {
            0.0
        } else {
            self.tp as f64 / self.num_pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.num_gold == 0 {
            0.0
        } else {
            self.tp as f64 / self.num_gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One-to-one greedy matching: eligible pairs (IoU at or above the
/// threshold and accepted by `eligible`) are taken highest IoU first, ties
/// by lower prediction index, then lower gold index.
pub fn match_boxes(
    pred: &[BBox],
    gold: &[BBox],
    threshold: f64,
    eligible: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let iou = p.iou(g);
            if iou >= threshold && eligible(i, j) {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gold.len()]);
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn det_counts(pred: &[BBox], gold: &[BBox], opts: &EvalOptions) -> Counts {
    Counts {
        tp: match_boxes(pred, gold, opts.iou_threshold, |_, _| true).len(),
        num_pred: pred.len(),
        num_gold: gold.len(),
    }
}

/// A prediction is correct when its box matches a gold box and the texts
/// agree exactly (after the configured normalization).
pub fn rec_counts(pred: &[(BBox, String)], gold: &[(BBox, String)], opts: &EvalOptions) -> Counts {
    let pb: Vec<BBox> = pred.iter().map(|p| p.0).collect();
    let gb: Vec<BBox> = gold.iter().map(|g| g.0).collect();
    let same = |i: usize, j: usize| opts.normalize(&pred[i].1) == opts.normalize(&gold[j].1);
    Counts {
        tp: match_boxes(&pb, &gb, opts.iou_threshold, same).len(),
        num_pred: pred.len(),
        num_gold: gold.len(),
    }
}

/// Per-entity counts for one image. A wrong value is both a false
/// positive and a false negative.
pub fn ie_counts(
    pred: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
    opts: &EvalOptions,
) -> BTreeMap<String, Counts> {
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (name, value) in pred {
        let c = out.entry(name.clone()).or_default();
        c.num_pred += 1;
        if gold.get(name).is_some_and(|g| opts.normalize(g) == opts.normalize(value)) {
            c.tp += 1;
        }
    }
    for name in gold.keys() {
        out.entry(name.clone()).or_default().num_gold += 1;
    }
    out
}

pub fn det_f1(pred: &[Vec<BBox>], gold: &[Vec<BBox>], opts: &EvalOptions) -> f64 {
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        c.add(det_counts(p, g, opts));
    }
    c.f1()
}

pub fn rec_f1(pred: &[Vec<(BBox, String)>], gold: &[Vec<(BBox, String)>], opts: &EvalOptions) -> f64 {
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        c.add(rec_counts(p, g, opts));
    }
    c.f1()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IeScore {
    /// Micro-averaged F1.
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub per_entity: BTreeMap<String, EntityScore>,
}

pub fn ie_f1(pred: &[BTreeMap<String, String>], gold: &[BTreeMap<String, String>], opts: &EvalOptions) -> IeScore {
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for (name, c) in ie_counts(p, g, opts) {
            per.entry(name).or_default().add(c);
        }
    }
    let mut total = Counts::default();
    for c in per.values() {
        total.add(*c);
    }
    let per_entity: BTreeMap<String, EntityScore> = per
        .iter()
        .map(|(name, c)| {
            (
                name.clone(),
                EntityScore {
                    precision: c.precision(),
                    recall: c.recall(),
                    f1: c.f1(),
                    support: c.num_gold,
                },
            )
        })
        .collect();
    let macro_f1 = if per_entity.is_empty() {
        0.0
    } else {
        per_entity.values().map(|s| s.f1).sum::<f64>() / per_entity.len() as f64
    };
    IeScore {
        f1: total.f1(),
        precision: total.precision(),
        recall: total.recall(),
        macro_f1,
        per_entity,
    }
}

/// Model output for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub boxes: Vec<BBox>,
    pub texts: Vec<String>,
    pub entities: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub det_f1: f64,
    pub rec_f1: f64,
    pub ie_f1: f64,
    pub ie_macro_f1: f64,
    pub ie_precision: f64,
    pub ie_recall: f64,
    pub per_entity: BTreeMap<String, EntityScore>,
    pub num_images: usize,
}

pub fn evaluate(pred: &[ImagePrediction], gold: &[DocumentSample], opts: &EvalOptions) -> EvalReport {
    let pb: Vec<Vec<BBox>> = pred.iter().map(|p| p.boxes.clone()).collect();
    let gb: Vec<Vec<BBox>> = gold.iter().map(|g| g.boxes()).collect();
    let pt: Vec<Vec<(BBox, String)>> = pred
        .iter()
        .map(|p| p.boxes.iter().copied().zip(p.texts.iter().cloned()).collect())
        .collect();
    let gt: Vec<Vec<(BBox, String)>> = gold
        .iter()
        .map(|g| g.instances.iter().map(|i| (i.bbox, i.transcript.clone())).collect())
        .collect();
    let pe: Vec<BTreeMap<String, String>> = pred.iter().map(|p| p.entities.clone()).collect();
    let ge: Vec<BTreeMap<String, String>> = gold.iter().map(|g| g.entity_map()).collect();
    let ie = ie_f1(&pe, &ge, opts);
    EvalReport {
        det_f1: det_f1(&pb, &gb, opts),
        rec_f1: rec_f1(&pt, &gt, opts),
        ie_f1: ie.f1,
        ie_macro_f1: ie.macro_f1,
        ie_precision: ie.precision,
        ie_recall: ie.recall,
        per_entity: ie.per_entity,
        num_images: gold.len(),
    }
}

impl EvalReport {
    /// Plain-text table with percentages.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>8}{:>8}{:>8}", "", "DET", "REC", "IE");
        let _ = writeln!(
            s,
            "{:<14}{:>8.2}{:>8.2}{:>8.2}",
            "F1",
            100.0 * self.det_f1,
            100.0 * self.rec_f1,
            100.0 * self.ie_f1
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14}{:>8}{:>8}{:>8}{:>8}", "entity", "P", "R", "F1", "support");
        for (name, e) in &self.per_entity {
            let _ = writeln!(
                s,
                "{:<14}{:>8.2}{:>8.2}{:>8.2}{:>8}",
                name,
                100.0 * e.precision,
                100.0 * e.recall,
                100.0 * e.f1,
                e.support
            );
        }
        let _ = writeln!(s, "{:<14}{:>24.2}", "macro", 100.0 * self.ie_macro_f1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn det_fixtures() {
        let o = EvalOptions::default();
        let gold = vec![b(0.0), b(20.0), b(40.0), b(60.0)];
        assert_eq!(det_f1(&[gold.clone()], &[gold.clone()], &o), 1.0);
        assert_eq!(det_f1(&[vec![]], &[gold.clone()], &o), 0.0);
        let pred = vec![b(0.5), b(20.0), b(100.0)];
        let f = det_f1(&[pred], &[gold], &o);
        assert!((f - 4.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn det_equal_iou_goes_to_lower_prediction() {
        let gold = [b(10.0)];
        let pred = [b(5.0), b(15.0)];
        assert_eq!(match_boxes(&pred, &gold, 0.3, |_, _| true), vec![(0, 0)]);
        let swapped = [b(15.0), b(5.0)];
        assert_eq!(match_boxes(&swapped, &gold, 0.3, |_, _| true), vec![(0, 0)]);
    }

    #[test]
    fn rec_fixtures() {
        let o = EvalOptions::default();
        let gold: Vec<(BBox, String)> = ["Fat", "12g", "Salt", "1g"]
            .iter()
            .enumerate()
            .map(|(i, t)| (b(20.0 * i as f64), t.to_string()))
            .collect();
        assert_eq!(rec_f1(&[gold.clone()], &[gold.clone()], &o), 1.0);
        let off_by_one: Vec<(BBox, String)> = gold.iter().map(|(bx, t)| (*bx, format!("{t}x"))).collect();
        assert_eq!(rec_f1(&[off_by_one], &[gold.clone()], &o), 0.0);
        let mixed = vec![
            (b(0.0), "Fat".to_string()),
            (b(20.0), "12g".to_string()),
            (b(40.0), "Sa1t".to_string()),
        ];
        assert!((rec_f1(&[mixed], &[gold.clone()], &o) - 4.0 / 7.0).abs() < 1e-9);
        let case = vec![(b(0.0), "FAT".to_string())];
        let lenient = EvalOptions {
            ignore_case: true,
            ..o
        };
        assert_eq!(rec_counts(&case, &gold, &o).tp, 0);
        assert_eq!(rec_counts(&case, &gold, &lenient).tp, 1);
    }

    #[test]
    fn ie_fixtures() {
        let o = EvalOptions::default();
        let gold = map(&[("A", "1"), ("B", "2")]);
        assert_eq!(ie_f1(&[gold.clone()], &[gold.clone()], &o).f1, 1.0);
        assert_eq!(ie_f1(&[BTreeMap::new()], &[gold.clone()], &o).f1, 0.0);
        let pred = map(&[("A", "1"), ("B", "3"), ("C", "4")]);
        let s = ie_f1(&[pred], &[gold], &o);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 0.4).abs() < 1e-9);
        assert_eq!(s.per_entity["A"].f1, 1.0);
        assert_eq!(s.per_entity["B"].support, 1);
        assert_eq!(s.per_entity["C"].support, 0);
        assert!((s.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        let spaced = map(&[("A", " 1 ")]);
        let ws = EvalOptions {
            collapse_whitespace: true,
            ..o
        };
        assert_eq!(ie_f1(&[spaced.clone()], &[map(&[("A", "1")])], &o).f1, 0.0);
        assert_eq!(ie_f1(&[spaced], &[map(&[("A", "1")])], &ws).f1, 1.0);
    }

    #[test]
    fn f1_of_zero_is_zero() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(Counts::default().f1(), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_ignore_sample_order(seed in 0u64..1000, rot in 0usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let o = EvalOptions::default();
            let mut pb = Vec::new();
            let mut gb = Vec::new();
            let mut pe = Vec::new();
            let mut ge = Vec::new();
            for _ in 0..5 {
                let g: Vec<BBox> = (0..rng.random_range(0..4)).map(|k| b(20.0 * k as f64)).collect();
                let p: Vec<BBox> = (0..rng.random_range(0..4)).map(|k| b(20.0 * k as f64 + rng.random_range(0.0..6.0))).collect();
                gb.push(g);
                pb.push(p);
                let vals = ["1", "2"];
                ge.push(map(&[("A", vals[rng.random_range(0..2)])]));
                pe.push(map(&[("A", vals[rng.random_range(0..2)]), ("B", "x")]));
            }
            let d = det_f1(&pb, &gb, &o);
            let i = ie_f1(&pe, &ge, &o).f1;
            pb.rotate_left(rot);
            gb.rotate_left(rot);
            pe.rotate_left(rot);
            ge.rotate_left(rot);
            prop_assert_eq!(d, det_f1(&pb, &gb, &o));
            prop_assert_eq!(i, ie_f1(&pe, &ge, &o).f1);
        }
    }
}
