//! Synthetic nutrition-label documents with exact annotations.
//!
//! Every sample is rendered with the built-in bitmap font on a light, noisy
//! background. Entities appear either inline (`"<name>: <value>"`) or split
//! over a key line and a value line directly below it; the value line alone
//! does not say which entity it belongs to, so resolving it needs context
//! from the other instances of the image.

pub mod font;
mod warp;

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, DatasetSplit, DocumentSample, EntitySchema, SplitName, TextInstance};
use crate::error::{Error, Result};
use font::{ADVANCE, GLYPH_HEIGHT, GLYPH_WIDTH};
use warp::Warp;

/// Surface form of a rendered value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueForm {
    /// `100kcal`
    Plain,
    /// `100 kcal`
    Spaced,
    /// `100kcal (5%)`
    Percent,
}

/// Generator for the values of one entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGrammar {
    pub min: u32,
    pub max: u32,
    /// Digits after the decimal point; the drawn integer is scaled down.
    #[serde(default)]
    pub decimals: u8,
    pub units: Vec<String>,
    pub forms: Vec<ValueForm>,
}

impl ValueGrammar {
    pub fn new(min: u32, max: u32, units: &[&str], forms: &[ValueForm]) -> Self {
        ValueGrammar {
            min,
            max,
            decimals: 0,
            units: units.iter().map(|u| u.to_string()).collect(),
            forms: forms.to_vec(),
        }
    }

    fn validate(&self, entity: &str) -> Result<()> {
        if self.min > self.max || self.units.is_empty() || self.forms.is_empty() {
            return Err(Error::Config(format!("value grammar of `{entity}` is empty")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> String {
        let n = rng.random_range(self.min..=self.max);
        let number = if self.decimals == 0 {
            n.to_string()
        } else {
            let scale = 10u32.pow(self.decimals as u32);
            format!("{}.{:0width$}", n / scale, n % scale, width = self.decimals as usize)
        };
        let unit = &self.units[rng.random_range(0..self.units.len())];
        match self.forms[rng.random_range(0..self.forms.len())] {
            ValueForm::Plain => format!("{number}{unit}"),
            ValueForm::Spaced => format!("{number} {unit}"),
            ValueForm::Percent => format!("{number}{unit} ({}%)", rng.random_range(1..=40u32)),
        }
    }
}

/// Built-in grammar for the nutrition entity `name`.
pub fn default_grammar(name: &str) -> ValueGrammar {
    use ValueForm::*;
    let both = [Plain, Percent];
    match name {
        "Energy" => ValueGrammar::new(40, 900, &["kcal", "kJ"], &[Plain, Spaced]),
        "Sodium" | "Cholesterol" | "Potassium" | "Calcium" => {
            ValueGrammar::new(5, 900, &["mg"], &both)
        }
        "Iron" => ValueGrammar::new(1, 30, &["mg"], &both),
        "Salt" => ValueGrammar {
            decimals: 1,
            ..ValueGrammar::new(1, 40, &["g"], &both)
        },
        "Vit A" | "Vit D" => ValueGrammar::new(1, 90, &["ug"], &both),
        "Vit C" => ValueGrammar::new(1, 90, &["mg"], &both),
        "Serving" => ValueGrammar::new(10, 250, &["g", "ml"], &[Plain, Spaced]),
        "Servings" => ValueGrammar::new(1, 20, &[""], &[Plain]),
        _ => ValueGrammar::new(0, 60, &["g"], &both),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    None,
    Perspective,
    Fold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub kind: DistortionKind,
    /// In `[0, 1]`.
    pub magnitude: f64,
}

impl Default for Distortion {
    fn default() -> Self {
        Distortion {
            kind: DistortionKind::None,
            magnitude: 0.0,
        }
    }
}

fn default_split() -> SplitName {
    SplitName::Train
}
fn default_noise() -> f64 {
    4.0
}
fn default_entity_prob() -> f64 {
    0.7
}
fn default_split_prob() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub entity_subset: Vec<String>,
    /// Per-entity overrides of [`default_grammar`].
    #[serde(default)]
    pub value_grammar: BTreeMap<String, ValueGrammar>,
    #[serde(default)]
    pub distortion: Distortion,
    /// Standard deviation of additive gray-level noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Probability that each subset entity is present in an image.
    #[serde(default = "default_entity_prob")]
    pub entity_prob: f64,
    /// Probability that one entity of the image is split into a key line and
    /// a value line.
    #[serde(default = "default_split_prob")]
    pub split_prob: f64,
    #[serde(default = "default_split")]
    pub split: SplitName,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_samples: usize, image_size: [usize; 2], entity_subset: Vec<String>, seed: u64) -> Self {
        SynthConfig {
            num_samples,
            image_size,
            entity_subset,
            value_grammar: BTreeMap::new(),
            distortion: Distortion::default(),
            noise_sigma: default_noise(),
            entity_prob: default_entity_prob(),
            split_prob: default_split_prob(),
            split: default_split(),
            seed,
        }
    }

    pub fn validate(&self, schema: &EntitySchema) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.entity_subset.is_empty() {
            return Err(Error::Config("entity_subset is empty".into()));
        }
        for name in &self.entity_subset {
            if schema.entity_index(name).is_none() {
                return Err(Error::Config(format!("entity `{name}` is not in the schema")));
            }
            self.grammar(name)?.validate(name)?;
        }
        if !(0.0..=1.0).contains(&self.distortion.magnitude) {
            return Err(Error::Config("distortion magnitude must lie in [0, 1]".into()));
        }
        for (what, p) in [("entity_prob", self.entity_prob), ("split_prob", self.split_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must lie in [0, 1]")));
            }
        }
        let [h, w] = self.image_size;
        if h < 64 || w < 64 {
            return Err(Error::Config(format!("image size {h}x{w} is below 64x64")));
        }
        Ok(())
    }

    pub fn grammar(&self, entity: &str) -> Result<ValueGrammar> {
        if let Some(g) = self.value_grammar.get(entity) {
            return Ok(g.clone());
        }
        if self.entity_subset.iter().any(|e| e == entity) {
            Ok(default_grammar(entity))
        } else {
            Err(Error::Config(format!("no value grammar for entity `{entity}`")))
        }
    }

    /// Draws one value of `entity` from its grammar.
    pub fn render_value(&self, entity: &str, rng: &mut impl Rng) -> Result<String> {
        Ok(self.grammar(entity)?.sample(rng))
    }
}

const TITLES: [&str; 2] = ["Nutrition Facts", "Nutrition"];
const HEADERS: [&str; 4] = ["Per 100g", "Amount per serving", "Typical values", "Daily value %"];
const FOOTERS: [&str; 3] = ["Best before 12/25", "Keep dry", "Store cool"];
const MAX_WARP_ATTEMPTS: usize = 8;
const MAX_OVERLAP_IOU: f64 = 0.05;

#[derive(Clone, Debug)]
struct Line {
    text: String,
    entity: Option<usize>,
    /// Lines with priority 0 are never dropped for space.
    priority: u8,
}

/// Generates `config.num_samples` documents. Sample `i` is drawn from an RNG
/// seeded with `config.seed + i`, so output does not depend on generation
/// order.
pub fn generate(config: &SynthConfig, schema: &EntitySchema) -> Result<DatasetSplit> {
    config.validate(schema)?;
    let samples = (0..config.num_samples)
        .map(|i| generate_sample(config, schema, i))
        .collect::<Result<Vec<_>>>()?;
    DatasetSplit::from_samples(config.split, samples, schema)
}

/// Generates the `index`-th sample of `config` on its own.
pub fn generate_sample(config: &SynthConfig, schema: &EntitySchema, index: usize) -> Result<DocumentSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let [height, width] = config.image_size;
    let (lines, values) = compose_lines(config, schema, &mut rng)?;
    let lines = fit_lines(lines, width, height, schema)?;

    for line in &lines {
        if let Some(c) = line.text.chars().find(|&c| !schema.charset.contains(c) || !font::has_glyph(c)) {
            return Err(Error::Config(format!("character {c:?} of {:?} cannot be rendered", line.text)));
        }
    }

    // Vertical placement.
    let gaps: Vec<usize> = (0..lines.len()).map(|_| rng.random_range(3..=5)).collect();
    let content: usize = lines.len() * GLYPH_HEIGHT + gaps.iter().sum::<usize>();
    let slack = height.saturating_sub(content + 4);
    let mut y = 2 + rng.random_range(0..=slack.min(24));
    let bg = rng.random_range(190.0..250.0f32);
    let ink = rng.random_range(10.0..80.0f32);
    let mut canvas = vec![bg; height * width];
    let mut placed = Vec::with_capacity(lines.len());
    let mut rows_used = Vec::new();
    for (line, gap) in lines.iter().zip(&gaps) {
        let w = font::text_width(&line.text);
        let x = rng.random_range(2..=width - w - 2);
        draw_text(&mut canvas, width, x, y, &line.text, ink);
        let bbox = BBox::new(
            x as f64 - 1.0,
            y as f64 - 1.0,
            (x + w) as f64 + 1.0,
            (y + GLYPH_HEIGHT) as f64 + 1.0,
        );
        placed.push(bbox);
        rows_used.push(y);
        y += GLYPH_HEIGHT + gap;
    }

    let (canvas, polygons) = apply_distortion(config, &canvas, width, height, bg, &placed, &mut rng);

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = RgbImage::new(width as u32, height as u32);
    for (i, px) in canvas.iter().enumerate() {
        let v = (*px as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
        image.put_pixel((i % width) as u32, (i / width) as u32, Rgb([v, v, v]));
    }

    let instances = lines
        .iter()
        .zip(polygons)
        .map(|(line, (bbox, polygon))| TextInstance {
            bbox,
            polygon,
            transcript: line.text.clone(),
            entity_id: line.entity,
        })
        .collect::<Vec<_>>();
    let present: Vec<usize> = instances.iter().filter_map(|i| i.entity_id).collect();
    let entity_values = values
        .into_iter()
        .filter(|(e, _)| present.contains(e))
        .map(|(e, v)| (schema.entities[e].clone(), v))
        .collect();
    Ok(DocumentSample {
        id: format!("images/{index:06}.png"),
        image,
        instances,
        entity_values,
    })
}

fn compose_lines(
    config: &SynthConfig,
    schema: &EntitySchema,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Line>, Vec<(usize, String)>)> {
    let mut chosen: Vec<usize> = config
        .entity_subset
        .iter()
        .filter_map(|name| schema.entity_index(name))
        .filter(|_| rng.random_bool(config.entity_prob))
        .collect();
    if chosen.is_empty() {
        let pick = rng.random_range(0..config.entity_subset.len());
        chosen.push(schema.entity_index(&config.entity_subset[pick]).expect("validated subset"));
    }
    chosen.shuffle(rng);
    let split_at = rng.random_bool(config.split_prob).then(|| rng.random_range(0..chosen.len()));

    let mut lines = Vec::new();
    if rng.random_bool(0.6) {
        lines.push(Line {
            text: TITLES[rng.random_range(0..TITLES.len())].to_string(),
            entity: None,
            priority: 2,
        });
    }
    if rng.random_bool(0.5) {
        lines.push(Line {
            text: HEADERS[rng.random_range(0..HEADERS.len())].to_string(),
            entity: None,
            priority: 2,
        });
    }
    let mut values = Vec::new();
    for (k, &e) in chosen.iter().enumerate() {
        let name = &schema.entities[e];
        let value = config.render_value(name, rng)?;
        if split_at == Some(k) {
            lines.push(Line {
                text: name.clone(),
                entity: None,
                priority: 0,
            });
            lines.push(Line {
                text: value.clone(),
                entity: Some(e),
                priority: 0,
            });
        } else {
            lines.push(Line {
                text: format!("{name}: {value}"),
                entity: Some(e),
                priority: 1,
            });
        }
        values.push((e, value));
    }
    if rng.random_bool(0.3) {
        lines.push(Line {
            text: FOOTERS[rng.random_range(0..FOOTERS.len())].to_string(),
            entity: None,
            priority: 3,
        });
    }
    Ok((lines, values))
}

/// Drops lines that do not fit, least important first.
fn fit_lines(mut lines: Vec<Line>, width: usize, height: usize, schema: &EntitySchema) -> Result<Vec<Line>> {
    let fits_width =
        |l: &Line| font::text_width(&l.text) + 4 <= width && l.text.chars().count() <= schema.max_chars;
    // A split entity is kept or dropped as a pair.
    let mut i = 0;
    while i < lines.len() {
        if !fits_width(&lines[i]) {
            if lines[i].priority == 0 {
                let start = if lines[i].entity.is_some() { i - 1 } else { i };
                lines.drain(start..start + 2);
                i = start;
            } else {
                lines.remove(i);
            }
        } else {
            i += 1;
        }
    }
    let pitch = GLYPH_HEIGHT + 5;
    while lines.len() * pitch + 4 > height {
        let drop = (0..lines.len())
            .rev()
            .filter(|&i| lines[i].priority > 0)
            .max_by_key(|&i| lines[i].priority);
        match drop {
            Some(i) => {
                lines.remove(i);
            }
            None => {
                // Only a split pair remains.
                lines.truncate(lines.len().saturating_sub(2));
            }
        }
    }
    if !lines.iter().any(|l| l.entity.is_some()) {
        return Err(Error::Layout(format!(
            "no entity line fits a {height}x{width} image"
        )));
    }
    Ok(lines)
}

fn draw_text(canvas: &mut [f32], width: usize, x: usize, y: usize, text: &str, ink: f32) {
    for (k, c) in text.chars().enumerate() {
        let Some(columns) = font::glyph(c) else { continue };
        let gx = x + k * ADVANCE;
        for col in 0..GLYPH_WIDTH {
            for row in 0..GLYPH_HEIGHT {
                if font::ink(columns, col, row) {
                    canvas[(y + row) * width + gx + col] = ink;
                }
            }
        }
    }
}

type Placed = (BBox, Option<[[f64; 2]; 4]>);

fn apply_distortion(
    config: &SynthConfig,
    canvas: &[f32],
    width: usize,
    height: usize,
    bg: f32,
    boxes: &[BBox],
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<Placed>) {
    let identity = || (canvas.to_vec(), boxes.iter().map(|b| (*b, None)).collect());
    if config.distortion.kind == DistortionKind::None || config.distortion.magnitude == 0.0 {
        return identity();
    }
    for _ in 0..MAX_WARP_ATTEMPTS {
        let warp = Warp::random(config.distortion, width as f64, height as f64, rng);
        let placed: Vec<Placed> = boxes
            .iter()
            .map(|b| {
                let poly = warp.polygon(b);
                let bbox = warp.bounding_box(b).clip(width as f64, height as f64);
                (bbox, Some(poly))
            })
            .collect();
        let overlapping = placed.iter().enumerate().any(|(i, a)| {
            !a.0.is_valid() || placed[i + 1..].iter().any(|b| a.0.iou(&b.0) > MAX_OVERLAP_IOU)
        });
        if !overlapping {
            return (warp.resample(canvas, width, height, bg), placed);
        }
    }
    identity()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::AnnotationRecord;

    fn schema() -> EntitySchema {
        EntitySchema::nutrition(8, 24).unwrap()
    }

    fn subset(n: usize) -> Vec<String> {
        schema().entities[..n].to_vec()
    }

    #[test]
    fn single_entity_single_sample() {
        let cfg = SynthConfig::new(1, [128, 128], subset(1), 7);
        let split = generate(&cfg, &schema()).unwrap();
        assert_eq!(split.len(), 1);
        let s = &split.samples[0];
        assert!(!s.instances.is_empty());
        assert_eq!(s.entity_values.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = schema();
        let mut cfg = SynthConfig::new(3, [128, 128], subset(4), 11);
        cfg.split_prob = 0.5;
        let a = generate(&cfg, &s).unwrap();
        let b = generate(&cfg, &s).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(AnnotationRecord::from_sample(x, &s), AnnotationRecord::from_sample(y, &s));
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn mean_entities_per_image_is_within_bounds() {
        let cfg = SynthConfig::new(32, [160, 144], subset(5), 0);
        let split = generate(&cfg, &schema()).unwrap();
        assert_eq!(split.len(), 32);
        let total: usize = split.samples.iter().map(|s| s.entity_values.len()).sum();
        let mean = total as f64 / 32.0;
        assert!(mean > 0.0 && mean <= 5.0, "mean {mean}");
    }

    #[test]
    fn degenerate_range_renders_fixed_value() {
        let mut cfg = SynthConfig::new(1, [128, 128], vec!["Energy".into()], 0);
        cfg.value_grammar
            .insert("Energy".into(), ValueGrammar::new(100, 100, &["kcal"], &[ValueForm::Plain]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(cfg.render_value("Energy", &mut rng).unwrap(), "100kcal");
    }

    #[test]
    fn two_form_grammar_produces_both_forms() {
        let cfg = SynthConfig::new(1, [128, 128], vec!["Fat".into()], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut plain, mut percent) = (0, 0);
        for _ in 0..1000 {
            let v = cfg.render_value("Fat", &mut rng).unwrap();
            if v.contains('%') {
                percent += 1;
            } else {
                plain += 1;
            }
        }
        assert!(plain > 0 && percent > 0, "plain {plain} percent {percent}");
    }

    #[test]
    fn unknown_entity_has_no_grammar() {
        let cfg = SynthConfig::new(1, [128, 128], vec!["Fat".into()], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(cfg.render_value("Nope", &mut rng).is_err());
    }

    #[test]
    fn empty_subset_is_rejected() {
        let cfg = SynthConfig::new(1, [128, 128], vec![], 0);
        assert!(matches!(generate(&cfg, &schema()), Err(Error::Config(_))));
    }

    #[test]
    fn unfittable_lines_are_a_layout_error() {
        let mut cfg = SynthConfig::new(1, [64, 64], vec!["Energy".into()], 0);
        cfg.value_grammar.insert(
            "Energy".into(),
            ValueGrammar::new(1000, 1000, &["kilocalories"], &[ValueForm::Spaced]),
        );
        assert!(matches!(generate(&cfg, &schema()), Err(Error::Layout(_))));
    }

    #[test]
    fn split_entities_put_values_on_their_own_line() {
        let s = schema();
        let mut cfg = SynthConfig::new(16, [160, 144], subset(8), 5);
        cfg.split_prob = 1.0;
        let split = generate(&cfg, &s).unwrap();
        let mut bare = 0;
        for sample in &split.samples {
            for inst in &sample.instances {
                if let Some(e) = inst.entity_id {
                    if !inst.transcript.contains(':') {
                        bare += 1;
                        assert_eq!(sample.entity_value(&s.entities[e]), Some(inst.transcript.as_str()));
                    }
                }
            }
        }
        assert!(bare >= 12, "only {bare} split values");
    }

    #[test]
    fn instance_boxes_do_not_overlap() {
        let s = schema();
        for kind in [DistortionKind::None, DistortionKind::Perspective, DistortionKind::Fold] {
            let mut cfg = SynthConfig::new(12, [160, 144], subset(8), 21);
            cfg.distortion = Distortion { kind, magnitude: 0.8 };
            let split = generate(&cfg, &s).unwrap();
            for sample in &split.samples {
                let b = sample.boxes();
                for i in 0..b.len() {
                    for j in i + 1..b.len() {
                        assert!(b[i].iou(&b[j]) <= MAX_OVERLAP_IOU, "{kind:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn ink_lies_inside_annotated_boxes() {
        let s = schema();
        let mut cfg = SynthConfig::new(4, [160, 144], subset(6), 2);
        cfg.noise_sigma = 0.0;
        let split = generate(&cfg, &s).unwrap();
        for sample in &split.samples {
            let boxes = sample.boxes();
            for (x, y, px) in sample.image.enumerate_pixels() {
                if px.0[0] < 100 {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(
                        boxes.iter().any(|b| fx > b.x0 && fx < b.x1 && fy > b.y0 && fy < b.y1),
                        "ink at ({x},{y}) outside every box"
                    );
                }
            }
        }
    }
}
