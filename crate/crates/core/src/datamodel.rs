//! Document, instance and entity types, the on-disk annotation format, and
//! sample validation.
//!
//! A dataset directory holds `annotations.jsonl` (one record per image) next
//! to the images it references; the entity schema lives in `schema.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use image::RgbImage;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Symbol substituted for characters outside the schema charset.
pub const UNK_CHAR: char = '\u{FFFD}';

/// Separator inserted between value fragments of an entity that spans
/// several instances.
pub const VALUE_JOINER: &str = " ";

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

/// Printable characters recognised by default.
pub const DEFAULT_CHARSET: &str =
    "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz :%().,/-";

/// Nutrition-table entity names, 21 categories.
pub const NUTRITION_ENTITIES: [&str; 21] = [
    "Energy",
    "Fat",
    "Carbs",
    "Sugars",
    "Protein",
    "Fiber",
    "Sodium",
    "Salt",
    "Sat fat",
    "Trans fat",
    "Cholesterol",
    "Added sugar",
    "Calcium",
    "Iron",
    "Potassium",
    "Vit A",
    "Vit C",
    "Vit D",
    "Serving",
    "Servings",
    "Polyols",
];

/// Ordered entity categories plus the recognizable character set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySchema {
    pub entities: Vec<String>,
    pub charset: String,
    pub max_chars: usize,
}

impl EntitySchema {
    pub fn new(entities: Vec<String>, charset: impl Into<String>, max_chars: usize) -> Result<Self> {
        let schema = EntitySchema {
            entities,
            charset: charset.into(),
            max_chars,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// The first `m` nutrition entities with the default charset.
    pub fn nutrition(m: usize, max_chars: usize) -> Result<Self> {
        if m > NUTRITION_ENTITIES.len() {
            return Err(Error::Schema(format!(
                "only {} built-in entities, asked for {m}",
                NUTRITION_ENTITIES.len()
            )));
        }
        Self::new(
            NUTRITION_ENTITIES[..m].iter().map(|s| s.to_string()).collect(),
            DEFAULT_CHARSET,
            max_chars,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::Schema("at least one entity is required".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.entities {
            if name.is_empty() {
                return Err(Error::Schema("entity names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate entity name `{name}`")));
            }
        }
        let mut chars = HashSet::new();
        for c in self.charset.chars() {
            if c == UNK_CHAR || c.is_control() {
                return Err(Error::Schema(format!("charset contains reserved character {c:?}")));
            }
            if !chars.insert(c) {
                return Err(Error::Schema(format!("duplicate charset character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Schema("charset is empty".into()));
        }
        if self.max_chars == 0 {
            return Err(Error::Schema("max_chars must be positive".into()));
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: EntitySchema =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("schema", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Replaces out-of-charset characters with [`UNK_CHAR`].
    pub fn normalize_text(&self, text: &str) -> String {
        text.chars()
            .map(|c| if self.charset.contains(c) { c } else { UNK_CHAR })
            .collect()
    }
}

/// Character vocabulary of the recognizer: four reserved ids followed by the
/// schema charset.
#[derive(Clone, Debug)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    const RESERVED: u32 = 4;

    pub fn new(schema: &EntitySchema) -> Self {
        let chars: Vec<char> = schema.charset.chars().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + Self::RESERVED))
            .collect();
        Vocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + Self::RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Printable character for `id`; `None` for PAD, BOS and EOS.
    pub fn char_of(&self, id: u32) -> Option<char> {
        match id {
            Self::PAD | Self::BOS | Self::EOS => None,
            Self::UNK => Some(UNK_CHAR),
            _ => self.chars.get((id - Self::RESERVED) as usize).copied(),
        }
    }
}

/// Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn from_points(points: &[[f64; 2]]) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            b.x0 = b.x0.min(p[0]);
            b.y0 = b.y0.min(p[1]);
            b.x1 = b.x1.max(p[0]);
            b.y1 = b.y1.max(p[1]);
        }
        b
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

/// Signed area of a polygon (shoelace).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// One text line of a document.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInstance {
    pub bbox: BBox,
    pub polygon: Option<[[f64; 2]; 4]>,
    pub transcript: String,
    /// Index into [`EntitySchema::entities`]; `None` for non-entity text.
    pub entity_id: Option<usize>,
}

/// One image with its line-level annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentSample {
    /// Image path relative to the dataset root; doubles as the sample id.
    pub id: String,
    pub image: RgbImage,
    pub instances: Vec<TextInstance>,
    /// Entity name to value. Kept as pairs so duplicated names survive
    /// loading and can be reported by validation.
    pub entity_values: Vec<(String, String)>,
}

impl DocumentSample {
    pub fn entity_value(&self, name: &str) -> Option<&str> {
        self.entity_values
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn entity_map(&self) -> BTreeMap<String, String> {
        self.entity_values.iter().cloned().collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitName::Train => f.write_str("train"),
            SplitName::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split name `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<DocumentSample>,
}

impl DatasetSplit {
    /// Builds a split, rejecting it when empty or when any sample violates
    /// the schema.
    pub fn from_samples(
        name: SplitName,
        samples: Vec<DocumentSample>,
        schema: &EntitySchema,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySplit(name.to_string()));
        }
        for sample in &samples {
            if let Some(v) = validate_sample(sample, schema).into_iter().next() {
                return Err(Error::Validation {
                    sample: sample.id.clone(),
                    violation: v.to_string(),
                });
            }
        }
        Ok(DatasetSplit { name, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A broken invariant on a sample; data, not an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub instance: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance {
            Some(i) => write!(f, "instance {i}, {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Checks every type invariant of `sample`; empty iff the sample is valid.
pub fn validate_sample(sample: &DocumentSample, schema: &EntitySchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = schema.num_entities();
    let mut geometry_ok = true;

    for (i, inst) in sample.instances.iter().enumerate() {
        if !inst.bbox.is_valid() {
            geometry_ok = false;
            out.push(Violation {
                field: "box".into(),
                instance: Some(i),
                message: format!(
                    "degenerate geometry [{}, {}, {}, {}]",
                    inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1
                ),
            });
        }
        if let Some(poly) = &inst.polygon {
            if polygon_area(poly).abs() <= 0.0 || poly.iter().flatten().any(|v| !v.is_finite()) {
                out.push(Violation {
                    field: "poly".into(),
                    instance: Some(i),
                    message: "polygon encloses no area".into(),
                });
            }
        }
        let len = inst.transcript.chars().count();
        if len == 0 || len > schema.max_chars {
            out.push(Violation {
                field: "text".into(),
                instance: Some(i),
                message: format!("transcript length {len} outside [1, {}]", schema.max_chars),
            });
        }
        if let Some(e) = inst.entity_id {
            if e >= m {
                out.push(Violation {
                    field: "entity".into(),
                    instance: Some(i),
                    message: format!("entity id {e} out of range for {m} entities"),
                });
            }
        }
    }

    let mut seen = HashSet::new();
    for (name, _) in &sample.entity_values {
        if !seen.insert(name.as_str()) {
            out.push(Violation {
                field: "entities".into(),
                instance: None,
                message: format!("entity `{name}` appears more than once"),
            });
        }
        if schema.entity_index(name).is_none() {
            out.push(Violation {
                field: "entities".into(),
                instance: None,
                message: format!("entity `{name}` is not in the schema"),
            });
        }
    }

    let on_instances: HashSet<usize> = sample
        .instances
        .iter()
        .filter_map(|i| i.entity_id)
        .filter(|&e| e < m)
        .collect();
    let in_values: HashSet<usize> = sample
        .entity_values
        .iter()
        .filter_map(|(k, _)| schema.entity_index(k))
        .collect();
    for &e in on_instances.difference(&in_values) {
        out.push(Violation {
            field: "entities".into(),
            instance: None,
            message: format!("entity `{}` is tagged on instances but has no value", schema.entities[e]),
        });
    }
    for &e in in_values.difference(&on_instances) {
        out.push(Violation {
            field: "entities".into(),
            instance: None,
            message: format!("entity `{}` has a value but no instance carries it", schema.entities[e]),
        });
    }

    if geometry_ok && out.is_empty() {
        if let Err(message) = value_spans(sample, schema) {
            out.push(Violation {
                field: "entities".into(),
                instance: None,
                message,
            });
        }
    }
    out
}

/// Reading order of boxes: rows top to bottom, left to right within a row.
/// Boxes whose vertical centers differ by less than half the smaller height
/// share a row.
pub fn reading_order(boxes: &[BBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (boxes[a].center(), boxes[b].center());
        ca.1.total_cmp(&cb.1).then(ca.0.total_cmp(&cb.0)).then(a.cmp(&b))
    });
    let mut order = Vec::with_capacity(idx.len());
    let mut row: Vec<usize> = Vec::new();
    let mut anchor: Option<BBox> = None;
    for i in idx {
        let b = boxes[i];
        let same_row = anchor.is_some_and(|a| {
            (a.center().1 - b.center().1).abs() < 0.5 * a.height().min(b.height())
        });
        if !same_row && !row.is_empty() {
            row.sort_by(|&a, &b| boxes[a].center().0.total_cmp(&boxes[b].center().0).then(a.cmp(&b)));
            order.append(&mut row);
        }
        if !same_row {
            anchor = Some(b);
        }
        row.push(i);
    }
    row.sort_by(|&a, &b| boxes[a].center().0.total_cmp(&boxes[b].center().0).then(a.cmp(&b)));
    order.append(&mut row);
    order
}

/// Locates, per instance, the character range of its transcript that holds
/// its entity's value.
///
/// Fragments of a multi-instance value are matched in reading order and
/// joined with [`VALUE_JOINER`]; the last fragment is the rightmost
/// occurrence of what remains of the value, earlier fragments are the
/// longest transcript suffix that prefixes the remainder.
pub fn value_spans(
    sample: &DocumentSample,
    schema: &EntitySchema,
) -> std::result::Result<Vec<Option<Range<usize>>>, String> {
    let mut spans = vec![None; sample.instances.len()];
    let order = reading_order(&sample.boxes());
    for (name, value) in &sample.entity_values {
        let Some(e) = schema.entity_index(name) else {
            continue;
        };
        let group: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| sample.instances[i].entity_id == Some(e))
            .collect();
        let mut rest: &str = value;
        for (k, &i) in group.iter().enumerate() {
            let text = &sample.instances[i].transcript;
            let last = k + 1 == group.len();
            let byte_range = if last {
                text.rfind(rest).map(|start| start..start + rest.len())
            } else {
                suffix_prefix(text, rest)
            };
            let Some(r) = byte_range.filter(|r| !r.is_empty()) else {
                return Err(format!(
                    "value of `{name}` cannot be located in transcript {:?} of instance {i}",
                    text
                ));
            };
            let frag_len = r.len();
            spans[i] = Some(char_range(text, r));
            if !last {
                rest = &rest[frag_len..];
                rest = match rest.strip_prefix(VALUE_JOINER) {
                    Some(r) => r,
                    None => {
                        return Err(format!("value of `{name}` does not join across instances"))
                    }
                };
            }
        }
    }
    Ok(spans)
}

fn suffix_prefix(text: &str, rest: &str) -> Option<Range<usize>> {
    text.char_indices()
        .map(|(b, _)| b)
        .find(|&b| {
            let suffix = &text[b..];
            rest.len() > suffix.len()
                && rest.starts_with(suffix)
                && rest[suffix.len()..].starts_with(VALUE_JOINER)
        })
        .map(|b| b..text.len())
}

fn char_range(text: &str, bytes: Range<usize>) -> Range<usize> {
    let start = text[..bytes.start].chars().count();
    start..start + text[bytes].chars().count()
}

// ---------------------------------------------------------------------------
// On-disk format

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub instances: Vec<InstanceRecord>,
    pub entities: EntityPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly: Option<[[f64; 2]; 4]>,
    pub text: String,
    pub entity: Option<String>,
}

/// JSON object of entity values that keeps duplicate keys and their order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityPairs(pub Vec<(String, String)>);

impl Serialize for EntityPairs {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for EntityPairs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PairsVisitor;
        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = EntityPairs;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of entity name to value")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut pairs = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    pairs.push((k, v));
                }
                Ok(EntityPairs(pairs))
            }
        }
        deserializer.deserialize_map(PairsVisitor)
    }
}

impl AnnotationRecord {
    pub fn from_sample(sample: &DocumentSample, schema: &EntitySchema) -> Self {
        AnnotationRecord {
            image: sample.id.clone(),
            instances: sample
                .instances
                .iter()
                .map(|inst| InstanceRecord {
                    bbox: inst.bbox.into(),
                    poly: inst.polygon,
                    text: inst.transcript.clone(),
                    entity: inst
                        .entity_id
                        .and_then(|e| schema.entities.get(e).cloned()),
                })
                .collect(),
            entities: EntityPairs(sample.entity_values.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub split: SplitName,
    /// Reject out-of-charset characters instead of mapping them to UNK.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            split: SplitName::Train,
            strict: false,
        }
    }
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>, schema: &EntitySchema, opts: LoadOptions) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let index = root.join(ANNOTATION_FILE);
    let file = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", index.display(), lineno + 1), e))?;
        samples.push(sample_from_record(root, record, schema, opts.strict)?);
    }
    DatasetSplit::from_samples(opts.split, samples, schema)
}

fn sample_from_record(
    root: &Path,
    record: AnnotationRecord,
    schema: &EntitySchema,
    strict: bool,
) -> Result<DocumentSample> {
    let image = image::open(root.join(&record.image))
        .map_err(|e| Error::ImageLoad {
            sample: record.image.clone(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let mut instances = Vec::with_capacity(record.instances.len());
    for (i, inst) in record.instances.into_iter().enumerate() {
        let entity_id = match inst.entity {
            Some(name) => Some(schema.entity_index(&name).ok_or_else(|| Error::SchemaMismatch {
                sample: record.image.clone(),
                entity: name.clone(),
            })?),
            None => None,
        };
        let transcript = normalize_or_reject(schema, &inst.text, strict).map_err(|c| Error::Validation {
            sample: record.image.clone(),
            violation: format!("instance {i}, text: character {c:?} not in charset"),
        })?;
        instances.push(TextInstance {
            bbox: inst.bbox.into(),
            polygon: inst.poly,
            transcript,
            entity_id,
        });
    }
    let mut entity_values = Vec::with_capacity(record.entities.0.len());
    for (name, value) in record.entities.0 {
        if schema.entity_index(&name).is_none() {
            return Err(Error::SchemaMismatch {
                sample: record.image.clone(),
                entity: name,
            });
        }
        let value = normalize_or_reject(schema, &value, strict).map_err(|c| Error::Validation {
            sample: record.image.clone(),
            violation: format!("entities: character {c:?} not in charset"),
        })?;
        entity_values.push((name, value));
    }
    Ok(DocumentSample {
        id: record.image,
        image,
        instances,
        entity_values,
    })
}

fn normalize_or_reject(schema: &EntitySchema, text: &str, strict: bool) -> std::result::Result<String, char> {
    if strict {
        if let Some(c) = text.chars().find(|&c| !schema.charset.contains(c)) {
            return Err(c);
        }
    }
    Ok(schema.normalize_text(text))
}

/// Writes images, `annotations.jsonl` and `schema.json` under `root`.
pub fn write_dataset(split: &DatasetSplit, schema: &EntitySchema, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    schema.save(root.join(SCHEMA_FILE))?;
    let index = root.join(ANNOTATION_FILE);
    let mut out = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    for sample in &split.samples {
        let path = root.join(&sample.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        sample.image.save(&path).map_err(|e| Error::ImageLoad {
            sample: sample.id.clone(),
            message: e.to_string(),
        })?;
        let record = AnnotationRecord::from_sample(sample, schema);
        let line = serde_json::to_string(&record).map_err(|e| Error::json("annotation record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&index, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> EntitySchema {
        EntitySchema::nutrition(5, 24).unwrap()
    }

    fn sample() -> DocumentSample {
        DocumentSample {
            id: "images/a.png".into(),
            image: RgbImage::new(64, 64),
            instances: vec![
                TextInstance {
                    bbox: BBox::new(2.0, 2.0, 60.0, 12.0),
                    polygon: None,
                    transcript: "Energy: 100kcal".into(),
                    entity_id: Some(0),
                },
                TextInstance {
                    bbox: BBox::new(2.0, 14.0, 40.0, 24.0),
                    polygon: None,
                    transcript: "Per 100g".into(),
                    entity_id: None,
                },
            ],
            entity_values: vec![("Energy".into(), "100kcal".into())],
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&sample(), &schema()).is_empty());
    }

    #[test]
    fn duplicate_entity_is_one_violation() {
        let mut s = sample();
        s.entity_values.push(("Energy".into(), "100kcal".into()));
        let v = validate_sample(&s, &schema());
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("Energy"));
    }

    #[test]
    fn degenerate_box_is_one_violation() {
        let mut s = sample();
        s.instances[1].bbox.x1 = s.instances[1].bbox.x0;
        let v = validate_sample(&s, &schema());
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "box");
        assert_eq!(v[0].instance, Some(1));
    }

    #[test]
    fn entity_id_out_of_range_fails_split_construction() {
        let mut s = sample();
        s.instances[1].entity_id = Some(schema().num_entities());
        let err = DatasetSplit::from_samples(SplitName::Train, vec![s], &schema()).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn empty_split_is_an_error() {
        let err = DatasetSplit::from_samples(SplitName::Test, vec![], &schema()).unwrap_err();
        assert!(matches!(err, Error::EmptySplit(_)));
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(EntitySchema::new(vec!["A".into(), "A".into()], "ab", 4).is_err());
        assert!(EntitySchema::new(vec!["A".into()], "aa", 4).is_err());
        assert!(EntitySchema::new(vec![], "ab", 4).is_err());
        assert!(EntitySchema::new(vec!["A".into()], format!("a{UNK_CHAR}"), 4).is_err());
    }

    #[test]
    fn vocab_reserves_specials() {
        let v = Vocab::new(&schema());
        assert_eq!(v.len(), DEFAULT_CHARSET.chars().count() + 4);
        let ids = v.encode("Fat~");
        assert_eq!(ids[3], Vocab::UNK);
        assert_eq!(v.char_of(ids[0]), Some('F'));
        assert_eq!(v.char_of(Vocab::EOS), None);
    }

    #[test]
    fn reading_order_rows_then_columns() {
        let boxes = [
            BBox::new(50.0, 20.0, 90.0, 30.0),
            BBox::new(0.0, 21.0, 40.0, 31.0),
            BBox::new(0.0, 0.0, 40.0, 10.0),
        ];
        assert_eq!(reading_order(&boxes), vec![2, 1, 0]);
    }

    #[test]
    fn multi_instance_values_join_in_reading_order() {
        let mut s = sample();
        s.instances[1].transcript = "per serving 2".into();
        s.instances[0].transcript = "Energy: 100kcal".into();
        s.instances[1].entity_id = Some(0);
        s.entity_values = vec![("Energy".into(), "100kcal 2".into())];
        let spans = value_spans(&s, &schema()).unwrap();
        assert_eq!(spans[0], Some(8..15));
        assert_eq!(spans[1], Some(12..13));
    }

    #[test]
    fn underivable_value_is_reported() {
        let mut s = sample();
        s.entity_values = vec![("Energy".into(), "200kcal".into())];
        let v = validate_sample(&s, &schema());
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn duplicate_keys_survive_json() {
        let rec: AnnotationRecord = serde_json::from_str(
            r#"{"image":"a.png","instances":[],"entities":{"Fat":"1g","Fat":"2g"}}"#,
        )
        .unwrap();
        assert_eq!(rec.entities.0.len(), 2);
    }
}
