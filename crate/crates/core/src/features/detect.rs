use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::backbone::{Conv2d, FeatureMap};
use crate::datamodel::{BBox, DocumentSample};
use crate::error::Result;
use crate::nn::{Linear, ParamStore};
use crate::objectives::focal_elements;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    /// Sorted by descending score.
    pub boxes: Vec<ScoredBox>,
}

impl DetectionOutput {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Ground-truth boxes with score 1 in annotation order.
pub fn oracle_boxes(sample: &DocumentSample) -> DetectionOutput {
    DetectionOutput {
        boxes: sample
            .instances
            .iter()
            .map(|i| ScoredBox { bbox: i.bbox, score: 1.0 })
            .collect(),
    }
}

/// Greedy non-maximum suppression. Keeps a box unless it overlaps an
/// already kept box with IoU above `iou_threshold`; output sorted by score,
/// ties by input order.
pub fn nms(mut boxes: Vec<ScoredBox>, iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let cand = boxes[i];
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= iou_threshold) {
            kept.push(cand);
        }
    }
    boxes.clear();
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Cells with score strictly above this are text.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.5,
            nms_iou: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Maximum horizontal reach, in strides, regressed by one cell.
const REACH: f64 = 2.0;

/// Dense text/non-text head: one score logit and four edge distances
/// `(top, bottom, left, right)` per cell, in stride units.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub conv: Conv2d,
    pub out: Linear,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, feature_channels: usize, hidden: usize) -> Result<Self> {
        Ok(DetectionHead {
            conv: Conv2d::new(store, &format!("{name}.conv"), feature_channels, hidden, 3, 1)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, 5)?,
        })
    }

    /// `(B, H', W', 5)` raw outputs.
    pub fn forward(&self, fmap: &FeatureMap) -> Result<Tensor> {
        self.out.forward(&self.conv.forward(&fmap.tensor)?.relu()?)
    }

    pub fn detect(&self, fmap: &FeatureMap, cfg: &DetectConfig) -> Result<Vec<DetectionOutput>> {
        let raw = self.forward(fmap)?.to_dtype(DType::F64)?;
        let (h, w) = (fmap.height(), fmap.width());
        (0..fmap.batch())
            .map(|i| {
                let data = raw.get(i)?.flatten_all()?.to_vec1::<f64>()?;
                Ok(decode(&data, h, w, fmap.stride, cfg))
            })
            .collect()
    }

    /// Focal loss over cell scores (normalized by positives) plus L1 on the
    /// regressed distances of positive cells.
    pub fn loss(&self, fmap: &FeatureMap, gt: &[Vec<BBox>], cfg: &DetectConfig) -> Result<Tensor> {
        let raw = self.forward(fmap)?;
        let (b, h, w, _) = raw.dims4()?;
        let mut labels = Vec::with_capacity(b * h * w);
        let mut pos = Vec::new();
        let mut reg = Vec::new();
        for (i, boxes) in gt.iter().enumerate().take(b) {
            let t = cell_targets(boxes, h, w, fmap.stride);
            for (c, target) in t.into_iter().enumerate() {
                match target {
                    Some(d) => {
                        labels.push(1.0);
                        pos.push((i * h * w + c) as u32);
                        reg.extend_from_slice(&d);
                    }
                    None => labels.push(0.0),
                }
            }
        }
        let (device, dtype) = (raw.device().clone(), raw.dtype());
        let flat = raw.reshape((b * h * w, 5))?;
        let labels = Tensor::from_vec(labels, b * h * w, &device)?.to_dtype(dtype)?;
        let scores = flat.narrow(1, 0, 1)?.squeeze(1)?;
        let npos = pos.len();
        let cls = (focal_elements(&scores, &labels, cfg.focal_alpha, cfg.focal_gamma)?.sum_all()? / npos.max(1) as f64)?;
        if npos == 0 {
            return Ok(cls);
        }
        let idx = Tensor::from_vec(pos, npos, &device)?;
        let target = Tensor::from_vec(reg, (npos, 4), &device)?.to_dtype(dtype)?;
        let l1 = flat.narrow(1, 1, 4)?.contiguous()?.index_select(&idx, 0)?.sub(&target)?.abs()?.mean_all()?;
        Ok((cls + l1)?)
    }
}

/// Regression targets for every cell of an `h x w` map; `None` marks
/// background. A cell is positive when its center lies inside a box
/// horizontally and within half a stride of the box's vertical center.
/// Overlapping claims go to the smaller box.
pub fn cell_targets(boxes: &[BBox], h: usize, w: usize, stride: usize) -> Vec<Option<[f64; 4]>> {
    let s = stride as f64;
    let mut out: Vec<Option<[f64; 4]>> = vec![None; h * w];
    let mut owner_area = vec![f64::INFINITY; h * w];
    for b in boxes {
        let (_, bcy) = b.center();
        for y in 0..h {
            let cy = (y as f64 + 0.5) * s;
            if (cy - bcy).abs() > s / 2.0 || cy <= b.y0 || cy >= b.y1 {
                continue;
            }
            for x in 0..w {
                let cx = (x as f64 + 0.5) * s;
                if cx <= b.x0 || cx >= b.x1 || b.area() >= owner_area[y * w + x] {
                    continue;
                }
                owner_area[y * w + x] = b.area();
                out[y * w + x] = Some([
                    (cy - b.y0) / s,
                    (b.y1 - cy) / s,
                    (cx - b.x0).min(REACH * s) / s,
                    (b.x1 - cx).min(REACH * s) / s,
                ]);
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns one image's raw head output (`h * w * 5`, row-major) into boxes:
/// 4-connected components of cells above threshold, edges averaged from
/// the outermost columns, then NMS.
pub fn decode(raw: &[f64], h: usize, w: usize, stride: usize, cfg: &DetectConfig) -> DetectionOutput {
    let s = stride as f64;
    let on: Vec<bool> = (0..h * w).map(|c| sigmoid(raw[c * 5]) > cfg.score_threshold).collect();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut cells = Vec::new();
        seen[start] = true;
        while let Some(c) = stack.pop() {
            cells.push(c);
            let (y, x) = (c / w, c % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(c - w);
            }
            if y + 1 < h {
                nb.push(c + w);
            }
            if x > 0 {
                nb.push(c - 1);
            }
            if x + 1 < w {
                nb.push(c + 1);
            }
            for n in nb {
                if on[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        let min_x = cells.iter().map(|c| c % w).min().unwrap_or(0);
        let max_x = cells.iter().map(|c| c % w).max().unwrap_or(0);
        let (mut x0, mut n0, mut x1, mut n1, mut y0, mut y1, mut score) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &c in &cells {
            let (y, x) = (c / w, c % w);
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            let r = &raw[c * 5..c * 5 + 5];
            score += sigmoid(r[0]);
            y0 += cy - r[1].max(0.0) * s;
            y1 += cy + r[2].max(0.0) * s;
            if x == min_x {
                x0 += cx - r[3].max(0.0) * s;
                n0 += 1.0;
            }
            if x == max_x {
                x1 += cx + r[4].max(0.0) * s;
                n1 += 1.0;
            }
        }
        let n = cells.len() as f64;
        let bbox = BBox::new(x0 / n0, y0 / n, x1 / n1, y1 / n).clip(w as f64 * s, h as f64 * s);
        if bbox.is_valid() {
            boxes.push(ScoredBox { bbox, score: score / n });
        }
    }
    DetectionOutput {
        boxes: nms(boxes, cfg.nms_iou),
    }
}
