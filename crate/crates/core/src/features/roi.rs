use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::backbone::FeatureMap;
use super::ops::RoiAlignOp;
use crate::datamodel::BBox;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiAlignConfig {
    pub pooled_h: usize,
    pub pooled_w: usize,
    /// Bilinear sample points per bin along each axis.
    pub sampling_ratio: usize,
    /// Boxes narrower than `min_aspect` times their height are widened to
    /// the right before pooling, so a bin spans a fixed number of pixels
    /// and character k of every line lands in the same bins. 0 disables it.
    #[serde(default)]
    pub min_aspect: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            pooled_h: 4,
            pooled_w: 16,
            sampling_ratio: 2,
            min_aspect: 0,
        }
    }
}

impl RoiAlignConfig {
    pub fn cells(&self) -> usize {
        self.pooled_h * self.pooled_w
    }

    /// Sparse sampling plan for `boxes` (pixel coordinates) over an
    /// `fh x fw` map with the given stride. Boxes are clipped to the map.
    pub fn build(&self, boxes: &[BBox], stride: usize, fh: usize, fw: usize) -> RoiAlignOp {
        let (ph, pw, sr) = (self.pooled_h, self.pooled_w, self.sampling_ratio.max(1));
        let s = stride as f64;
        let norm = 1.0 / (sr * sr) as f64;
        let mut offsets = Vec::with_capacity(boxes.len() * ph * pw + 1);
        let mut taps = Vec::new();
        offsets.push(0);
        for b in boxes {
            let mut b = b.clip(fw as f64 * s, fh as f64 * s);
            // Widened bins may run past the map; those samples are zero.
            b.x1 = b.x1.max(b.x0 + self.min_aspect as f64 * (b.y1 - b.y0));
            let (x0, y0) = (b.x0 / s - 0.5, b.y0 / s - 0.5);
            let bin_w = (b.x1 - b.x0).max(0.0) / s / pw as f64;
            let bin_h = (b.y1 - b.y0).max(0.0) / s / ph as f64;
            for py in 0..ph {
                for px in 0..pw {
                    for iy in 0..sr {
                        let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                        for ix in 0..sr {
                            let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                            bilinear_taps(y, x, fh, fw, norm, &mut taps);
                        }
                    }
                    offsets.push(taps.len());
                }
            }
        }
        RoiAlignOp {
            cells: boxes.len() * ph * pw,
            offsets,
            taps,
            feature_cells: fh * fw,
        }
    }

    /// Pools image `index` of `fmap` into `(N, P_h * P_w, C_f)`.
    pub fn pool_grid(&self, fmap: &FeatureMap, index: usize, boxes: &[BBox]) -> Result<Tensor> {
        let c = fmap.channels();
        if boxes.is_empty() {
            return Ok(Tensor::zeros((0, self.cells(), c), fmap.tensor.dtype(), fmap.tensor.device())?);
        }
        let op = self.build(boxes, fmap.stride, fmap.height(), fmap.width());
        let pooled = fmap.image(index)?.contiguous()?.apply_op1(op)?;
        Ok(pooled.reshape((boxes.len(), self.cells(), c))?)
    }
}

/// Appends the four weighted neighbours of `(y, x)`; samples more than one
/// cell outside the map contribute nothing.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y_lo, mut x_lo) = (y.floor() as usize, x.floor() as usize);
    let (y_hi, x_hi);
    let (mut y, mut x) = (y, x);
    if y_lo >= h - 1 {
        y_lo = h - 1;
        y_hi = h - 1;
        y = y_lo as f64;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= w - 1 {
        x_lo = w - 1;
        x_hi = w - 1;
        x = x_lo as f64;
    } else {
        x_hi = x_lo + 1;
    }
    let (ly, lx) = (y - y_lo as f64, x - x_lo as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (idx, wt) in [
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ] {
        if wt != 0.0 {
            taps.push((idx, wt * scale));
        }
    }
}

/// Per-instance features of one image.
#[derive(Clone, Debug)]
pub struct InstanceFeatures {
    /// `(N, C)`.
    pub tensor: Tensor,
    /// `(N, P_h * P_w, C_f)`, kept as recognizer memory.
    pub grid: Tensor,
    pub boxes: Vec<BBox>,
}

impl InstanceFeatures {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Region pooling followed by a linear projection of the flattened grid.
#[derive(Clone, Debug)]
pub struct InstanceProjector {
    pub roi: RoiAlignConfig,
    pub proj: Linear,
}

impl InstanceProjector {
    pub fn new(store: &mut ParamStore, name: &str, roi: RoiAlignConfig, feature_channels: usize, dim: usize) -> Result<Self> {
        Ok(InstanceProjector {
            roi,
            proj: Linear::new(store, &format!("{name}.proj"), roi.cells() * feature_channels, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn roi_pool(&self, fmap: &FeatureMap, index: usize, boxes: &[BBox]) -> Result<InstanceFeatures> {
        if index >= fmap.batch() {
            return Err(Error::Input(format!("image {index} not in a batch of {}", fmap.batch())));
        }
        let grid = self.roi_grid(fmap, index, boxes)?;
        let n = boxes.len();
        let tensor = if n == 0 {
            Tensor::zeros((0, self.dim()), fmap.tensor.dtype(), fmap.tensor.device())?
        } else {
            self.proj.forward(&grid.reshape((n, self.proj.in_dim()))?)?
        };
        Ok(InstanceFeatures {
            tensor,
            grid,
            boxes: boxes.to_vec(),
        })
    }

    fn roi_grid(&self, fmap: &FeatureMap, index: usize, boxes: &[BBox]) -> Result<Tensor> {
        self.roi.pool_grid(fmap, index, boxes)
    }
}
