use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::ops::{Im2Col, Relu};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

pub const MIN_IMAGE_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the four stages; the last is `C_f`.
    pub channels: [usize; 4],
    pub strides: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [32, 64, 128, 128],
            strides: [1, 2, 2, 1],
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }
}

/// 3x3 convolution over NHWC tensors, lowered to a matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `(k*k*C_in, C_out)`.
    pub weight: Tensor,
    pub bias: Tensor,
    op: Im2Col,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = kernel * kernel * cin;
        Ok(Conv2d {
            weight: store.var(&format!("{name}.weight"), &[fan_in, cout], Init::He { fan_in })?,
            bias: store.var(&format!("{name}.bias"), &[cout], Init::Zeros)?,
            op: Im2Col {
                kernel,
                stride,
                padding: kernel / 2,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (ho, wo) = self.op.output_hw(h, w);
        let cols = x.contiguous()?.apply_op1(self.op)?;
        let k = cols.dim(3)?;
        let y = cols
            .reshape((b * ho * wo, k))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, self.weight.dim(1)?))?)
    }
}

/// Shared visual features of a batch of images.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `(B, H', W', C_f)`, channels last.
    pub tensor: Tensor,
    /// Input pixels per feature cell along each axis.
    pub stride: usize,
}

impl FeatureMap {
    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }

    /// `(H', W', C_f)` slice of image `i`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.tensor.get(i)?)
    }
}

/// Four-stage convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
    stride: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (i, (&cout, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            stages.push(Conv2d::new(store, &format!("{name}.stage{i}"), cin, cout, 3, stride)?);
            cin = cout;
        }
        Ok(Backbone {
            stages,
            stride: cfg.stride(),
        })
    }

    /// `images`: `(B, H, W, 3)` as produced by [`images_to_tensor`].
    pub fn extract_features(&self, images: &Tensor) -> Result<FeatureMap> {
        let (_, h, w, c) = images.dims4()?;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE || c != 3 {
            return Err(Error::Input(format!(
                "image of {h}x{w}x{c} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}x3"
            )));
        }
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?.contiguous()?.apply_op1(Relu)?;
        }
        Ok(FeatureMap {
            tensor: x,
            stride: self.stride,
        })
    }
}

/// Stacks equally sized images into `(B, H, W, 3)`, scaled to `[0, 1]` and
/// shifted to zero mean per image.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Input(format!(
                "batch mixes image sizes {:?} and {:?}",
                (w, h),
                img.dimensions()
            )));
        }
        let raw = img.as_raw();
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len().max(1) as f64 / 255.0;
        data.extend(raw.iter().map(|&v| v as f64 / 255.0 - mean));
    }
    Ok(Tensor::from_vec(data, (images.len(), h as usize, w as usize, 3), device)?.to_dtype(dtype)?)
}
