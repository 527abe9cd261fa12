//! Custom tensor ops with explicit backward passes: patch extraction for
//! convolutions, a rectifier, and sparse bilinear region pooling.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op input must be contiguous"),
    }
}

fn tensor_data<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Extracts `k x k` patches (zero padded) from an NHWC tensor, producing
/// `(B, Ho, Wo, k*k*C)` with patch layout `(ky, kx, c)`.
#[derive(Clone, Copy, Debug)]
pub struct Im2Col {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Im2Col {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn forward_impl<T: WithDType>(&self, src: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let patch = k * k * c;
        let mut out = vec![T::zero(); b * ho * wo * patch];
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((n * ho + oy) * wo + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src_off = ((n * h + iy as usize) * w + ix as usize) * c;
                            let dst_off = base + (ky * k + kx) * c;
                            out[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_impl<T: WithDType>(&self, grad: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let patch = k * k * c;
        let mut out = vec![T::zero(); b * h * w * c];
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((n * ho + oy) * wo + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst_off = ((n * h + iy as usize) * w + ix as usize) * c;
                            let src_off = base + (ky * k + kx) * c;
                            for (d, s) in out[dst_off..dst_off + c].iter_mut().zip(&grad[src_off..src_off + c]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let (ho, wo) = self.output_hw(h, w);
        let shape = Shape::from((b, ho, wo, self.kernel * self.kernel * c));
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(self.forward_impl(contiguous::<f32>(storage, layout)?, (b, h, w, c))),
            DType::F64 => CpuStorage::F64(self.forward_impl(contiguous::<f64>(storage, layout)?, (b, h, w, c))),
            dt => candle_core::bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let grad = match arg.dtype() {
            DType::F32 => {
                let g = self.backward_impl(&tensor_data::<f32>(grad_res)?, dims);
                Tensor::from_vec(g, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let g = self.backward_impl(&tensor_data::<f64>(grad_res)?, dims);
                Tensor::from_vec(g, arg.shape(), arg.device())?
            }
            dt => candle_core::bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}

/// Rectifier with a one-pass backward (`grad` where the output is
/// positive). Worth it on full-resolution feature maps, where the generic
/// backward materializes several temporaries.
#[derive(Clone, Copy, Debug)]
pub struct Relu;

fn relu_grad<T: WithDType>(out: &[T], grad: &[T]) -> Vec<T> {
    out.iter().zip(grad).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect()
}

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu-fused"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
        }
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(run(contiguous::<f32>(storage, layout)?)),
            DType::F64 => CpuStorage::F64(run(contiguous::<f64>(storage, layout)?)),
            dt => candle_core::bail!("relu: unsupported dtype {dt:?}"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = match arg.dtype() {
            DType::F32 => Tensor::from_vec(
                relu_grad(&tensor_data::<f32>(res)?, &tensor_data::<f32>(grad_res)?),
                arg.shape(),
                arg.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                relu_grad(&tensor_data::<f64>(res)?, &tensor_data::<f64>(grad_res)?),
                arg.shape(),
                arg.device(),
            )?,
            dt => candle_core::bail!("relu: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}

/// Bilinear region pooling over one `(H, W, C)` feature map, expressed as
/// a sparse linear map from feature cells to output cells.
#[derive(Clone, Debug)]
pub struct RoiAlignOp {
    /// Output cells (`N * P`).
    pub cells: usize,
    /// CSR row offsets into `taps`, length `cells + 1`.
    pub offsets: Vec<usize>,
    /// `(feature cell index, weight)`.
    pub taps: Vec<(usize, f64)>,
    pub feature_cells: usize,
}

impl RoiAlignOp {
    fn forward_impl<T: WithDType>(&self, src: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.cells * c];
        for cell in 0..self.cells {
            let dst = &mut out[cell * c..(cell + 1) * c];
            for &(idx, w) in &self.taps[self.offsets[cell]..self.offsets[cell + 1]] {
                let w = T::from_f64(w);
                for (d, s) in dst.iter_mut().zip(&src[idx * c..(idx + 1) * c]) {
                    *d += w * *s;
                }
            }
        }
        out
    }

    fn backward_impl<T: WithDType>(&self, grad: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.feature_cells * c];
        for cell in 0..self.cells {
            let g = &grad[cell * c..(cell + 1) * c];
            for &(idx, w) in &self.taps[self.offsets[cell]..self.offsets[cell + 1]] {
                let w = T::from_f64(w);
                for (d, s) in out[idx * c..(idx + 1) * c].iter_mut().zip(g) {
                    *d += w * *s;
                }
            }
        }
        out
    }
}

impl CustomOp1 for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi-align"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (h, w, c) = layout.shape().dims3()?;
        if h * w != self.feature_cells {
            candle_core::bail!("roi-align: feature map has {} cells, expected {}", h * w, self.feature_cells);
        }
        let shape = Shape::from((self.cells, c));
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(self.forward_impl(contiguous::<f32>(storage, layout)?, c)),
            DType::F64 => CpuStorage::F64(self.forward_impl(contiguous::<f64>(storage, layout)?, c)),
            dt => candle_core::bail!("roi-align: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let c = arg.dim(2)?;
        let grad = match arg.dtype() {
            DType::F32 => Tensor::from_vec(
                self.backward_impl(&tensor_data::<f32>(grad_res)?, c),
                arg.shape(),
                arg.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                self.backward_impl(&tensor_data::<f64>(grad_res)?, c),
                arg.shape(),
                arg.device(),
            )?,
            dt => candle_core::bail!("roi-align: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}
