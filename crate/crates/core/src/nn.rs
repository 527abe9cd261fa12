//! Parameter storage and the small set of layers the model is built from.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive mask value for disallowed attention positions.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
    /// Glorot uniform for a `fan_in x fan_out` map.
    Xavier { fan_in: usize, fan_out: usize },
    /// He normal for ReLU layers.
    He { fan_in: usize },
}

/// Named, ordered collection of trainable variables with seeded
/// initialization.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            names: Vec::new(),
            vars: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates variable `name`; names must be unique.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => self.normal(n, std),
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::He { fan_in } => self.normal(n, (2.0 / fan_in as f64).sqrt()),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.names.push(name.to_string());
        self.vars.push(var);
        Ok(t)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; n];
        }
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.vars.iter().map(|v| v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path.as_ref())?;
        Ok(())
    }

    /// Overwrites every variable from a safetensors file with matching names
    /// and shapes.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.assign(&loaded)
    }

    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in self.names.iter().zip(&self.vars) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Dense layer; weight stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(
            store,
            name,
            input,
            output,
            Init::Xavier {
                fan_in: input,
                fan_out: output,
            },
            true,
        )
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(store, name, input, output, Init::Zeros, true)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.var(&format!("{name}.weight"), &[input, output], init)?;
        let bias = if bias {
            Some(store.var(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (last, lead) = dims.split_last().ok_or_else(|| Error::Input("linear on a scalar".into()))?;
        if *last != self.in_dim() {
            return Err(Error::Shape {
                axis: "linear input",
                expected: self.in_dim(),
                actual: *last,
            });
        }
        let rows: usize = lead.iter().product();
        let mut y = x.reshape((rows, *last))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = lead.to_vec();
        out_dims.push(self.out_dim());
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.var(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: store.var(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn softmax(x: &Tensor, dim: D) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: D) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// `query`: `(B, Lq, C)`, `memory`: `(B, Lk, C)`, `mask`: additive,
    /// broadcastable to `(B, heads, Lq, Lk)`. Returns the projected output
    /// and the attention weights.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, lq, c) = query.dims3()?;
        let lk = memory.dim(1)?;
        let h = self.heads;
        let d = c / h;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, d))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(query)?, lq)?;
        let k = split(self.key.forward(memory)?, lk)?;
        let v = split(self.value.forward(memory)?, lk)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = softmax(&scores, D::Minus1)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, c))?;
        Ok((self.output.forward(&ctx)?, weights))
    }
}

/// Position-wise two-layer ReLU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            output: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.hidden.forward(x)?.relu()?)
    }
}

/// Fixed sinusoidal encoding, `len x dim`, row-major.
pub fn sinusoidal(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// 2-D sinusoidal encoding for an `h x w` grid: first half of the channels
/// encodes the row, second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let rows = sinusoidal(h, half);
    let cols = sinusoidal(w, dim - half);
    let mut out = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let cell = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            cell[..half].copy_from_slice(&rows[y * half..(y + 1) * half]);
            cell[half..].copy_from_slice(&cols[x * (dim - half)..(x + 1) * (dim - half)]);
        }
    }
    out
}

/// Additive causal mask `(len, len)`: position `t` may attend to `<= t`.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(DType::F64, 9);
        let mut b = ParamStore::new(DType::F64, 9);
        let ta = a.var("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let tb = b.var("w", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec2::<f64>().unwrap(), tb.to_vec2::<f64>().unwrap());
        assert!(a.var("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut s = ParamStore::new(DType::F64, 1);
        let mha = MultiHeadAttention::new(&mut s, "a", 8, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let (_, w) = mha.forward(&x, &x, None).unwrap();
        for row in w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut s = ParamStore::new(DType::F64, 1);
        let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().sum::<f64>().abs() < 1e-9);
        assert!((y.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softplus_matches_definition() {
        let x = Tensor::new(&[-50.0f64, -1.0, 0.0, 2.0, 60.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (v, xv) in y.iter().zip([-50.0f64, -1.0, 0.0, 2.0, 60.0]) {
            let want = if xv > 30.0 { xv } else { (1.0 + xv.exp()).ln() };
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }
}
