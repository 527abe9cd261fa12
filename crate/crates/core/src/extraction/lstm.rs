use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Init, ParamStore};

/// Single-direction LSTM cell weights; gate order `i, f, g, o`.
#[derive(Clone, Debug)]
struct Direction {
    input: Tensor,
    hidden: Tensor,
    bias: Tensor,
}

impl Direction {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        // Forget gates start open.
        let bias_name = format!("{name}.bias");
        let bias = store.var(&bias_name, &[4 * hidden], Init::Zeros)?;
        let values: Vec<f64> = (0..4 * hidden).map(|i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 }).collect();
        if let Some(v) = store.get(&bias_name) {
            v.set(&Tensor::new(values, store.device())?.to_dtype(store.dtype())?)?;
        }
        Ok(Direction {
            input: store.var(
                &format!("{name}.input"),
                &[dim, 4 * hidden],
                Init::Xavier {
                    fan_in: dim,
                    fan_out: 4 * hidden,
                },
            )?,
            hidden: store.var(
                &format!("{name}.hidden"),
                &[hidden, 4 * hidden],
                Init::Xavier {
                    fan_in: hidden,
                    fan_out: 4 * hidden,
                },
            )?,
            bias,
        })
    }

    /// `x`: `(N, L, C)` -> `(N, L, H)`, left to right.
    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let h_dim = self.hidden.dim(0)?;
        let projected = x
            .reshape((n * l, c))?
            .matmul(&self.input)?
            .broadcast_add(&self.bias)?
            .reshape((n, l, 4 * h_dim))?;
        let mut h = Tensor::zeros((n, h_dim), x.dtype(), x.device())?;
        let mut cell = h.clone();
        let mut outputs = Vec::with_capacity(l);
        for t in 0..l {
            let gates = (projected.narrow(1, t, 1)?.squeeze(1)? + h.matmul(&self.hidden)?)?;
            let i = sigmoid(&gates.narrow(1, 0, h_dim)?)?;
            let f = sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
            cell = ((f * &cell)? + (i * g)?)?;
            h = (o * cell.tanh()?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// One-layer bidirectional LSTM; each direction has `dim / 2` units so the
/// output width equals the input width.
#[derive(Clone, Debug)]
pub struct BiLstm {
    forward: Direction,
    backward: Direction,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("BiLSTM width {dim} must be even")));
        }
        Ok(BiLstm {
            forward: Direction::new(store, &format!("{name}.fwd"), dim, dim / 2)?,
            backward: Direction::new(store, &format!("{name}.bwd"), dim, dim / 2)?,
        })
    }

    /// `x`: `(N, L, C)`. The backward direction reads each sequence from
    /// its own last valid step, so padding never leaks into valid steps.
    pub fn forward(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (n, l, _) = x.dims3()?;
        if n == 0 || l == 0 {
            return Ok(x.clone());
        }
        let fwd = self.forward.run(x)?;
        let mut rev = Vec::with_capacity(n * l);
        for (i, &len) in lengths.iter().enumerate() {
            for t in 0..l {
                let src = if t < len { len - 1 - t } else { t };
                rev.push((i * l + src) as u32);
            }
        }
        let rev = Tensor::new(rev, x.device())?;
        let flip = |t: &Tensor| -> Result<Tensor> {
            let (n, l, c) = t.dims3()?;
            Ok(t.reshape((n * l, c))?.index_select(&rev, 0)?.reshape((n, l, c))?)
        };
        let bwd = flip(&self.backward.run(&flip(x)?)?)?;
        Ok(Tensor::cat(&[fwd, bwd], D::Minus1)?)
    }
}
