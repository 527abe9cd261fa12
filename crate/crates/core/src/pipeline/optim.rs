use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum OptimizerKind {
    /// The learning rate multiplies the adaptive step.
    Adadelta {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_adadelta_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_rho() -> f64 {
    0.9
}
fn default_adadelta_eps() -> f64 {
    1e-6
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adadelta {
            rho: default_rho(),
            eps: default_adadelta_eps(),
        }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    fn slots(&self) -> usize {
        match self {
            OptimizerKind::Sgd { .. } => 1,
            _ => 2,
        }
    }

    fn slot_names(&self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Adadelta { .. } => &["sq_grad", "sq_delta"],
            OptimizerKind::Sgd { .. } => &["velocity"],
            OptimizerKind::Adam { .. } => &["m", "v"],
        }
    }
}

/// First-order optimizer over a fixed list of named variables. Variables
/// without a gradient in a step are left untouched. Updates run on host
/// vectors in f64; the slots are kept in f64 as well.
pub struct Optimizer {
    kind: OptimizerKind,
    names: Vec<String>,
    vars: Vec<Var>,
    state: Vec<Vec<Vec<f64>>>,
    steps: usize,
    grad_clip: Option<f64>,
}

fn host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, names: &[String], vars: &[Var], grad_clip: Option<f64>) -> Result<Self> {
        let state = vars
            .iter()
            .map(|v| vec![vec![0.0; v.elem_count()]; kind.slots()])
            .collect();
        Ok(Optimizer {
            kind,
            names: names.to_vec(),
            vars: vars.to_vec(),
            state,
            steps: 0,
            grad_clip,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update with learning rate `lr`. Returns the global
    /// gradient norm before clipping.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let grads: Vec<Option<Vec<f64>>> = self
            .vars
            .iter()
            .map(|v| grads.get(v.as_tensor()).map(host).transpose())
            .collect::<Result<_>>()?;
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                part: "gradient norm",
                value: norm,
            });
        }
        let scale = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        for ((var, state), grad) in self.vars.iter().zip(&mut self.state).zip(grads) {
            let Some(g) = grad else { continue };
            let mut x = host(var.as_tensor())?;
            match self.kind {
                OptimizerKind::Adadelta { rho, eps } => {
                    let (sq_grad, sq_delta) = state.split_at_mut(1);
                    for (((x, g), s), d) in x.iter_mut().zip(&g).zip(&mut sq_grad[0]).zip(&mut sq_delta[0]) {
                        let g = g * scale;
                        *s = rho * *s + (1.0 - rho) * g * g;
                        let delta = (*d + eps).sqrt() / (*s + eps).sqrt() * g;
                        *d = rho * *d + (1.0 - rho) * delta * delta;
                        *x -= lr * delta;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    for ((x, g), v) in x.iter_mut().zip(&g).zip(&mut state[0]) {
                        *v = momentum * *v + g * scale;
                        *x -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (m, v) = state.split_at_mut(1);
                    for (((x, g), m), v) in x.iter_mut().zip(&g).zip(&mut m[0]).zip(&mut v[0]) {
                        let g = g * scale;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            let current = var.as_tensor();
            var.set(&Tensor::from_vec(x, current.shape(), current.device())?.to_dtype(current.dtype())?)?;
        }
        Ok(norm)
    }

    /// Slot tensors keyed `"{param}/{slot}"`, stored in f64.
    pub fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for ((name, var), slots) in self.names.iter().zip(&self.vars).zip(&self.state) {
            for (slot, values) in self.kind.slot_names().iter().zip(slots) {
                let t = Tensor::from_vec(values.clone(), var.shape(), var.device())?;
                out.insert(format!("{name}/{slot}"), t);
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, steps: usize) -> Result<()> {
        for ((name, var), slots) in self.names.iter().zip(&self.vars).zip(&mut self.state) {
            for (slot, values) in self.kind.slot_names().iter().zip(slots.iter_mut()) {
                let key = format!("{name}/{slot}");
                let loaded = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if loaded.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                }
                *values = host(loaded)?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
