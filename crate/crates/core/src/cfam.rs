//! Contrast-guided feature adjustment: self-attention over the instances of
//! one image, entity features conditioned on them, and the instance-entity
//! similarity matrix.

use candle_core::{Device, DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::DocumentSample;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfamMode {
    #[default]
    On,
    Off,
    ClassifyHead,
}

/// How the instance axis of `E` is mapped onto the `M` entities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EntityFc {
    /// `[mean; max]` over instances, then an affine map `2C -> C*M`.
    #[default]
    Pooled,
    /// Affine map over an instance axis of fixed length `n`.
    Literal { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfamConfig {
    pub heads: usize,
    pub blocks: usize,
    pub entity_fc: EntityFc,
    pub embedding_std: f64,
}

impl Default for CfamConfig {
    fn default() -> Self {
        CfamConfig {
            heads: 8,
            blocks: 3,
            entity_fc: EntityFc::Pooled,
            embedding_std: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CfamOutput {
    /// `E`: `(N, C)`.
    pub encoded: Tensor,
    /// `L'`: `(M, C)`.
    pub entity_features: Tensor,
    /// `S`: `(N, M)`.
    pub similarity: Tensor,
    /// `E'`: `(C, M)`.
    pub intermediate: Tensor,
    /// Attention weights per block, `(heads, N, N)`; empty when `N = 0`.
    pub attention: Vec<Tensor>,
}

/// `x <- LN(x + MSA(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl SelfAttentionBlock {
    /// `x`: `(N, C)`. Returns the block output and `(heads, N, N)` weights.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c) = x.dims2()?;
        let x3 = x.reshape((1, n, c))?;
        let (msa, weights) = self.attn.forward(&x3, &x3, None)?;
        let out = self.norm.forward(&(x3 + msa)?)?.reshape((n, c))?;
        Ok((out, weights.squeeze(0)?))
    }
}

#[derive(Clone, Debug)]
enum FcLayer {
    Pooled(Linear),
    Literal { weight: Tensor, bias: Tensor, n: usize },
}

#[derive(Clone, Debug)]
pub struct Cfam {
    pub blocks: Vec<SelfAttentionBlock>,
    /// `L`: `(M, C)`.
    pub entities: Tensor,
    fc: FcLayer,
    dim: usize,
    num_entities: usize,
}

impl Cfam {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CfamConfig, dim: usize, num_entities: usize) -> Result<Self> {
        let blocks = (0..cfg.blocks)
            .map(|k| {
                Ok(SelfAttentionBlock {
                    attn: MultiHeadAttention::new(store, &format!("{name}.block{k}.attn"), dim, cfg.heads)?,
                    norm: LayerNorm::new(store, &format!("{name}.block{k}.norm"), dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fc = match cfg.entity_fc {
            EntityFc::Pooled => FcLayer::Pooled(Linear::with_init(
                store,
                &format!("{name}.entity_fc"),
                2 * dim,
                dim * num_entities,
                Init::Normal(0.02),
                true,
            )?),
            EntityFc::Literal { n } => FcLayer::Literal {
                weight: store.var(
                    &format!("{name}.entity_fc.weight"),
                    &[n, num_entities],
                    Init::Xavier {
                        fan_in: n,
                        fan_out: num_entities,
                    },
                )?,
                bias: store.var(&format!("{name}.entity_fc.bias"), &[num_entities], Init::Zeros)?,
                n,
            },
        };
        Ok(Cfam {
            blocks,
            entities: store.var(&format!("{name}.entities"), &[num_entities, dim], Init::Normal(cfg.embedding_std))?,
            fc,
            dim,
            num_entities,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Stacked self-attention over the rows of `I (N, C)`.
    pub fn encode_instances(&self, instances: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (n, c) = instances.dims2()?;
        if c != self.dim {
            return Err(Error::Shape {
                axis: "instance features",
                expected: self.dim,
                actual: c,
            });
        }
        if n == 0 {
            return Ok((instances.clone(), Vec::new()));
        }
        let mut x = instances.clone();
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(&x)?;
            x = y;
            weights.push(w);
        }
        Ok((x, weights))
    }

    /// `(L', E')` with `E' = FC(E^T)` of shape `(C, M)` and `L' = L + E'^T`.
    /// With no instances only the FC bias contributes.
    pub fn build_entity_features(&self, encoded: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c) = encoded.dims2()?;
        let m = self.num_entities;
        let e_prime = match &self.fc {
            FcLayer::Pooled(lin) => {
                if n == 0 {
                    lin.bias
                        .as_ref()
                        .map(|b| b.reshape((c, m)))
                        .transpose()?
                        .map_or_else(|| Tensor::zeros((c, m), encoded.dtype(), encoded.device()), Ok)?
                } else {
                    let pooled = Tensor::cat(&[encoded.mean_keepdim(0)?, encoded.max_keepdim(0)?], 1)?;
                    lin.forward(&pooled)?.reshape((c, m))?
                }
            }
            FcLayer::Literal { weight, bias, n: fixed } => {
                if n == 0 {
                    bias.unsqueeze(0)?.broadcast_as((c, m))?.contiguous()?
                } else if n != *fixed {
                    return Err(Error::Shape {
                        axis: "instance count of literal entity FC",
                        expected: *fixed,
                        actual: n,
                    });
                } else {
                    encoded.t()?.matmul(weight)?.broadcast_add(bias)?
                }
            }
        };
        let l_prime = (&self.entities + e_prime.t()?)?;
        Ok((l_prime, e_prime))
    }

    pub fn forward(&self, instances: &Tensor) -> Result<CfamOutput> {
        let (encoded, attention) = self.encode_instances(instances)?;
        let (entity_features, intermediate) = self.build_entity_features(&encoded)?;
        let similarity = similarity(&encoded, &entity_features)?;
        Ok(CfamOutput {
            encoded,
            entity_features,
            similarity,
            intermediate,
            attention,
        })
    }
}

/// `S = E L'^T`, no normalization.
pub fn similarity(encoded: &Tensor, entity_features: &Tensor) -> Result<Tensor> {
    let (n, c) = encoded.dims2()?;
    let (m, c2) = entity_features.dims2()?;
    if c != c2 {
        return Err(Error::Shape {
            axis: "similarity width",
            expected: c,
            actual: c2,
        });
    }
    if n == 0 {
        return Ok(Tensor::zeros((0, m), encoded.dtype(), encoded.device())?);
    }
    Ok(encoded.matmul(&entity_features.t()?)?)
}

/// Linear instance classifier used in place of the full module.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    pub linear: Linear,
}

impl ClassifyHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, num_entities: usize) -> Result<Self> {
        Ok(ClassifyHead {
            linear: Linear::new(store, name, dim, num_entities)?,
        })
    }

    pub fn forward(&self, instances: &Tensor) -> Result<Tensor> {
        let n = instances.dim(0)?;
        if n == 0 {
            return Ok(Tensor::zeros((0, self.linear.out_dim()), instances.dtype(), instances.device())?);
        }
        self.linear.forward(instances)
    }
}

/// Binary `N x M` target from per-row entity ids, row-major.
pub fn similarity_target_values(entity_ids: &[Option<usize>], m: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; entity_ids.len() * m];
    for (i, id) in entity_ids.iter().enumerate() {
        if let Some(e) = *id {
            if e >= m {
                return Err(Error::Shape {
                    axis: "entity id",
                    expected: m,
                    actual: e,
                });
            }
            out[i * m + e] = 1.0;
        }
    }
    Ok(out)
}

/// `S~` for `sample`, rows ordered by `order` (row `i` is instance
/// `order[i]`), which must match the instance feature rows.
pub fn build_similarity_target(
    sample: &DocumentSample,
    order: &[usize],
    m: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if order.len() != sample.instances.len() || order.iter().any(|&i| i >= sample.instances.len()) {
        return Err(Error::Shape {
            axis: "similarity target rows",
            expected: sample.instances.len(),
            actual: order.len(),
        });
    }
    let ids: Vec<Option<usize>> = order.iter().map(|&i| sample.instances[i].entity_id).collect();
    let values = similarity_target_values(&ids, m)?;
    Ok(Tensor::from_vec(values, (order.len(), m), device)?.to_dtype(dtype)?)
}

/// Row sums of attention weights.
pub fn attention_row_sums(weights: &Tensor) -> Result<Vec<f64>> {
    Ok(weights.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
