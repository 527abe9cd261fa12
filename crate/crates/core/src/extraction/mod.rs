//! Feature fusion, BiLSTM-CRF character tagging, and entity decoding.

mod crf;
mod lstm;
mod tags;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

pub use crf::{path_score, sequence_log_partition, viterbi, Crf};
pub use lstm::BiLstm;
pub use tags::TagSet;

use crate::datamodel::{reading_order, value_spans, BBox, DocumentSample, EntitySchema, VALUE_JOINER};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct FusedFeatures {
    /// `(N, L_max, C)`, zero beyond each length.
    pub tensor: Tensor,
    /// `(N, L_max, 1)`.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

/// `(N, L, 1)` validity mask from lengths.
pub fn length_mask(lengths: &[usize], l: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&len| (0..l).map(move |t| if t < len { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), l, 1), device)?.to_dtype(dtype)?)
}

/// `fused[i][t] = T[i][t] + E[i] + P(S[i])` with `P: M -> C` starting at zero.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, num_entities: usize, dim: usize) -> Result<Self> {
        Ok(Fusion {
            proj: Linear::zeros(store, name, num_entities, dim)?,
        })
    }

    /// `t`: `(N, L, C)`; `e`: `(N, C)`; `s`: `(N, M)`. Either term may be
    /// absent.
    pub fn fuse(&self, t: &Tensor, e: Option<&Tensor>, s: Option<&Tensor>, lengths: &[usize]) -> Result<FusedFeatures> {
        let (n, l, c) = t.dims3()?;
        let check = |axis: &'static str, x: &Tensor, width: usize| -> Result<()> {
            let (rows, cols) = x.dims2()?;
            if rows != n {
                return Err(Error::Shape {
                    axis,
                    expected: n,
                    actual: rows,
                });
            }
            if cols != width {
                return Err(Error::Shape {
                    axis,
                    expected: width,
                    actual: cols,
                });
            }
            Ok(())
        };
        if lengths.len() != n {
            return Err(Error::Shape {
                axis: "fusion lengths",
                expected: n,
                actual: lengths.len(),
            });
        }
        let mut per_instance: Option<Tensor> = None;
        if let Some(e) = e {
            check("encoded features", e, c)?;
            per_instance = Some(e.clone());
        }
        if let Some(s) = s {
            check("similarity", s, self.proj.in_dim())?;
            let p = self.proj.forward(s)?;
            per_instance = Some(match per_instance {
                Some(x) => (x + p)?,
                None => p,
            });
        }
        let mut fused = t.clone();
        if let Some(x) = per_instance {
            fused = fused.broadcast_add(&x.unsqueeze(1)?)?;
        }
        let mask = length_mask(lengths, l, t.dtype(), t.device())?;
        Ok(FusedFeatures {
            tensor: fused.broadcast_mul(&mask)?,
            mask,
            lengths: lengths.to_vec(),
        })
    }
}

/// BiLSTM encoder, unary projection, and CRF.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub lstm: BiLstm,
    pub unary: Linear,
    pub crf: Crf,
}

impl Tagger {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, tags: TagSet) -> Result<Self> {
        Ok(Tagger {
            lstm: BiLstm::new(store, &format!("{name}.lstm"), dim)?,
            unary: Linear::new(store, &format!("{name}.unary"), dim, tags.len())?,
            crf: Crf::new(store, &format!("{name}.crf"), tags)?,
        })
    }

    /// `(N, L, K)` unary scores.
    pub fn unaries(&self, fused: &FusedFeatures) -> Result<Tensor> {
        let h = self.lstm.forward(&fused.tensor, &fused.lengths)?;
        self.unary.forward(&h)
    }

    pub fn nll(&self, fused: &FusedFeatures, gold: &[Vec<u32>]) -> Result<Tensor> {
        self.crf.nll(&self.unaries(fused)?, &fused.lengths, gold)
    }

    pub fn decode(&self, fused: &FusedFeatures) -> Result<Vec<Vec<u32>>> {
        if fused.lengths.is_empty() {
            return Ok(Vec::new());
        }
        self.crf.decode(&self.unaries(fused)?, &fused.lengths)
    }
}

/// Gold IOB2 tags of every instance of `sample`, in annotation order.
pub fn gold_tags(sample: &DocumentSample, schema: &EntitySchema, tagset: &TagSet) -> Result<Vec<Vec<u32>>> {
    let spans = value_spans(sample, schema).map_err(|violation| Error::Validation {
        sample: sample.id.clone(),
        violation,
    })?;
    Ok(sample
        .instances
        .iter()
        .zip(spans)
        .map(|(inst, span)| {
            let len = inst.transcript.chars().count().min(schema.max_chars);
            tagset.encode_span(len, span.zip(inst.entity_id))
        })
        .collect())
}

/// Collects the characters tagged for each entity. Spans are visited in
/// reading order of `boxes` and joined with [`VALUE_JOINER`].
pub fn decode_entities(
    tags: &[Vec<u32>],
    transcripts: &[String],
    boxes: &[BBox],
    tagset: &TagSet,
    schema: &EntitySchema,
) -> BTreeMap<String, String> {
    let mut parts: Vec<Vec<String>> = vec![Vec::new(); tagset.num_entities];
    for i in reading_order(boxes) {
        let (Some(seq), Some(text)) = (tags.get(i), transcripts.get(i)) else {
            continue;
        };
        let chars: Vec<char> = text.chars().collect();
        for (e, r) in tagset.spans(seq) {
            let end = r.end.min(chars.len());
            if r.start < end && e < parts.len() {
                parts[e].push(chars[r.start..end].iter().collect());
            }
        }
    }
    parts
        .into_iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .filter_map(|(e, p)| schema.entities.get(e).map(|name| (name.clone(), p.join(VALUE_JOINER))))
        .collect()
}

#[cfg(test)]
mod tests;
