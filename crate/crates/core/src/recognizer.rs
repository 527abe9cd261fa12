//! Transformer-decoder character recognizer over pooled instance grids.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Vocab, UNK_CHAR};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal, sinusoidal_2d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            width: 256,
            layers: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("recognizer needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Teacher-forcing tensors for a batch of transcripts.
#[derive(Clone, Debug)]
pub struct RecTargets {
    /// `(N, L_max)`: BOS followed by the characters.
    pub inputs: Tensor,
    /// `(N, L_max)`: the characters followed by EOS, PAD after.
    pub targets: Tensor,
    /// `(N, L_max)`: 1 on the characters and the EOS.
    pub mask: Tensor,
    /// Character counts after truncation to `L_max - 1`.
    pub lengths: Vec<usize>,
}

pub fn encode_targets(texts: &[&str], vocab: &Vocab, l_max: usize, dtype: DType, device: &Device) -> Result<RecTargets> {
    let n = texts.len();
    let mut inputs = vec![Vocab::PAD; n * l_max];
    let mut targets = vec![Vocab::PAD; n * l_max];
    let mut mask = vec![0.0f64; n * l_max];
    let mut lengths = Vec::with_capacity(n);
    for (i, text) in texts.iter().enumerate() {
        let ids = vocab.encode(text);
        let len = ids.len().min(l_max - 1);
        let row = i * l_max;
        inputs[row] = Vocab::BOS;
        for (t, &id) in ids[..len].iter().enumerate() {
            inputs[row + t + 1] = id;
            targets[row + t] = id;
        }
        targets[row + len] = Vocab::EOS;
        for m in &mut mask[row..=row + len] {
            *m = 1.0;
        }
        lengths.push(len);
    }
    Ok(RecTargets {
        inputs: Tensor::from_vec(inputs, (n, l_max), device)?,
        targets: Tensor::from_vec(targets, (n, l_max), device)?,
        mask: Tensor::from_vec(mask, (n, l_max), device)?.to_dtype(dtype)?,
        lengths,
    })
}

#[derive(Clone, Debug)]
pub struct RecognizerOutput {
    /// `R`: `(N, L_max, V)`.
    pub logits: Tensor,
    /// `T`: `(N, L_max, C)`; step `t < lengths[i]` is the state that emits
    /// character `t`.
    pub features: Tensor,
    pub lengths: Vec<usize>,
    /// Decoded (or target) character ids without BOS/EOS.
    pub ids: Vec<Vec<u32>>,
    pub texts: Vec<String>,
    /// Set when decoding ran out of steps before EOS.
    pub truncated: Vec<bool>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn forward(&self, x: &Tensor, memory: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(mask))?.0)?;
        let h = self.norm_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, None)?.0)?;
        let h = self.norm_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm transformer decoder attending to a pooled `P_h x P_w` grid.
#[derive(Clone, Debug)]
pub struct Recognizer {
    embedding: Tensor,
    memory_proj: Linear,
    memory_pos: Tensor,
    step_pos: Tensor,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    pub classifier: Linear,
    l_max: usize,
    width: usize,
}

impl Recognizer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        vocab_size: usize,
        l_max: usize,
        grid: (usize, usize),
        feature_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let (dtype, device) = (store.dtype(), store.device().clone());
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(DecoderLayer {
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), c)?,
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), c, cfg.heads)?,
                norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), c)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), c, cfg.heads)?,
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), c)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), c, 2 * c)?,
            });
        }
        Ok(Recognizer {
            embedding: store.var(&format!("{name}.embedding"), &[vocab_size, c], Init::Normal(1.0))?,
            memory_proj: Linear::new(store, &format!("{name}.memory_proj"), feature_channels, c)?,
            memory_pos: Tensor::from_vec(sinusoidal_2d(grid.0, grid.1, c), (grid.0 * grid.1, c), &device)?.to_dtype(dtype)?,
            step_pos: Tensor::from_vec(sinusoidal(l_max, c), (l_max, c), &device)?.to_dtype(dtype)?,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), c)?,
            classifier: Linear::new(store, &format!("{name}.classifier"), c, vocab_size)?,
            l_max,
            width: c,
        })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.classifier.out_dim()
    }

    fn memory(&self, grid: &Tensor) -> Result<Tensor> {
        Ok(self.memory_proj.forward(grid)?.broadcast_add(&self.memory_pos)?)
    }

    /// One decoder pass over `inputs (N, L)` ids; returns `(logits, T)`.
    fn run(&self, memory: &Tensor, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, l) = inputs.dims2()?;
        let emb = self.embedding.index_select(&inputs.flatten_all()?, 0)?.reshape((n, l, self.width))?;
        let mut x = emb.broadcast_add(&self.step_pos.narrow(0, 0, l)?)?;
        let mask = causal_mask(l, x.dtype(), x.device())?;
        for layer in &self.layers {
            x = layer.forward(&x, memory, &mask)?;
        }
        let t = self.final_norm.forward(&x)?;
        let logits = self.classifier.forward(&t)?;
        Ok((logits, t))
    }

    /// Teacher-forced pass. `grid`: `(N, P, C_f)`.
    pub fn forward_teacher(&self, grid: &Tensor, targets: &RecTargets, vocab: &Vocab) -> Result<RecognizerOutput> {
        let n = grid.dim(0)?;
        if targets.lengths.len() != n {
            return Err(Error::Shape {
                axis: "recognizer targets",
                expected: n,
                actual: targets.lengths.len(),
            });
        }
        let (logits, features) = self.run(&self.memory(grid)?, &targets.inputs)?;
        let inputs = targets.inputs.to_vec2::<u32>()?;
        let ids: Vec<Vec<u32>> = inputs
            .iter()
            .zip(&targets.lengths)
            .map(|(row, &len)| row[1..=len].to_vec())
            .collect();
        Ok(RecognizerOutput {
            logits,
            features,
            lengths: targets.lengths.clone(),
            texts: ids.iter().map(|r| ids_to_text(r, vocab)).collect(),
            ids,
            truncated: vec![false; n],
        })
    }

    /// Greedy autoregressive decoding followed by one teacher-forced pass
    /// on the decoded ids, so `R` and `T` share a forward pass.
    pub fn recognize(&self, grid: &Tensor, vocab: &Vocab) -> Result<RecognizerOutput> {
        let n = grid.dim(0)?;
        let device = grid.device().clone();
        let memory = self.memory(grid)?;
        let mut seqs: Vec<Vec<u32>> = vec![vec![Vocab::BOS]; n];
        let mut done = vec![false; n];
        for step in 0..self.l_max {
            if done.iter().all(|&d| d) {
                break;
            }
            let inputs: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
            let inputs = Tensor::from_vec(inputs, (n, step + 1), &device)?;
            let (logits, _) = self.run(&memory, &inputs)?;
            let last = logits.narrow(1, step, 1)?.squeeze(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for (i, row) in last.iter().enumerate() {
                let next = if done[i] { Vocab::PAD } else { argmax(row) as u32 };
                if next == Vocab::EOS {
                    done[i] = true;
                }
                seqs[i].push(next);
            }
        }
        let max_chars = self.l_max - 1;
        let mut ids = Vec::with_capacity(n);
        let mut truncated = Vec::with_capacity(n);
        for (seq, &finished) in seqs.iter().zip(&done) {
            let chars: Vec<u32> = seq[1..].iter().copied().take_while(|&t| t != Vocab::EOS).collect();
            truncated.push(!finished);
            ids.push(chars.into_iter().take(max_chars).collect::<Vec<u32>>());
        }
        let mut inputs = vec![Vocab::PAD; n * self.l_max];
        for (i, row) in ids.iter().enumerate() {
            inputs[i * self.l_max] = Vocab::BOS;
            for (t, &id) in row.iter().enumerate() {
                inputs[i * self.l_max + t + 1] = id;
            }
        }
        let inputs = Tensor::from_vec(inputs, (n, self.l_max), &device)?;
        let (logits, features) = self.run(&memory, &inputs)?;
        Ok(RecognizerOutput {
            logits,
            features,
            lengths: ids.iter().map(Vec::len).collect(),
            texts: ids.iter().map(|r| ids_to_text(r, vocab)).collect(),
            ids,
            truncated,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn ids_to_text(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != Vocab::PAD && id != Vocab::BOS && id != Vocab::EOS)
        .map(|&id| vocab.char_of(id).unwrap_or(UNK_CHAR))
        .collect()
}

/// Per-position argmax over `logits (N, L, V)`, stopping at EOS.
pub fn greedy_decode(logits: &Tensor, vocab: &Vocab) -> Result<Vec<String>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(rows
        .iter()
        .map(|steps| {
            let ids: Vec<u32> = steps
                .iter()
                .map(|v| argmax(v) as u32)
                .take_while(|&id| id != Vocab::EOS)
                .collect();
            ids_to_text(&ids, vocab)
        })
        .collect())
}

/// Logits `(N, L, V)` with unit mass on the given ids, EOS afterwards.
pub fn one_hot_logits(ids: &[Vec<u32>], l_max: usize, vocab_size: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f64; ids.len() * l_max * vocab_size];
    for (i, row) in ids.iter().enumerate() {
        for t in 0..l_max {
            let id = row.get(t).copied().unwrap_or(Vocab::EOS) as usize;
            data[(i * l_max + t) * vocab_size + id] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (ids.len(), l_max, vocab_size), device)?)
}
