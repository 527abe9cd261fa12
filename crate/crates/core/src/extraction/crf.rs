use std::sync::Arc;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use super::tags::TagSet;
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward-backward over one sequence. `unary`: `len * k`; `trans`:
/// `(k+2)^2` including the structural mask. Returns `log Z` and, when
/// requested, the unary and transition marginals.
pub(crate) fn forward_backward(
    unary: &[f64],
    trans: &[f64],
    k: usize,
    len: usize,
    marginals: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let s = k + 2;
    let (bos, eos) = (k, k + 1);
    if len == 0 {
        if let Some((_, mt)) = marginals {
            mt[bos * s + eos] += 1.0;
        }
        return trans[bos * s + eos];
    }
    let mut alpha = vec![0.0; len * k];
    for j in 0..k {
        alpha[j] = trans[bos * s + j] + unary[j];
    }
    for t in 1..len {
        for j in 0..k {
            let prev = &alpha[(t - 1) * k..t * k];
            alpha[t * k + j] = logsumexp((0..k).map(|i| prev[i] + trans[i * s + j])) + unary[t * k + j];
        }
    }
    let last = &alpha[(len - 1) * k..len * k];
    let log_z = logsumexp((0..k).map(|j| last[j] + trans[j * s + eos]));
    let Some((mu, mt)) = marginals else { return log_z };
    let mut beta = vec![0.0; len * k];
    for j in 0..k {
        beta[(len - 1) * k + j] = trans[j * s + eos];
    }
    for t in (0..len - 1).rev() {
        for i in 0..k {
            beta[t * k + i] = logsumexp((0..k).map(|j| trans[i * s + j] + unary[(t + 1) * k + j] + beta[(t + 1) * k + j]));
        }
    }
    let p = |v: f64| if v == f64::NEG_INFINITY { 0.0 } else { (v - log_z).exp() };
    for t in 0..len {
        for j in 0..k {
            mu[t * k + j] += p(alpha[t * k + j] + beta[t * k + j]);
        }
    }
    for j in 0..k {
        mt[bos * s + j] += p(trans[bos * s + j] + unary[j] + beta[j]);
        mt[j * s + eos] += p(alpha[(len - 1) * k + j] + trans[j * s + eos]);
    }
    for t in 1..len {
        for i in 0..k {
            let a = alpha[(t - 1) * k + i];
            for j in 0..k {
                mt[i * s + j] += p(a + trans[i * s + j] + unary[t * k + j] + beta[t * k + j]);
            }
        }
    }
    log_z
}

/// Log-partition of one sequence with `len * k` unaries and a
/// `(k+2)^2` transition table that already carries any mask.
pub fn sequence_log_partition(unary: &[f64], trans: &[f64], k: usize, len: usize) -> f64 {
    forward_backward(unary, trans, k, len, None)
}

/// Score of one tag path, including start and end transitions.
pub fn path_score(unary: &[f64], trans: &[f64], k: usize, tags: &[u32]) -> f64 {
    let s = k + 2;
    let mut prev = k;
    let mut score = 0.0;
    for (t, &tag) in tags.iter().enumerate() {
        score += trans[prev * s + tag as usize] + unary[t * k + tag as usize];
        prev = tag as usize;
    }
    score + trans[prev * s + k + 1]
}

/// Max-scoring path; ties resolve toward the lower tag id.
pub fn viterbi(unary: &[f64], trans: &[f64], k: usize, len: usize) -> (Vec<u32>, f64) {
    let s = k + 2;
    let (bos, eos) = (k, k + 1);
    if len == 0 {
        return (Vec::new(), trans[bos * s + eos]);
    }
    let mut score: Vec<f64> = (0..k).map(|j| trans[bos * s + j] + unary[j]).collect();
    let mut back = vec![0usize; len * k];
    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &sc) in score.iter().enumerate() {
                let v = sc + trans[i * s + j];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            next[j] = best_v + unary[t * k + j];
            back[t * k + j] = best;
        }
        score = next;
    }
    let mut last = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &sc) in score.iter().enumerate() {
        let v = sc + trans[j * s + eos];
        if v > best_v {
            best_v = v;
            last = j;
        }
    }
    let mut path = vec![0u32; len];
    path[len - 1] = last as u32;
    for t in (1..len).rev() {
        last = back[t * k + last];
        path[t - 1] = last as u32;
    }
    (path, best_v)
}

/// Per-sequence `log Z` over unaries `(N, L, K)` and transitions
/// `(K+2, K+2)`; backward yields marginals.
struct LogPartition {
    lengths: Vec<usize>,
    mask: Arc<Vec<f64>>,
    k: usize,
}

impl LogPartition {
    fn masked(&self, trans: &[f64]) -> Vec<f64> {
        trans.iter().zip(self.mask.iter()).map(|(t, m)| t + m).collect()
    }

    fn run(&self, unary: &[f64], trans: &[f64], l: usize, mut grads: Option<(&mut [f64], &mut [f64], &[f64])>) -> Vec<f64> {
        let k = self.k;
        let trans = self.masked(trans);
        let s2 = (k + 2) * (k + 2);
        let mut out = Vec::with_capacity(self.lengths.len());
        for (i, &len) in self.lengths.iter().enumerate() {
            let u = &unary[i * l * k..(i + 1) * l * k];
            let lz = match grads.as_mut() {
                None => forward_backward(u, &trans, k, len, None),
                Some((gu, gt, g)) => {
                    let mut mu = vec![0.0; len * k];
                    let mut mt = vec![0.0; s2];
                    let lz = forward_backward(u, &trans, k, len, Some((&mut mu, &mut mt)));
                    for (d, v) in gu[i * l * k..i * l * k + len * k].iter_mut().zip(&mu) {
                        *d = v * g[i];
                    }
                    for (d, v) in gt.iter_mut().zip(&mt) {
                        *d += v * g[i];
                    }
                    lz
                }
            };
            out.push(lz);
        }
        out
    }
}

fn to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

impl CustomOp2 for LogPartition {
    fn name(&self) -> &'static str {
        "crf-log-partition"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, l, k) = l1.shape().dims3()?;
        if k != self.k || l2.shape().dims2()? != (k + 2, k + 2) || n != self.lengths.len() {
            candle_core::bail!("crf: unexpected shapes {:?} / {:?}", l1.shape(), l2.shape());
        }
        let read = |s: &CpuStorage, lay: &Layout| -> candle_core::Result<Vec<f64>> {
            let (a, b) = lay
                .contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("crf: inputs must be contiguous".into()))?;
            Ok(match s {
                CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
                CpuStorage::F64(v) => v[a..b].to_vec(),
                _ => candle_core::bail!("crf: unsupported dtype {:?}", s.dtype()),
            })
        };
        let out = self.run(&read(s1, l1)?, &read(s2, l2)?, l, None);
        let storage = match s1.dtype() {
            DType::F32 => CpuStorage::F32(out.iter().map(|&v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from(n)))
    }

    fn bwd(&self, a1: &Tensor, a2: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, l, k) = a1.dims3()?;
        let mut gu = vec![0.0; n * l * k];
        let mut gt = vec![0.0; (k + 2) * (k + 2)];
        let g = to_f64(grad_res)?;
        self.run(&to_f64(a1)?, &to_f64(a2)?, l, Some((&mut gu, &mut gt, &g)));
        let gu = Tensor::from_vec(gu, a1.shape(), a1.device())?.to_dtype(a1.dtype())?;
        let gt = Tensor::from_vec(gt, a2.shape(), a2.device())?.to_dtype(a2.dtype())?;
        Ok((Some(gu), Some(gt)))
    }
}

/// Linear-chain CRF over IOB2 tags with start/end states.
#[derive(Clone, Debug)]
pub struct Crf {
    /// `(K+2, K+2)`; row is the source state.
    pub transitions: Tensor,
    pub tags: TagSet,
    mask: Arc<Vec<f64>>,
}

impl Crf {
    pub fn new(store: &mut ParamStore, name: &str, tags: TagSet) -> Result<Self> {
        let s = tags.len() + 2;
        Ok(Crf {
            transitions: store.var(&format!("{name}.transitions"), &[s, s], Init::Zeros)?,
            tags,
            mask: Arc::new(tags.structural_mask()),
        })
    }

    pub fn from_tensor(transitions: Tensor, tags: TagSet) -> Self {
        Crf {
            transitions,
            tags,
            mask: Arc::new(tags.structural_mask()),
        }
    }

    /// Without structural constraints; every transition is allowed.
    pub fn unconstrained(transitions: Tensor, tags: TagSet) -> Self {
        let s = tags.len() + 2;
        let mask = (0..s * s)
            .map(|i| if i % s == tags.bos() || i / s == tags.eos() { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        Crf {
            transitions,
            tags,
            mask: Arc::new(mask),
        }
    }

    /// Learned transitions plus the structural mask, row-major.
    pub fn effective_transitions(&self) -> Result<Vec<f64>> {
        let t = to_f64(&self.transitions)?;
        Ok(t.iter().zip(self.mask.iter()).map(|(a, b)| a + b).collect())
    }

    fn check(&self, unaries: &Tensor, lengths: &[usize]) -> Result<(usize, usize)> {
        let (n, l, k) = unaries.dims3()?;
        if k != self.tags.len() {
            return Err(Error::Shape {
                axis: "tag count",
                expected: self.tags.len(),
                actual: k,
            });
        }
        if lengths.len() != n {
            return Err(Error::Shape {
                axis: "sequence count",
                expected: n,
                actual: lengths.len(),
            });
        }
        if let Some(&bad) = lengths.iter().find(|&&len| len > l) {
            return Err(Error::Shape {
                axis: "sequence length",
                expected: l,
                actual: bad,
            });
        }
        Ok((n, l))
    }

    /// `(N,)` log-partition values.
    pub fn log_partition(&self, unaries: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (n, _) = self.check(unaries, lengths)?;
        if n == 0 {
            return Ok(Tensor::zeros(0, unaries.dtype(), unaries.device())?);
        }
        let op = LogPartition {
            lengths: lengths.to_vec(),
            mask: self.mask.clone(),
            k: self.tags.len(),
        };
        Ok(unaries.contiguous()?.apply_op2(&self.transitions.contiguous()?, op)?)
    }

    /// `(N,)` scores of the gold paths.
    pub fn score(&self, unaries: &Tensor, lengths: &[usize], gold: &[Vec<u32>]) -> Result<Tensor> {
        let (n, l) = self.check(unaries, lengths)?;
        if n == 0 {
            return Ok(Tensor::zeros(0, unaries.dtype(), unaries.device())?);
        }
        let k = self.tags.len();
        let s = k + 2;
        let mut unary_idx = Vec::new();
        let mut unary_seq = Vec::new();
        let mut trans_idx = Vec::new();
        let mut trans_seq = Vec::new();
        for (i, (tags, &len)) in gold.iter().zip(lengths).enumerate() {
            if tags.len() != len {
                return Err(Error::InvalidTags(format!("sequence {i} has {} tags for length {len}", tags.len())));
            }
            if self.mask.iter().any(|m| *m == f64::NEG_INFINITY) {
                let s = k + 2;
                let mut prev = k;
                for &tag in tags.iter().chain(std::iter::once(&((k + 1) as u32))) {
                    if tag as usize >= s || self.mask[prev * s + tag as usize] == f64::NEG_INFINITY {
                        return Err(Error::InvalidTags(format!("sequence {i}: {tags:?}")));
                    }
                    prev = tag as usize;
                }
            }
            let mut prev = k;
            for (t, &tag) in tags.iter().enumerate() {
                unary_idx.push(((i * l + t) * k + tag as usize) as u32);
                unary_seq.push(i as u32);
                trans_idx.push((prev * s + tag as usize) as u32);
                trans_seq.push(i as u32);
                prev = tag as usize;
            }
            trans_idx.push((prev * s + k + 1) as u32);
            trans_seq.push(i as u32);
        }
        let device = unaries.device();
        let zeros = Tensor::zeros(n, unaries.dtype(), device)?;
        let flat_u = unaries.flatten_all()?;
        let mut total = zeros.clone();
        if !unary_idx.is_empty() {
            let picked = flat_u.index_select(&Tensor::new(unary_idx, device)?, 0)?;
            total = total.index_add(&Tensor::new(unary_seq, device)?, &picked, 0)?;
        }
        let picked = self
            .transitions
            .flatten_all()?
            .index_select(&Tensor::new(trans_idx, device)?, 0)?;
        Ok(total.index_add(&Tensor::new(trans_seq, device)?, &picked, 0)?)
    }

    /// `(N,)` negative log-likelihoods of the gold paths.
    pub fn nll(&self, unaries: &Tensor, lengths: &[usize], gold: &[Vec<u32>]) -> Result<Tensor> {
        let score = self.score(unaries, lengths, gold)?;
        Ok((self.log_partition(unaries, lengths)? - score)?)
    }

    /// Viterbi paths.
    pub fn decode(&self, unaries: &Tensor, lengths: &[usize]) -> Result<Vec<Vec<u32>>> {
        let (n, l) = self.check(unaries, lengths)?;
        let k = self.tags.len();
        let trans = self.effective_transitions()?;
        let u = to_f64(unaries)?;
        Ok((0..n)
            .map(|i| viterbi(&u[i * l * k..(i + 1) * l * k], &trans, k, lengths[i]).0)
            .collect())
    }
}
