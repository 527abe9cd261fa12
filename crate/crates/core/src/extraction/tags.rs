use std::ops::Range;

use crate::error::{Error, Result};

/// IOB2 tag ids for `m` entities: `0 = O`, `1 + 2e = B-e`, `2 + 2e = I-e`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagSet {
    pub num_entities: usize,
}

impl TagSet {
    pub const OUTSIDE: u32 = 0;

    pub fn new(num_entities: usize) -> Self {
        TagSet { num_entities }
    }

    /// Number of real tags `K`.
    pub fn len(&self) -> usize {
        1 + 2 * self.num_entities
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the virtual start state in the transition matrix.
    pub fn bos(&self) -> usize {
        self.len()
    }

    /// Index of the virtual end state in the transition matrix.
    pub fn eos(&self) -> usize {
        self.len() + 1
    }

    pub fn begin(&self, entity: usize) -> u32 {
        1 + 2 * entity as u32
    }

    pub fn inside(&self, entity: usize) -> u32 {
        2 + 2 * entity as u32
    }

    pub fn entity_of(&self, tag: u32) -> Option<usize> {
        (tag != Self::OUTSIDE).then(|| (tag as usize - 1) / 2)
    }

    pub fn is_inside(&self, tag: u32) -> bool {
        tag != Self::OUTSIDE && tag % 2 == 0
    }

    pub fn name(&self, tag: u32, entities: &[String]) -> String {
        match self.entity_of(tag) {
            None => "O".into(),
            Some(e) => format!("{}-{}", if self.is_inside(tag) { "I" } else { "B" }, entities[e]),
        }
    }

    /// Whether `from -> to` is allowed over the extended state space
    /// (`bos()` and `eos()` included).
    pub fn allowed(&self, from: usize, to: usize) -> bool {
        let (bos, eos) = (self.bos(), self.eos());
        if to == bos || from == eos {
            return false;
        }
        if to == eos {
            return true;
        }
        let to = to as u32;
        if !self.is_inside(to) {
            return true;
        }
        from != bos && self.entity_of(from as u32) == self.entity_of(to)
    }

    /// Additive structural mask, `(K+2) x (K+2)` row-major, `0` or `-inf`.
    pub fn structural_mask(&self) -> Vec<f64> {
        let s = self.len() + 2;
        (0..s * s)
            .map(|i| if self.allowed(i / s, i % s) { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    pub fn is_valid(&self, tags: &[u32]) -> bool {
        let mut prev = self.bos();
        for &t in tags {
            if t as usize >= self.len() || !self.allowed(prev, t as usize) {
                return false;
            }
            prev = t as usize;
        }
        true
    }

    pub fn validate(&self, tags: &[u32]) -> Result<()> {
        if self.is_valid(tags) {
            Ok(())
        } else {
            Err(Error::InvalidTags(format!("{tags:?}")))
        }
    }

    /// Gold tags for a transcript of `len` characters whose `span` carries
    /// `entity`.
    pub fn encode_span(&self, len: usize, span: Option<(Range<usize>, usize)>) -> Vec<u32> {
        let mut tags = vec![Self::OUTSIDE; len];
        if let Some((r, e)) = span {
            for (k, t) in tags[r.start.min(len)..r.end.min(len)].iter_mut().enumerate() {
                *t = if k == 0 { self.begin(e) } else { self.inside(e) };
            }
        }
        tags
    }

    /// Maximal `(entity, range)` spans; a span starts at any B tag or at an
    /// I tag that does not continue the previous one.
    pub fn spans(&self, tags: &[u32]) -> Vec<(usize, Range<usize>)> {
        let mut out: Vec<(usize, Range<usize>)> = Vec::new();
        for (t, &tag) in tags.iter().enumerate() {
            let Some(e) = self.entity_of(tag) else { continue };
            let continues = self.is_inside(tag) && out.last().is_some_and(|(pe, r)| *pe == e && r.end == t);
            if continues {
                if let Some(last) = out.last_mut() {
                    last.1.end = t + 1;
                }
            } else {
                out.push((e, t..t + 1));
            }
        }
        out
    }
}
