//! Policy state extraction.
//!
//! `FeatureVector` stands in for the fused three-layer hidden states: three
//! fixed random projections of the one-hot encoding of the most recent
//! `context_order` tokens, concatenated. `ContextEmbedding` stands in for an
//! external sentence encoder: a fixed random projection of the normalized
//! bag of bigrams over the whole context.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TargetModel;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    FeatureVector,
    ContextEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    /// Dimensions of the three slices (h, m, l).
    pub slice_dims: [usize; 3],
    pub encoder: EncoderKind,
    pub embedding_dim: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            slice_dims: [16, 16, 16],
            encoder: EncoderKind::FeatureVector,
            embedding_dim: 384,
        }
    }
}

impl FeatureSpec {
    pub fn state_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::FeatureVector => self.slice_dims.iter().sum(),
            EncoderKind::ContextEmbedding => self.embedding_dim,
        }
    }
}

pub type StateVector = Vec<f64>;

/// Holds the projection matrices for one `(model, spec)` pair.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: FeatureSpec,
    seed: u64,
    vocab: usize,
    order: usize,
    bos: u32,
    /// One matrix per slice, laid out `[position][token][dim]`.
    slices: [Vec<f64>; 3],
}

impl FeatureExtractor {
    pub fn new(spec: FeatureSpec, model: &TargetModel) -> Result<Self> {
        if spec.state_dim() == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let cfg = model.config();
        let (vocab, order) = (cfg.vocab_size, cfg.context_order);
        let scale = 1.0 / (order as f64).sqrt();
        let slices = std::array::from_fn(|s| {
            let dim = spec.slice_dims[s];
            let mut r = rng::stream(cfg.seed, domain::FEATURE_SLICE, s as u64);
            (0..order * vocab * dim)
                .map(|_| r.random_range(-1.0..1.0) * scale)
                .collect()
        });
        Ok(Self {
            spec,
            seed: cfg.seed,
            vocab,
            order,
            bos: cfg.bos_token,
            slices,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn extract(&self, context: &[u32]) -> Result<StateVector> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if let Some(&token) = context.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::InvalidToken {
                token,
                vocab: self.vocab,
            });
        }
        Ok(match self.spec.encoder {
            EncoderKind::FeatureVector => self.feature_vector(context),
            EncoderKind::ContextEmbedding => self.context_embedding(context),
        })
    }

    fn feature_vector(&self, context: &[u32]) -> StateVector {
        let mut out = Vec::with_capacity(self.state_dim());
        for (s, matrix) in self.slices.iter().enumerate() {
            let dim = self.spec.slice_dims[s];
            let start = out.len();
            out.resize(start + dim, 0.0);
            for pos in 0..self.order {
                // pos 0 is the most recent token
                let tok = context.len().checked_sub(pos + 1).map_or(self.bos, |i| context[i]) as usize;
                let col = &matrix[(pos * self.vocab + tok) * dim..][..dim];
                for (o, c) in out[start..].iter_mut().zip(col) {
                    *o += c;
                }
            }
        }
        out
    }

    fn context_embedding(&self, context: &[u32]) -> StateVector {
        let dim = self.spec.embedding_dim;
        let mut out = vec![0.0; dim];
        let mut counts: BTreeMap<u64, u32> = BTreeMap::new();
        for w in context.windows(2) {
            *counts.entry(w[0] as u64 * self.vocab as u64 + w[1] as u64).or_default() += 1;
        }
        let total = context.len().saturating_sub(1);
        if total == 0 {
            return out;
        }
        for (bigram, n) in counts {
            let mut r = rng::stream(self.seed, domain::EMBEDDING, bigram);
            let weight = n as f64 / total as f64;
            for o in out.iter_mut() {
                *o += weight * r.random_range(-1.0..1.0);
            }
        }
        out
    }
}
