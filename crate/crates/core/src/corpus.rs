//! Seeded synthetic prompt corpus.
//!
//! Each question belongs to a prompt class from the model's regime schedule.
//! Prompt tokens are drawn from the vocabulary block owned by that class, so
//! the context (and therefore the policy state) reveals the regime.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_questions: usize,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub turns: usize,
    /// Id of the first question; keeps training and held-out suites apart.
    pub id_offset: u64,
    /// Relative weight per regime, in regime-schedule order. Empty means
    /// equal weights.
    pub class_weights: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            n_questions: 32,
            prompt_len_min: 4,
            prompt_len_max: 12,
            turns: 1,
            id_offset: 0,
            class_weights: Vec::new(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_questions == 0 {
            return Err(Error::Config("corpus needs at least one question".into()));
        }
        if self.prompt_len_min == 0 || self.prompt_len_min > self.prompt_len_max {
            return Err(Error::Config("prompt length range must satisfy 1 <= min <= max".into()));
        }
        if self.turns == 0 {
            return Err(Error::Config("turns must be >= 1".into()));
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != model.blocks() {
                return Err(Error::Config(format!(
                    "{} class weights for {} regimes",
                    self.class_weights.len(),
                    model.blocks()
                )));
            }
            if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || self.class_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config("class weights must be >= 0 with a positive sum".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub class: u32,
    /// User prompt per turn. The first turn starts with BOS.
    pub turns: Vec<Vec<u32>>,
}

/// Generates `n_questions` questions. Question `id_offset + i` depends only
/// on `(seed, id_offset + i)`.
pub fn generate_corpus(cfg: &CorpusConfig, model: &ModelConfig) -> Result<Vec<Question>> {
    cfg.validate(model)?;
    let blocks = model.blocks();
    let weights = if cfg.class_weights.is_empty() {
        vec![1.0; blocks]
    } else {
        cfg.class_weights.clone()
    };
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    (0..cfg.n_questions as u64)
        .map(|i| {
            let id = cfg.id_offset + i;
            let mut r = rng::stream(cfg.seed, domain::CORPUS, id);
            let regime = picker.sample(&mut r);
            let class = model.regime_schedule.get(regime).map_or(0, |g| g.class);
            let (lo, hi) = model.block_range(regime);
            let turns = (0..cfg.turns)
                .map(|t| {
                    let len = r.random_range(cfg.prompt_len_min..=cfg.prompt_len_max);
                    let mut p = Vec::with_capacity(len + 1);
                    if t == 0 {
                        p.push(model.bos_token);
                    }
                    p.extend((0..len).map(|_| r.random_range(lo..hi)));
                    p
                })
                .collect();
            Ok(Question { id, class, turns })
        })
        .collect()
}
