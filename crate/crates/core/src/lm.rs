//! Synthetic target and draft language models.
//!
//! The target is an order-`m` Markov model whose conditional rows are
//! materialized once from seeded streams. The draft is a noise-mixed copy of
//! the target: `P_d = (1 - eps) * P_T + eps * Q`, where `Q` is either the
//! uniform distribution or a seeded per-context perturbation row.

use rand::distr::OpenClosed01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Upper bound on materialized table entries (rows * vocab).
const MAX_TABLE_ENTRIES: usize = 1 << 24;

/// What the draft mixes toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `Q` is uniform over the vocabulary. Preserves the target's argmax.
    #[default]
    Uniform,
    /// `Q` is a seeded Dirichlet-style row per context bucket, so a noisy
    /// draft can disagree with the target's argmax.
    Perturbed,
}

/// A prompt class with its own draft noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub class: u32,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub context_order: usize,
    /// Draft noise used when a prompt class has no override.
    pub draft_noise: f64,
    pub noise_kind: NoiseKind,
    /// Exponent applied to exponential draws when forming rows; 1 gives
    /// Dirichlet(1) rows, larger values give peakier rows.
    pub sharpness: f64,
    /// Fraction of each target row reassigned to the block of the most recent
    /// token. Blocks partition the vocabulary, one per regime.
    pub block_affinity: f64,
    pub bos_token: u32,
    pub eos_token: Option<u32>,
    pub regime_schedule: Vec<Regime>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab_size: 16,
            context_order: 2,
            draft_noise: 0.3,
            noise_kind: NoiseKind::Uniform,
            sharpness: 1.0,
            block_affinity: 0.0,
            bos_token: 0,
            eos_token: None,
            regime_schedule: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.context_order < 1 {
            return Err(Error::Config("context_order must be >= 1".into()));
        }
        check_noise(self.draft_noise)?;
        for r in &self.regime_schedule {
            check_noise(r.noise)?;
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(Error::Config("sharpness must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.block_affinity) {
            return Err(Error::Config("block_affinity must lie in [0, 1)".into()));
        }
        if self.bos_token as usize >= self.vocab_size {
            return Err(Error::Config("bos_token outside vocabulary".into()));
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab_size {
                return Err(Error::Config("eos_token outside vocabulary".into()));
            }
        }
        if self.blocks() > self.vocab_size {
            return Err(Error::Config("more regimes than vocabulary tokens".into()));
        }
        let rows = (self.vocab_size as u128).checked_pow(self.context_order as u32);
        match rows {
            Some(r) if r * (self.vocab_size as u128) <= MAX_TABLE_ENTRIES as u128 => Ok(()),
            _ => Err(Error::Config(format!(
                "table for vocab {} and order {} is too large",
                self.vocab_size, self.context_order
            ))),
        }
    }

    /// Number of vocabulary blocks: one per regime, at least one.
    pub fn blocks(&self) -> usize {
        self.regime_schedule.len().max(1)
    }

    /// Token range `[lo, hi)` owned by block `b`.
    pub fn block_range(&self, b: usize) -> (u32, u32) {
        let n = self.blocks();
        let lo = b * self.vocab_size / n;
        let hi = (b + 1) * self.vocab_size / n;
        (lo as u32, hi as u32)
    }

    pub fn block_of(&self, token: u32) -> usize {
        let n = self.blocks();
        ((token as usize * n) / self.vocab_size).min(n - 1)
    }

    /// Block index and draft noise for a prompt class.
    pub fn regime_for_class(&self, class: u32) -> (usize, f64) {
        self.regime_schedule
            .iter()
            .position(|r| r.class == class)
            .map(|i| (i, self.regime_schedule[i].noise))
            .unwrap_or((0, self.draft_noise))
    }
}

fn check_noise(eps: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::Config(format!("draft noise {eps} outside [0, 1]")))
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist(pub Vec<f64>);

impl TokenDist {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.0.get(token as usize).copied().unwrap_or(0.0)
    }

    /// Most likely token; the lowest id wins ties.
    pub fn argmax(&self) -> u32 {
        argmax(&self.0)
    }

    /// The `k` most likely tokens with non-zero probability, ordered by
    /// probability descending then token id ascending.
    pub fn top_k(&self, k: usize) -> Vec<(u32, f64)> {
        top_k(&self.0, k)
    }
}

pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn top_k(row: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..row.len() as u32).filter(|&t| row[t as usize] > 0.0).collect();
    let cmp = |a: &u32, b: &u32| row[*b as usize].total_cmp(&row[*a as usize]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter().map(|t| (t, row[t as usize])).collect()
}

/// Draws one Dirichlet-style row: `w_j = (-ln u_j)^sharpness`, normalized.
pub(crate) fn dirichlet_style_row(rng: &mut impl Rng, vocab: usize, sharpness: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..vocab)
        .map(|_| {
            let u: f64 = rng.sample(OpenClosed01);
            (-u.ln()).powf(sharpness)
        })
        .collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / vocab as f64);
    }
    w
}

/// The seeded target model with its materialized conditional tables.
#[derive(Debug, Clone)]
pub struct TargetModel {
    cfg: ModelConfig,
    table: Vec<f64>,
    noise_table: Option<Vec<f64>>,
    /// Per configured noise level, every bucket's tokens sorted by draft
    /// probability (descending, ties by token id).
    draft_orders: Vec<(f64, Vec<u32>)>,
}

/// Table size up to which draft orderings are precomputed.
const MAX_ORDER_ENTRIES: usize = 1 << 22;

impl TargetModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.vocab_size;
        let rows = v.pow(cfg.context_order as u32);
        let mut table = Vec::with_capacity(rows * v);
        for bucket in 0..rows {
            table.extend(target_row(&cfg, bucket));
        }
        let noise_table = match cfg.noise_kind {
            NoiseKind::Uniform => None,
            NoiseKind::Perturbed => {
                let mut t = Vec::with_capacity(rows * v);
                for bucket in 0..rows {
                    let mut r = rng::stream(cfg.seed, domain::NOISE_ROW, bucket as u64);
                    t.extend(dirichlet_style_row(&mut r, v, cfg.sharpness));
                }
                Some(t)
            }
        };
        let mut model = Self {
            cfg,
            table,
            noise_table,
            draft_orders: Vec::new(),
        };
        if model.table.len() <= MAX_ORDER_ENTRIES {
            let mut levels = vec![model.cfg.draft_noise];
            levels.extend(model.cfg.regime_schedule.iter().map(|r| r.noise));
            for eps in levels {
                if model.draft_orders.iter().all(|(e, _)| *e != eps) {
                    let order = model.sorted_draft_rows(eps);
                    model.draft_orders.push((eps, order));
                }
            }
        }
        Ok(model)
    }

    fn sorted_draft_rows(&self, eps: f64) -> Vec<u32> {
        let pair = ModelPair {
            target: self,
            noise: eps,
        };
        let v = self.cfg.vocab_size;
        let mut row = Vec::with_capacity(v);
        let mut out = Vec::with_capacity(self.table.len());
        for bucket in 0..self.rows() {
            pair.draft_row_into(bucket, &mut row);
            let mut idx: Vec<u32> = (0..v as u32).collect();
            idx.sort_unstable_by(|a, b| row[*b as usize].total_cmp(&row[*a as usize]).then(a.cmp(b)));
            out.extend(idx);
        }
        out
    }

    fn draft_order(&self, eps: f64) -> Option<&[u32]> {
        self.draft_orders
            .iter()
            .find(|(e, _)| *e == eps)
            .map(|(_, o)| o.as_slice())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn order(&self) -> usize {
        self.cfg.context_order
    }

    pub fn rows(&self) -> usize {
        self.table.len() / self.cfg.vocab_size
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(&token) => Err(Error::InvalidToken {
                token,
                vocab: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Row index for the last `order` tokens of `context ++ path`, left-padded
    /// with BOS. The most recent token is the lowest base-V digit.
    pub(crate) fn bucket(&self, context: &[u32], path: &[u32]) -> usize {
        let v = self.cfg.vocab_size;
        let m = self.cfg.context_order;
        let total = context.len() + path.len();
        let mut bucket = 0usize;
        let mut scale = 1usize;
        for back in 0..m {
            let tok = if back < total {
                let pos = total - 1 - back;
                if pos >= context.len() {
                    path[pos - context.len()]
                } else {
                    context[pos]
                }
            } else {
                self.cfg.bos_token
            };
            bucket += tok as usize * scale;
            scale *= v;
        }
        bucket
    }

    /// Bucket for an explicit window of the `order` most recent tokens,
    /// oldest first.
    pub fn bucket_of_window(&self, window: &[u32]) -> usize {
        self.bucket(window, &[])
    }

    pub(crate) fn target_row_at(&self, bucket: usize) -> &[f64] {
        let v = self.cfg.vocab_size;
        &self.table[bucket * v..(bucket + 1) * v]
    }

    pub(crate) fn noise_row_at(&self, bucket: usize) -> Option<&[f64]> {
        let v = self.cfg.vocab_size;
        self.noise_table.as_ref().map(|t| &t[bucket * v..(bucket + 1) * v])
    }

    /// `P_T(. | context)`.
    pub fn target_next_dist(&self, context: &[u32]) -> Result<TokenDist> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.check_tokens(context)?;
        Ok(TokenDist(self.target_row_at(self.bucket(context, &[])).to_vec()))
    }

    /// Target argmax after `context ++ path`; tokens must already be valid.
    pub(crate) fn greedy_next(&self, context: &[u32], path: &[u32]) -> u32 {
        argmax(self.target_row_at(self.bucket(context, path)))
    }

    /// Pure greedy decoding of up to `max_new` tokens, stopping after EOS.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.check_tokens(prompt)?;
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new {
            let t = self.greedy_next(prompt, &out);
            out.push(t);
            if Some(t) == self.cfg.eos_token {
                break;
            }
        }
        Ok(out)
    }

    /// Pairs this target with a draft at noise level `noise`.
    pub fn pair(&self, noise: f64) -> Result<ModelPair<'_>> {
        check_noise(noise)?;
        Ok(ModelPair { target: self, noise })
    }

    /// Pairs this target with the draft configured for a prompt class.
    pub fn pair_for_class(&self, class: u32) -> ModelPair<'_> {
        let (_, noise) = self.cfg.regime_for_class(class);
        ModelPair { target: self, noise }
    }

    /// Iterates `(window, row)` over every conditional row, windows oldest
    /// token first.
    pub fn table_rows(&self) -> impl Iterator<Item = (Vec<u32>, &[f64])> + '_ {
        let v = self.cfg.vocab_size;
        let m = self.cfg.context_order;
        (0..self.rows()).map(move |bucket| {
            let mut window = vec![0u32; m];
            let mut rest = bucket;
            for back in 0..m {
                window[m - 1 - back] = (rest % v) as u32;
                rest /= v;
            }
            (window, self.target_row_at(bucket))
        })
    }
}

/// Builds the target row for `bucket` from its own stream.
fn target_row(cfg: &ModelConfig, bucket: usize) -> Vec<f64> {
    let v = cfg.vocab_size;
    let mut r = rng::stream(cfg.seed, domain::TARGET_ROW, bucket as u64);
    let mut row = dirichlet_style_row(&mut r, v, cfg.sharpness);
    if cfg.blocks() > 1 && cfg.block_affinity > 0.0 {
        let last = (bucket % v) as u32;
        let (lo, hi) = cfg.block_range(cfg.block_of(last));
        let in_block: f64 = row[lo as usize..hi as usize].iter().sum();
        if in_block > 0.0 {
            let a = cfg.block_affinity;
            for (t, p) in row.iter_mut().enumerate() {
                let boost = if (lo as usize..hi as usize).contains(&t) {
                    a * *p / in_block
                } else {
                    0.0
                };
                *p = (1.0 - a) * *p + boost;
            }
        }
    }
    row
}

/// A target model together with its noise-mixed draft.
#[derive(Debug, Clone, Copy)]
pub struct ModelPair<'a> {
    pub target: &'a TargetModel,
    pub noise: f64,
}

impl<'a> ModelPair<'a> {
    pub fn target_next_dist(&self, context: &[u32]) -> Result<TokenDist> {
        self.target.target_next_dist(context)
    }

    /// `P_d(. | context)`.
    pub fn draft_next_dist(&self, context: &[u32]) -> Result<TokenDist> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.target.check_tokens(context)?;
        let mut row = Vec::with_capacity(self.target.vocab_size());
        self.draft_row_into(self.target.bucket(context, &[]), &mut row);
        Ok(TokenDist(row))
    }

    /// The `k` most likely draft tokens at `bucket` with their
    /// probabilities; equal to [`top_k`] over the draft row.
    pub(crate) fn draft_top_k(&self, bucket: usize, k: usize, row: &mut Vec<f64>) -> Vec<(u32, f64)> {
        self.draft_row_into(bucket, row);
        match self.target.draft_order(self.noise) {
            Some(order) => {
                let v = self.target.vocab_size();
                order[bucket * v..(bucket + 1) * v]
                    .iter()
                    .map(|&t| (t, row[t as usize]))
                    .take_while(|&(_, p)| p > 0.0)
                    .take(k)
                    .collect()
            }
            None => top_k(row, k),
        }
    }

    pub(crate) fn draft_row_into(&self, bucket: usize, out: &mut Vec<f64>) {
        let eps = self.noise;
        let p = self.target.target_row_at(bucket);
        out.clear();
        match self.target.noise_row_at(bucket) {
            None => {
                let u = 1.0 / p.len() as f64;
                out.extend(p.iter().map(|&x| (1.0 - eps) * x + eps * u));
            }
            Some(q) => out.extend(p.iter().zip(q).map(|(&x, &y)| (1.0 - eps) * x + eps * y)),
        }
    }
}
