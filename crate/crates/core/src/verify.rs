//! Lossless verification of drafted candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelPair;
use crate::lm::TargetModel;
use crate::tree::DraftTree;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResult {
    /// Accepted draft tokens, in order.
    pub accepted: Vec<u32>,
    /// Target-emitted token after the accepted run.
    pub correction: u32,
    pub accept_len: usize,
    pub candidates_checked: usize,
}

impl VerifyResult {
    /// `accepted ++ [correction]`.
    pub fn emitted(&self) -> Vec<u32> {
        let mut out = self.accepted.clone();
        out.push(self.correction);
        out
    }
}

/// Walks the tree along target argmaxes, restricted to `candidates`.
///
/// The emitted tokens always equal the next `accept_len + 1` tokens of pure
/// greedy target decoding from `context`.
pub fn verify_greedy_tree(
    target: &TargetModel,
    context: &[u32],
    tree: &DraftTree,
    candidates: &[usize],
) -> Result<VerifyResult> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    target.check_tokens(context)?;
    let mut in_set = vec![false; tree.nodes.len()];
    for &c in candidates {
        if c >= tree.nodes.len() {
            return Err(Error::Contract(format!("candidate {c} is not a tree node")));
        }
        in_set[c] = true;
    }
    for &c in candidates {
        if let Some(p) = tree.nodes[c].parent {
            if !in_set[p] {
                return Err(Error::Contract(format!(
                    "candidate set is not ancestor-closed: node {c} lacks parent {p}"
                )));
            }
        }
    }

    let mut accepted = Vec::new();
    let mut current: Option<usize> = None;
    loop {
        let want = target.greedy_next(context, &accepted);
        let next = candidates
            .iter()
            .copied()
            .find(|&c| tree.nodes[c].parent == current && tree.nodes[c].token == want);
        match next {
            Some(c) => {
                accepted.push(want);
                current = Some(c);
            }
            None => {
                return Ok(VerifyResult {
                    accept_len: accepted.len(),
                    accepted,
                    correction: want,
                    candidates_checked: candidates.len(),
                })
            }
        }
    }
}

/// Source of the random decisions made during stochastic verification.
pub trait Chooser {
    /// Returns `true` with probability `p`.
    fn bernoulli(&mut self, p: f64) -> bool;
    /// Draws an index with probability proportional to `weights`.
    fn categorical(&mut self, weights: &[f64]) -> usize;
}

/// [`Chooser`] backed by a random number generator.
#[derive(Debug, Clone)]
pub struct RngChooser<R>(pub R);

impl<R: Rng> Chooser for RngChooser<R> {
    fn bernoulli(&mut self, p: f64) -> bool {
        p >= 1.0 || self.0.random::<f64>() < p
    }

    fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.0.random::<f64>() * total;
        let mut last = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
        last
    }
}

/// `min(1, P_T(token) / P_d(token))`.
pub fn acceptance_probability(p_target: f64, p_draft: f64) -> Result<f64> {
    if p_draft <= 0.0 {
        return Err(Error::Contract(
            "draft offered a token it assigns zero probability".into(),
        ));
    }
    Ok((p_target / p_draft).min(1.0))
}

/// Chain rejection sampling: accept each draft token with probability
/// `min(1, P_T / P_d)`; on the first rejection emit a draw from the residual
/// `norm(max(0, P_T - P_d))`, and on full acceptance a draw from `P_T`.
pub fn verify_stochastic_chain<C: Chooser + ?Sized>(
    pair: &ModelPair<'_>,
    context: &[u32],
    chain: &[u32],
    chooser: &mut C,
) -> Result<VerifyResult> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let target = pair.target;
    target.check_tokens(context)?;
    target.check_tokens(chain)?;
    let mut pd = Vec::with_capacity(target.vocab_size());
    let mut accepted = Vec::with_capacity(chain.len());
    for &tok in chain {
        let bucket = target.bucket(context, &accepted);
        let pt = target.target_row_at(bucket);
        pair.draft_row_into(bucket, &mut pd);
        let alpha = acceptance_probability(pt[tok as usize], pd[tok as usize])?;
        if chooser.bernoulli(alpha) {
            accepted.push(tok);
            continue;
        }
        let residual: Vec<f64> = pt.iter().zip(&pd).map(|(t, d)| (t - d).max(0.0)).collect();
        if residual.iter().all(|&r| r <= 0.0) {
            return Err(Error::Contract("rejection with an empty residual".into()));
        }
        let correction = chooser.categorical(&residual) as u32;
        return Ok(VerifyResult {
            accept_len: accepted.len(),
            accepted,
            correction,
            candidates_checked: chain.len(),
        });
    }
    let pt = target.target_row_at(target.bucket(context, &accepted));
    let correction = chooser.categorical(pt) as u32;
    Ok(VerifyResult {
        accept_len: accepted.len(),
        accepted,
        correction,
        candidates_checked: chain.len(),
    })
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptStats {
    pub steps: usize,
    /// Per-step accepted / checked.
    pub rate_mean: f64,
    pub rate_sd: f64,
    /// Per-step accepted count.
    pub length_mean: f64,
    pub length_sd: f64,
    pub total_accepted: usize,
    pub total_checked: usize,
    pub total_elapsed: f64,
}

impl AcceptStats {
    pub fn rate_display(&self) -> String {
        format!("{:.4} ± {:.4}", self.rate_mean, self.rate_sd)
    }

    pub fn length_display(&self) -> String {
        format!("{:.2} ± {:.2}", self.length_mean, self.length_sd)
    }
}

/// Summarizes a run of verification steps and their elapsed times.
pub fn accept_stats(results: &[VerifyResult], elapsed: &[f64]) -> Result<AcceptStats> {
    let counts: Vec<(usize, usize)> = results.iter().map(|r| (r.accept_len, r.candidates_checked)).collect();
    accept_stats_counts(&counts, elapsed)
}

/// [`accept_stats`] over `(accepted, checked)` pairs, as kept in run logs.
pub fn accept_stats_counts(counts: &[(usize, usize)], elapsed: &[f64]) -> Result<AcceptStats> {
    if counts.is_empty() {
        return Err(Error::Empty("verification results"));
    }
    if counts.len() != elapsed.len() {
        return Err(Error::DimensionMismatch {
            expected: counts.len(),
            got: elapsed.len(),
        });
    }
    let rates: Vec<f64> = counts
        .iter()
        .map(|&(a, c)| if c == 0 { 0.0 } else { a as f64 / c as f64 })
        .collect();
    let lengths: Vec<f64> = counts.iter().map(|&(a, _)| a as f64).collect();
    let (rate_mean, rate_sd) = mean_sd(&rates);
    let (length_mean, length_sd) = mean_sd(&lengths);
    Ok(AcceptStats {
        steps: counts.len(),
        rate_mean,
        rate_sd,
        length_mean,
        length_sd,
        total_accepted: counts.iter().map(|c| c.0).sum(),
        total_checked: counts.iter().map(|c| c.1).sum(),
        total_elapsed: elapsed.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::lm::ModelConfig;
    use crate::tree::{build_tree, rerank, TreeNode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TargetModel {
        TargetModel::new(ModelConfig::default()).unwrap()
    }

    fn result(accepted: usize, checked: usize) -> VerifyResult {
        VerifyResult {
            accepted: vec![1; accepted],
            correction: 0,
            accept_len: accepted,
            candidates_checked: checked,
        }
    }

    #[test]
    fn acceptance_formula() {
        assert!((acceptance_probability(0.3, 0.6).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(acceptance_probability(0.6, 0.3).unwrap(), 1.0);
        assert!(acceptance_probability(0.6, 0.0).is_err());
    }

    #[test]
    fn exact_draft_accepts_whole_chain() {
        let m = model();
        let pair = m.pair(0.0).unwrap();
        let mut rng = RngChooser(ChaCha8Rng::seed_from_u64(1));
        for i in 0..50u32 {
            let chain = [i % 16, (i * 7) % 16, 3];
            let r = verify_stochastic_chain(&pair, &[0, 1], &chain, &mut rng).unwrap();
            assert_eq!(r.accept_len, 3);
        }
    }

    #[test]
    fn greedy_immediate_rejection() {
        let m = model();
        let ctx = [0u32, 2];
        let want = m.target_next_dist(&ctx).unwrap().argmax();
        let other = (want + 1) % 16;
        let tree = DraftTree {
            nodes: vec![TreeNode {
                token: other,
                parent: None,
                confidence: 0.5,
                cum_v: 0.5,
                depth: 1,
                rank: 0,
            }],
            layers: vec![vec![0]],
            root_context: ctx.to_vec(),
            expanded: 1,
        };
        let r = verify_greedy_tree(&m, &ctx, &tree, &[0]).unwrap();
        assert_eq!(r.accept_len, 0);
        assert_eq!(r.emitted(), vec![want]);
    }

    #[test]
    fn greedy_exact_draft_accepts_argmax_path() {
        let m = model();
        let pair = m.pair(0.0).unwrap();
        let ctx = [0u32, 3];
        let tree = build_tree(&pair, &ctx, &Action::new(64, 6, 16)).unwrap();
        let cands = rerank(&tree, 64);
        let r = verify_greedy_tree(&m, &ctx, &tree, &cands).unwrap();
        // length of the greedy path that is present in the tree
        let greedy = m.greedy_decode(&ctx, 7).unwrap();
        let mut present = 0;
        let mut cur = None;
        for &t in &greedy {
            match tree.nodes.iter().position(|n| n.parent == cur && n.token == t) {
                Some(i) => {
                    present += 1;
                    cur = Some(i);
                }
                None => break,
            }
        }
        assert_eq!(r.accept_len, present);
        assert_eq!(r.emitted(), greedy[..present + 1]);
    }

    #[test]
    fn greedy_rejects_open_candidate_set() {
        let m = model();
        let pair = m.pair(0.2).unwrap();
        let tree = build_tree(&pair, &[0], &Action::new(32, 4, 8)).unwrap();
        let child = tree.layers[1][0];
        assert!(matches!(
            verify_greedy_tree(&m, &[0], &tree, &[child]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stats_basics() {
        let s = accept_stats(&[result(3, 12)], &[0.01]).unwrap();
        assert_eq!(s.rate_mean, 0.25);
        let same = accept_stats(&[result(2, 8), result(2, 8), result(2, 8)], &[1.0; 3]).unwrap();
        assert_eq!(same.rate_sd, 0.0);
        assert_eq!(same.length_sd, 0.0);
        assert!(accept_stats(&[], &[]).is_err());
        assert!(accept_stats(&[result(1, 2)], &[]).is_err());
    }
}
