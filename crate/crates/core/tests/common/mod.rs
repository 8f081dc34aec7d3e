//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spectune::action::Action;
use spectune::lm::{ModelConfig, ModelPair, NoiseKind, TargetModel};
use spectune::policy::{PolicyArch, PolicyNet};
use spectune::ppo::{
    compute_gae, objective, objective_gradient, ppo_update, prepare_batch, Adam, ObjectiveWeights, PpoConfig, Sample,
    Transition,
};
use spectune::verify::Chooser;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- draft tree

/// A node of the oracle tree, identified by its full path from the root.
#[derive(Debug, Clone)]
pub struct OracleNode {
    pub path: Vec<u32>,
    pub cum_v: f64,
    /// Position of the parent within its (sorted) layer.
    pub parent_rank: usize,
}

/// Layer-wise expansion written out directly: every kept parent offers its
/// `k` best tokens from the full draft row, all offers are pooled, sorted,
/// and cut to `min(k, TT - placed)`.
pub fn brute_force_tree(pair: &ModelPair<'_>, context: &[u32], a: &Action) -> Vec<Vec<OracleNode>> {
    let k = a.top_k as usize;
    let tt = a.total_tokens as usize;
    let mut layers: Vec<Vec<OracleNode>> = Vec::new();
    let mut placed = 0;
    let root = OracleNode {
        path: vec![],
        cum_v: 1.0,
        parent_rank: 0,
    };
    for _ in 0..a.depth {
        if placed >= tt {
            break;
        }
        let parents: Vec<OracleNode> = match layers.last() {
            None => vec![root.clone()],
            Some(l) => l.iter().take(k).cloned().collect(),
        };
        let mut offers: Vec<OracleNode> = Vec::new();
        for (rank, p) in parents.iter().enumerate() {
            let mut ctx = context.to_vec();
            ctx.extend(&p.path);
            let row = pair.draft_next_dist(&ctx).unwrap().0;
            let mut toks: Vec<u32> = (0..row.len() as u32).collect();
            toks.sort_by(|&x, &y| row[y as usize].partial_cmp(&row[x as usize]).unwrap().then(x.cmp(&y)));
            for &t in toks.iter().take(k) {
                if row[t as usize] <= 0.0 {
                    continue;
                }
                let mut path = p.path.clone();
                path.push(t);
                offers.push(OracleNode {
                    path,
                    cum_v: p.cum_v * row[t as usize],
                    parent_rank: rank,
                });
            }
        }
        // equal V: lower token, then the better-ranked parent
        offers.sort_by(|x, y| {
            y.cum_v
                .partial_cmp(&x.cum_v)
                .unwrap()
                .then(x.path.last().cmp(&y.path.last()))
                .then(x.parent_rank.cmp(&y.parent_rank))
        });
        offers.truncate(k.min(tt - placed));
        if offers.is_empty() {
            break;
        }
        placed += offers.len();
        layers.push(offers);
    }
    layers
}

pub fn random_model(r: &mut impl Rng, max_vocab: usize) -> TargetModel {
    let vocab = r.random_range(2..=max_vocab);
    TargetModel::new(ModelConfig {
        seed: r.random(),
        vocab_size: vocab,
        context_order: r.random_range(1..=2),
        draft_noise: r.random_range(0.0..1.0),
        noise_kind: if r.random() {
            NoiseKind::Uniform
        } else {
            NoiseKind::Perturbed
        },
        sharpness: r.random_range(0.5..3.0),
        ..ModelConfig::default()
    })
    .unwrap()
}

/// A random `(TT, d, k)` within the given limits (not restricted to the grid).
pub fn random_limits(r: &mut impl Rng, max_tt: u32, max_d: u32, max_k: u32) -> Action {
    Action::new(
        r.random_range(1..=max_tt),
        r.random_range(1..=max_d),
        r.random_range(1..=max_k),
    )
}

pub fn random_context(r: &mut impl Rng, vocab: usize) -> Vec<u32> {
    let n = r.random_range(1..=5);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

// ------------------------------------------------------------- verification

/// Walks every branch of a sequence of random decisions. Each run replays a
/// prefix of fixed choices, then takes the first option at every new
/// decision and records how many options it had and their probabilities.
pub struct Enumerator {
    script: Vec<usize>,
    pos: usize,
    /// Probabilities of every option at each decision of the current run.
    pub options: Vec<Vec<f64>>,
}

impl Enumerator {
    fn new(script: Vec<usize>) -> Self {
        Self {
            script,
            pos: 0,
            options: Vec::new(),
        }
    }

    fn pick(&mut self, probs: Vec<f64>) -> usize {
        let choice = if self.pos < self.script.len() {
            self.script[self.pos]
        } else {
            probs.iter().position(|&p| p > 0.0).expect("some option has mass")
        };
        self.options.push(probs);
        self.pos += 1;
        choice
    }

    fn chosen(&self) -> Vec<usize> {
        let mut out = self.script.clone();
        for probs in &self.options[self.script.len()..] {
            out.push(probs.iter().position(|&p| p > 0.0).unwrap());
        }
        out
    }

    fn prob(&self) -> f64 {
        self.chosen()
            .iter()
            .zip(&self.options)
            .map(|(&c, probs)| probs[c])
            .product()
    }
}

impl Chooser for Enumerator {
    fn bernoulli(&mut self, p: f64) -> bool {
        self.pick(vec![p, 1.0 - p]) == 0
    }

    fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        self.pick(weights.iter().map(|w| w / total).collect())
    }
}

/// Calls `run` once per branch of its decision tree and returns each
/// branch's result with its probability.
pub fn enumerate_branches<T>(mut run: impl FnMut(&mut Enumerator) -> T) -> Vec<(T, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(script) = stack.pop() {
        let mut e = Enumerator::new(script);
        let value = run(&mut e);
        let chosen = e.chosen();
        let p = e.prob();
        // queue the untried options at each decision past the fixed prefix
        for d in e.script.len()..chosen.len() {
            for (alt, &q) in e.options[d].iter().enumerate() {
                if alt > chosen[d] && q > 0.0 {
                    let mut s = chosen[..d].to_vec();
                    s.push(alt);
                    stack.push(s);
                }
            }
        }
        if p > 0.0 {
            out.push((value, p));
        }
    }
    out
}

/// Probability of every length-`n` continuation of `context` under the target.
pub fn target_sequences(target: &TargetModel, context: &[u32], n: usize) -> BTreeMap<Vec<u32>, f64> {
    let mut out = BTreeMap::new();
    out.insert(Vec::new(), 1.0);
    for _ in 0..n {
        let mut next = BTreeMap::new();
        for (seq, p) in out {
            let mut ctx = context.to_vec();
            ctx.extend(&seq);
            for (t, &q) in target.target_next_dist(&ctx).unwrap().0.iter().enumerate() {
                if q > 0.0 {
                    let mut s: Vec<u32> = seq.clone();
                    s.push(t as u32);
                    *next.entry(s).or_insert(0.0) += p * q;
                }
            }
        }
        out = next;
    }
    out
}

pub fn total_variation(a: &BTreeMap<Vec<u32>, f64>, b: &BTreeMap<Vec<u32>, f64>) -> f64 {
    let mut keys: Vec<&Vec<u32>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

// ---------------------------------------------------------------------- PPO

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` with the episode's deltas
/// computed up front.
pub fn gae_double_sum(
    rewards: &[f64],
    values: &[f64],
    ends: &[Option<f64>],
    gamma: f64,
    lambda: f64,
    bootstrap: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = match ends[t] {
                Some(v) => v,
                None if t + 1 == n => bootstrap,
                None => values[t + 1],
            };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut l = 0;
            loop {
                sum += (gamma * lambda).powi(l as i32) * delta[t + l];
                if ends[t + l].is_some() || t + l + 1 == n {
                    break;
                }
                l += 1;
            }
            sum
        })
        .collect()
}

pub fn random_net(r: &mut impl Rng, n_actions: usize) -> PolicyNet {
    let arch = PolicyArch {
        state_dim: r.random_range(2..=6),
        hidden: r.random_range(3..=8),
        n_actions,
    };
    PolicyNet::new(arch, r.random()).unwrap()
}

/// Samples near the current policy (ratios within the clip range) plus a few
/// far outside it, away from the clip kinks.
pub fn random_samples(r: &mut impl Rng, net: &PolicyNet, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let state: Vec<f64> = (0..net.arch.state_dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let probs = net.probs(&state, 1.0).unwrap();
            let action = r.random_range(0..net.arch.n_actions);
            let shift = if i % 4 == 3 {
                r.random_range(0.6..1.0) * if r.random() { 1.0 } else { -1.0 }
            } else {
                r.random_range(-0.1..0.1)
            };
            Sample {
                state,
                action,
                old_log_prob: probs[action].ln() + shift,
                advantage: r.random_range(-2.0..2.0),
                ret: r.random_range(-1.0..1.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Actor,
    Critic,
}

/// Relative error `|g - fd| / max(|g|, |fd|)` between the analytic gradient
/// of `total` and a central finite difference, over one network.
pub fn gradient_error(net: &PolicyNet, samples: &[Sample], w: ObjectiveWeights, which: Net) -> f64 {
    let (_, grad) = objective_gradient(net, samples, w).unwrap();
    let analytic: Vec<f64> = match which {
        Net::Actor => grad.actor.params().copied().collect(),
        Net::Critic => grad.critic.params().copied().collect(),
    };
    let h = 1e-5;
    let mut fd = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let eval = |delta: f64| {
            let mut n = net.clone();
            let p = match which {
                Net::Actor => n.actor.params_mut().nth(i).unwrap(),
                Net::Critic => n.critic.params_mut().nth(i).unwrap(),
            };
            *p += delta;
            objective(&n, samples, w).unwrap().total
        };
        fd.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na.max(nf) == 0.0 {
        0.0
    } else {
        diff / na.max(nf)
    }
}

/// The three gradient checks on one random net: surrogate (actor), value
/// loss (critic) and entropy (actor). Returns the worst relative error.
pub fn gradient_checks(seed: u64) -> [f64; 3] {
    let mut r = rng(seed);
    let n_actions = if seed.is_multiple_of(5) {
        177
    } else {
        r.random_range(2..=12)
    };
    let net = random_net(&mut r, n_actions);
    let samples = random_samples(&mut r, &net, 8);
    let actor = gradient_error(
        &net,
        &samples,
        ObjectiveWeights {
            clip_range: 0.2,
            vf_coef: 0.0,
            ent_coef: 0.0,
        },
        Net::Actor,
    );
    let critic = gradient_error(
        &net,
        &samples,
        ObjectiveWeights {
            clip_range: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
        },
        Net::Critic,
    );
    let no_adv: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            advantage: 0.0,
            ..s.clone()
        })
        .collect();
    let ent = gradient_error(
        &net,
        &no_adv,
        ObjectiveWeights {
            clip_range: 0.2,
            vf_coef: 0.0,
            ent_coef: 1.0,
        },
        Net::Actor,
    );
    [actor, critic, ent]
}

/// GAE vs the double sum on random episodes; returns the largest deviation.
pub fn gae_max_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..40);
    let rewards: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let values: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let ends: Vec<Option<f64>> = (0..n)
        .map(|_| match r.random_range(0..6) {
            0 => Some(0.0),
            1 => Some(r.random_range(-1.0..1.0)),
            _ => None,
        })
        .collect();
    let gamma = r.random_range(0.5..1.0);
    let lambda = r.random_range(0.0..1.0);
    let boot = r.random_range(-1.0..1.0);
    let (adv, ret) = spectune::ppo::compute_gae_episodes(&rewards, &values, &ends, gamma, lambda, boot).unwrap();
    let oracle = gae_double_sum(&rewards, &values, &ends, gamma, lambda, boot);
    let mut worst: f64 = 0.0;
    for t in 0..n {
        worst = worst.max((adv[t] - oracle[t]).abs());
        worst = worst.max((ret[t] - (oracle[t] + values[t])).abs());
    }
    // the single-segment entry point is the no-ends case
    let (a2, _) = compute_gae(&rewards, &values, gamma, lambda, boot).unwrap();
    let o2 = gae_double_sum(&rewards, &values, &vec![None; n], gamma, lambda, boot);
    for t in 0..n {
        worst = worst.max((a2[t] - o2[t]).abs());
    }
    worst
}

/// With the entropy weight at zero the max-entropy objective and update are
/// bit-identical to the standard ones.
pub fn zero_entropy_matches_standard(seed: u64) -> bool {
    let mut r = rng(seed);
    let net = random_net(&mut r, 9);
    let samples = random_samples(&mut r, &net, 16);
    let mut std = PpoConfig::standard();
    let mut ment = PpoConfig::max_entropy();
    std.ent_coef = 0.0;
    ment.ent_coef = 0.0;
    let (ta, ga) = objective_gradient(&net, &samples, std.weights()).unwrap();
    let (tb, gb) = objective_gradient(&net, &samples, ment.weights()).unwrap();
    if ta != tb || ga.actor != gb.actor || ga.critic != gb.critic {
        return false;
    }
    // same update given the same batch and minibatch order
    let (mut na, mut nb) = (net.clone(), net.clone());
    let (mut oa, mut ob) = (Adam::new(&na, std.learning_rate), Adam::new(&nb, ment.learning_rate));
    ppo_update(&mut na, &mut oa, &samples, &std, &mut rng(1)).unwrap();
    ppo_update(&mut nb, &mut ob, &samples, &ment, &mut rng(1)).unwrap();
    na == nb
}

// ------------------------------------------------------------------- bandit

/// Two noisy states; action `good[s]` pays 1 in state `s`, everything else 0.
pub struct Bandit {
    pub centers: [Vec<f64>; 2],
    pub good: [usize; 2],
    pub noise: f64,
}

impl Bandit {
    pub fn new(dim: usize, n_actions: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let c0: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let c1: Vec<f64> = c0.iter().map(|x| -x).collect();
        let a = r.random_range(0..n_actions);
        let mut b = r.random_range(0..n_actions);
        while b == a {
            b = r.random_range(0..n_actions);
        }
        Self {
            centers: [c0, c1],
            good: [a, b],
            noise: 0.1,
        }
    }

    pub fn state(&self, s: usize, r: &mut impl Rng) -> Vec<f64> {
        self.centers[s]
            .iter()
            .map(|c| c + self.noise * r.random_range(-1.0..1.0))
            .collect()
    }

    /// Fraction of fresh states whose argmax action is the paying one.
    pub fn accuracy(&self, net: &PolicyNet, trials: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut correct = 0;
        for i in 0..trials {
            let s = i % 2;
            let logits = net.logits(&self.state(s, &mut r)).unwrap();
            correct += (spectune::policy::argmax(&logits) == self.good[s]) as usize;
        }
        correct as f64 / trials as f64
    }
}

/// Runs `updates` PPO updates on the bandit, one-step episodes.
pub fn train_bandit(bandit: &Bandit, net: &mut PolicyNet, cfg: &PpoConfig, updates: usize, seed: u64) {
    let mut r = rng(seed);
    let mut opt = Adam::new(net, cfg.learning_rate);
    for _ in 0..updates {
        let mut buf = Vec::with_capacity(cfg.n_steps);
        for _ in 0..cfg.n_steps {
            let s = r.random_range(0..2);
            let state = bandit.state(s, &mut r);
            let probs = net.probs(&state, 1.0).unwrap();
            let idx = spectune::policy::policy_forward(
                net,
                &state,
                spectune::policy::Selection::Sample { temperature: 1.0 },
                &mut r,
            )
            .unwrap()
            .index;
            buf.push(Transition {
                value: net.value(&state).unwrap(),
                state,
                action_index: idx,
                log_prob: probs[idx].ln(),
                reward: if idx == bandit.good[s] { 1.0 } else { 0.0 },
                done: true,
                end_value: 0.0,
            });
        }
        let samples = prepare_batch(
            &buf,
            0.0,
            &PpoConfig {
                reward_scale: 1.0,
                ..cfg.clone()
            },
        )
        .unwrap();
        ppo_update(net, &mut opt, &samples, cfg, &mut r).unwrap();
    }
}

// ----------------------------------------------------------------- wilcoxon

/// Enumerates all sign assignments of the observed absolute differences.
pub fn wilcoxon_enumerate(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let rank = |a: f64| {
        let less = abs.iter().filter(|&&b| b < a).count() as f64;
        let eq = abs.iter().filter(|&&b| b == a).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let ranks: Vec<f64> = abs.iter().map(|&a| rank(a)).collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut le = 0usize;
    let mut ge = 0usize;
    for mask in 0..(1usize << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / (1usize << n) as f64).min(1.0)
}

/// Two-sided exact p-value from the full rank-sum distribution, built by
/// counting subsets of doubled ranks with dynamic programming.
pub fn wilcoxon_exact_dp(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    // midranks by direct counting: rank = #smaller + (#equal + 1) / 2
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let ranks2: Vec<usize> = abs
        .iter()
        .map(|&a| {
            let less = abs.iter().filter(|&&b| b < a).count();
            let eq = abs.iter().filter(|&&b| b == a).count();
            2 * less + eq + 1
        })
        .collect();
    let total: usize = ranks2.iter().sum();
    let w: usize = nz.iter().zip(&ranks2).filter(|(x, _)| **x > 0.0).map(|(_, r)| *r).sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &ranks2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all: f64 = counts.iter().sum();
    let le: f64 = counts[..=w].iter().sum();
    let ge: f64 = counts[w..].iter().sum();
    (2.0 * le.min(ge) / all).min(1.0)
}

/// Random paired differences with ties, zeros and mixed signs.
pub fn wilcoxon_fixture(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = r.random_range(0..6) as f64 * 0.5;
            if r.random() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

// ------------------------------------------------------------------ harness

/// The shipped configuration scaled down for quick end-to-end runs.
pub fn small_config() -> spectune::config::Config {
    let mut cfg = spectune::config::Config::default();
    cfg.run.max_new_tokens = 64;
    cfg.train_corpus.n_questions = 40;
    cfg.eval_corpus.n_questions = 6;
    cfg.policy.hidden = 16;
    cfg.features.embedding_dim = 32;
    cfg.bench.ablation_hidden = vec![8];
    cfg
}

// ---------------------------------------------------------------------- cli

pub fn spectune(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_spectune"))
        .args(args)
        .env_remove("SPECTUNE_OUT_DIR")
        .output()
        .expect("spawn spectune")
}

/// Runs every subcommand on the small config into `out`; returns the
/// commands that did not exit 0.
pub fn run_all_commands(config: &std::path::Path, out: &std::path::Path) -> Vec<String> {
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    let ckpt = out.join("policy.ckpt");
    let p = ckpt.to_str().unwrap();
    let log = out.join("eval_steps.csv");
    let l = log.to_str().unwrap();
    let cmds: Vec<Vec<&str>> = vec![
        vec!["train", "--config", c, "--seed", "42", "--out", o],
        vec!["eval", "--config", c, "--policy", p, "--out", o],
        vec!["bench", "--config", c, "--policy", p, "--out", o],
        vec![
            "sweep-cache",
            "--config",
            c,
            "--policy",
            p,
            "--n",
            "1,10,50",
            "--out",
            o,
        ],
        vec!["profile", "--config", c, "--log", l, "--out", o],
        vec!["ablate", "--config", c, "--hidden", "8", "--out", o],
        vec!["inspect-tree", "--config", c, "--action", "32,4,8", "--out", o],
        vec!["dump-model", "--config", c, "--out", o],
        vec!["export-policy", "--config", c, "--policy", p, "--out", o],
    ];
    cmds.into_iter()
        .filter_map(|args| {
            let res = spectune(&args);
            (!res.status.success()).then(|| {
                format!(
                    "{} -> {:?}: {}",
                    args[0],
                    res.status.code(),
                    String::from_utf8_lossy(&res.stderr)
                )
            })
        })
        .collect()
}

/// Files that differ between two artifact directories, `meta.json` excepted.
pub fn artifact_diff(a: &std::path::Path, b: &std::path::Path) -> Vec<String> {
    let names = |d: &std::path::Path| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n != "meta.json")
            .collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    if na != nb {
        return vec![format!("file sets differ: {na:?} vs {nb:?}")];
    }
    na.into_iter()
        .filter(|n| std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap())
        .collect()
}

/// Writes the small config, runs everything twice, and reports the number of
/// artifacts compared plus any problems.
pub fn cli_reruns_identical(dir: &std::path::Path) -> (usize, Vec<String>) {
    let config = dir.join("small.toml");
    std::fs::write(&config, small_config().to_toml()).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    let mut problems = run_all_commands(&config, &a);
    problems.extend(run_all_commands(&config, &b));
    problems.extend(artifact_diff(&a, &b));
    let count = std::fs::read_dir(&a).map(|d| d.count()).unwrap_or(0);
    (count, problems)
}

// --------------------------------------------------------- tree test drivers

/// Compares a built tree with the oracle layer by layer, as (path, cum_v) sets.
pub fn matches_oracle(tree: &spectune::tree::DraftTree, oracle: &[Vec<OracleNode>]) -> Result<(), String> {
    if tree.layers.len() != oracle.len() {
        return Err(format!("{} layers vs oracle {}", tree.layers.len(), oracle.len()));
    }
    for (d, (layer, want)) in tree.layers.iter().zip(oracle).enumerate() {
        let mut got: Vec<(Vec<u32>, f64)> = layer.iter().map(|&i| (tree.path(i), tree.nodes[i].cum_v)).collect();
        let mut want: Vec<(Vec<u32>, f64)> = want.iter().map(|n| (n.path.clone(), n.cum_v)).collect();
        got.sort_by(|a, b| a.0.cmp(&b.0));
        want.sort_by(|a, b| a.0.cmp(&b.0));
        if got.len() != want.len() {
            return Err(format!("layer {d}: width {} vs {}", got.len(), want.len()));
        }
        for (g, w) in got.iter().zip(&want) {
            if g.0 != w.0 || (g.1 - w.1).abs() > 1e-12 {
                return Err(format!("layer {d}: {g:?} vs {w:?}"));
            }
        }
    }
    Ok(())
}

pub fn feasible_limits(r: &mut impl rand::Rng) -> Action {
    loop {
        let a = random_limits(r, 32, 4, 8);
        if a.is_feasible() {
            return a;
        }
    }
}

/// Checks `n` random instances against [`brute_force_tree`]; stops at the first mismatch.
pub fn tree_oracle_run(seed: u64, n: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let model = random_model(&mut r, 16);
        let pair = model.pair(model.config().draft_noise).unwrap();
        let ctx = random_context(&mut r, model.vocab_size());
        let a = feasible_limits(&mut r);
        let tree = spectune::tree::build_tree(&pair, &ctx, &a).unwrap();
        matches_oracle(&tree, &brute_force_tree(&pair, &ctx, &a))
            .map_err(|e| format!("case {case} action {a} context {ctx:?}: {e}"))?;
    }
    Ok(())
}

/// Budget, depth, width and `V` monotonicity over `n` random instances.
pub fn tree_invariant_run(seed: u64, n: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let model = random_model(&mut r, 16);
        let pair = model.pair(model.config().draft_noise).unwrap();
        let ctx = random_context(&mut r, model.vocab_size());
        let a = feasible_limits(&mut r);
        let tree = spectune::tree::build_tree(&pair, &ctx, &a).unwrap();
        let fail = |what: &str| Err(format!("case {case} action {a}: {what}"));
        if tree.len() > a.total_tokens as usize {
            return fail("over budget");
        }
        if tree.max_depth() > a.depth as usize {
            return fail("too deep");
        }
        if tree.layers.iter().any(|l| l.len() > a.top_k as usize) {
            return fail("layer too wide");
        }
        if tree.layers.iter().map(|l| l.len()).sum::<usize>() != tree.len() {
            return fail("layers do not cover the nodes");
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            if !(n.cum_v > 0.0 && n.cum_v <= 1.0) {
                return fail("cum_v outside (0, 1]");
            }
            let ok = match n.parent {
                None => n.depth == 1 && (n.cum_v - n.confidence).abs() < 1e-15,
                Some(p) => {
                    let par = &tree.nodes[p];
                    p < i
                        && n.cum_v <= par.cum_v
                        && (n.cum_v - par.cum_v * n.confidence).abs() < 1e-15
                        && n.depth == par.depth + 1
                }
            };
            if !ok {
                return fail(&format!("node {i} breaks parent consistency"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------- stochastic verification

/// Exact distribution of the first `chain_len + 1` emitted tokens when a
/// chain is drafted from the draft model, verified, and any shortfall is
/// filled by sampling the target.
pub fn speculative_distribution(
    target: &TargetModel,
    noise: f64,
    context: &[u32],
    chain_len: usize,
) -> BTreeMap<Vec<u32>, f64> {
    let pair = target.pair(noise).unwrap();
    let mut out: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    // every drafted chain with its draft probability
    let mut chains: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..chain_len {
        let mut next = Vec::new();
        for (c, p) in &chains {
            let mut ctx = context.to_vec();
            ctx.extend(c);
            for (t, &q) in pair.draft_next_dist(&ctx).unwrap().0.iter().enumerate() {
                if q > 0.0 {
                    let mut c2 = c.clone();
                    c2.push(t as u32);
                    next.push((c2, p * q));
                }
            }
        }
        chains = next;
    }
    for (chain, p_chain) in chains {
        let branches = enumerate_branches(|ch| {
            let v = spectune::verify::verify_stochastic_chain(&pair, context, &chain, ch).unwrap();
            v.emitted()
        });
        for (emitted, p_branch) in branches {
            let rest = chain_len + 1 - emitted.len();
            let mut ctx = context.to_vec();
            ctx.extend(&emitted);
            for (tail, p_tail) in target_sequences(target, &ctx, rest) {
                let mut seq = emitted.clone();
                seq.extend(tail);
                *out.entry(seq).or_insert(0.0) += p_chain * p_branch * p_tail;
            }
        }
    }
    out
}

/// Largest total variation between speculative and target output over
/// `cases` random models and chain lengths 0 to 2.
pub fn chain_tv_worst(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let vocab = if case < 4 { 16 } else { r.random_range(2..=16) };
        let target = TargetModel::new(ModelConfig {
            seed: r.random(),
            vocab_size: vocab,
            context_order: r.random_range(1..=2),
            noise_kind: if case % 2 == 0 {
                NoiseKind::Perturbed
            } else {
                NoiseKind::Uniform
            },
            sharpness: r.random_range(0.5..3.0),
            ..ModelConfig::default()
        })
        .unwrap();
        let noise = r.random_range(0.0..=1.0);
        let ctx = random_context(&mut r, vocab);
        for chain_len in 0..=2 {
            let spec = speculative_distribution(&target, noise, &ctx, chain_len);
            let want = target_sequences(&target, &ctx, chain_len + 1);
            worst = worst.max(total_variation(&spec, &want));
        }
    }
    worst
}

/// Trains a fresh 177-action net on an 8-dimensional bandit for 200 updates and
/// returns its held-out accuracy.
pub fn bandit_accuracy(cfg: &PpoConfig, seed: u64) -> f64 {
    let bandit = Bandit::new(8, 177, seed);
    let mut net = PolicyNet::new(
        PolicyArch {
            state_dim: 8,
            hidden: 64,
            n_actions: 177,
        },
        seed,
    )
    .unwrap();
    train_bandit(&bandit, &mut net, cfg, 200, seed);
    bandit.accuracy(&net, 1000, seed + 1)
}
