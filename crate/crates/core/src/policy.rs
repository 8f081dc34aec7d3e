//! Actor-critic policy over the flat feasible-action list.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::{self, domain};

const MAGIC: &[u8; 8] = b"SPTUNEPL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub state_dim: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

/// How an action is drawn from the actor's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selection {
    /// Sample from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
    /// Take the highest logit.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub arch: PolicyArch,
    pub actor: Mlp,
    pub critic: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Distribution the action was drawn from.
    pub probs: Vec<f64>,
    pub index: usize,
    /// Log-probability of `index` under `probs`.
    pub log_prob: f64,
}

/// Numerically stable `softmax(logits / temperature)`. A non-positive
/// temperature yields the one-hot argmax (lowest index on ties).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let best = argmax(logits);
        return (0..logits.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// `log softmax(logits)` at temperature 1.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

impl PolicyNet {
    /// Seeded initialization. The actor's output layer is scaled down so the
    /// initial policy is close to uniform.
    pub fn new(arch: PolicyArch, seed: u64) -> Result<Self> {
        if arch.state_dim == 0 || arch.hidden == 0 || arch.n_actions == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, domain::POLICY_INIT, 0);
        let h = arch.hidden;
        let actor = Mlp::new(&[arch.state_dim, h, h, arch.n_actions], 0.01, &mut r);
        let critic = Mlp::new(&[arch.state_dim, h, h, 1], 1.0, &mut r);
        Ok(Self { arch, actor, critic })
    }

    /// Zeroes the actor's output layer, making the policy exactly uniform.
    pub fn zero_actor_output(&mut self) {
        if let Some(last) = self.actor.layers.last_mut() {
            last.w.iter_mut().for_each(|w| *w = 0.0);
            last.b.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.arch.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.state_dim,
                got: state.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(self.actor.forward(state))
    }

    pub fn probs(&self, state: &[f64], temperature: f64) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(state)?, temperature))
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.critic.forward(state)[0])
    }

    pub fn all_finite(&self) -> bool {
        self.actor.all_finite() && self.critic.all_finite()
    }

    /// Serializes the net with a digest of the configuration that produced it.
    pub fn to_bytes(&self, config_digest: &[u8; 32]) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.arch).expect("arch serializes");
        let n = self.actor.n_params() + self.critic.n_params();
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(config_digest);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for p in self.actor.params().chain(self.critic.params()) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Inverse of [`PolicyNet::to_bytes`]; returns the net and its digest.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, [u8; 32])> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
        let meta_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let arch: PolicyArch =
            serde_json::from_slice(cur.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut net = PolicyNet::new(arch, 0)?;
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if n != net.actor.n_params() + net.critic.n_params() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for p in net.actor.params_mut().chain(net.critic.params_mut()) {
            *p = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((net, digest))
    }

    /// Weights as CSV: `network,layer,kind,row,col,value`.
    pub fn export_csv(&self) -> String {
        let mut s = String::from("network,layer,kind,row,col,value\n");
        for (name, mlp) in [("actor", &self.actor), ("critic", &self.critic)] {
            for (li, l) in mlp.layers.iter().enumerate() {
                for (i, w) in l.w.iter().enumerate() {
                    let _ = writeln!(s, "{name},{li},weight,{},{},{w}", i / l.n_in, i % l.n_in);
                }
                for (i, b) in l.b.iter().enumerate() {
                    let _ = writeln!(s, "{name},{li},bias,{i},0,{b}");
                }
            }
        }
        s
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// SHA-256 of a configuration's canonical text.
pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Runs the actor on `state` and selects an action.
pub fn policy_forward(
    net: &PolicyNet,
    state: &[f64],
    selection: Selection,
    rng: &mut impl Rng,
) -> Result<PolicyOutput> {
    let logits = net.logits(state)?;
    let (probs, index) = match selection {
        Selection::Sample { temperature } => {
            let probs = softmax(&logits, temperature);
            let index = sample_index(&probs, rng);
            (probs, index)
        }
        Selection::Greedy => (softmax(&logits, 1.0), argmax(&logits)),
    };
    let log_prob = probs[index].ln();
    Ok(PolicyOutput { probs, index, log_prob })
}
