//! The constrained `(TT, d, k)` action grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOTAL_TOKEN_VALUES: [u32; 6] = [32, 48, 64, 80, 96, 128];
pub const DEPTH_VALUES: [u32; 6] = [3, 4, 5, 6, 7, 8];
pub const TOP_K_VALUES: [u32; 5] = [8, 12, 16, 20, 32];

/// Upper limits on total draft tokens, tree depth and per-layer width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub total_tokens: u32,
    pub depth: u32,
    pub top_k: u32,
}

impl Action {
    pub const fn new(total_tokens: u32, depth: u32, top_k: u32) -> Self {
        Self {
            total_tokens,
            depth,
            top_k,
        }
    }

    /// `TT <= k^(d-1)` with all limits positive.
    pub fn is_feasible(&self) -> bool {
        if self.total_tokens == 0 || self.depth == 0 || self.top_k == 0 {
            return false;
        }
        let cap = (self.top_k as u64).checked_pow(self.depth - 1).unwrap_or(u64::MAX);
        self.total_tokens as u64 <= cap
    }

    pub fn ensure_feasible(&self) -> Result<()> {
        if self.is_feasible() {
            Ok(())
        } else {
            Err(Error::InfeasibleAction {
                tt: self.total_tokens,
                depth: self.depth,
                top_k: self.top_k,
            })
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.total_tokens, self.depth, self.top_k)
    }
}

/// Parses `TT,d,k`, with or without surrounding parentheses.
impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<u32> = trimmed
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad action `{s}`: {e}")))?;
        match parts.as_slice() {
            [tt, d, k] => Ok(Action::new(*tt, *d, *k)),
            _ => Err(Error::Config(format!("action `{s}` must be TT,d,k"))),
        }
    }
}

/// The feasible actions in lexicographic `(TT, d, k)` order; an action's
/// index is its position in this list.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    actions: Vec<Action>,
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl ActionSpace {
    pub fn new() -> Self {
        Self {
            actions: enumerate_actions(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<Action> {
        self.actions.get(index).copied()
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.actions.binary_search(action).ok()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

/// Every grid triple satisfying the feasibility constraint.
pub fn enumerate_actions() -> Vec<Action> {
    let mut out = Vec::new();
    for tt in TOTAL_TOKEN_VALUES {
        for d in DEPTH_VALUES {
            for k in TOP_K_VALUES {
                let a = Action::new(tt, d, k);
                if a.is_feasible() {
                    out.push(a);
                }
            }
        }
    }
    out
}
