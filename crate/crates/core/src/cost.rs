//! Step latency model.
//!
//! A draft/verify step costs one target forward pass plus per-candidate
//! verification work, per-layer and per-expansion drafting work, per-node
//! tree bookkeeping, and a policy forward pass when the policy is queried.
//! In simulated mode the step time is a pure function of these counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};

/// Floor applied to simulated step time so that rewards stay finite.
pub const MIN_ELAPSED: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    #[default]
    Simulated,
    Wallclock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub t_target_base: f64,
    pub t_target_per_token: f64,
    pub t_draft_base: f64,
    pub t_draft_per_node: f64,
    pub t_policy: f64,
    pub t_tree_mgmt_per_node: f64,
    pub mode: TimingMode,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_target_base: 20e-3,
            t_target_per_token: 0.05e-3,
            t_draft_base: 1.5e-3,
            t_draft_per_node: 0.02e-3,
            t_policy: 0.5e-3,
            t_tree_mgmt_per_node: 0.01e-3,
            mode: TimingMode::Simulated,
        }
    }
}

/// Shape counts of one built and reranked tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeStats {
    /// Non-empty layers below the root.
    pub layers: usize,
    /// Nodes (root included) whose children were proposed by the draft.
    pub expanded: usize,
    /// Non-root nodes.
    pub nodes: usize,
    /// Size of the reranked candidate list sent to verification.
    pub candidates: usize,
}

/// Time attributed to each consolidated category for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepCost {
    pub drafting: f64,
    pub tree_management: f64,
    pub verification: f64,
    pub policy: f64,
}

impl StepCost {
    pub fn total(&self) -> f64 {
        self.drafting + self.tree_management + self.verification + self.policy
    }

    /// Sub-events in logging order.
    pub fn events(&self) -> [(SubEvent, f64); 4] {
        [
            (SubEvent::DraftingProcess, self.drafting),
            (SubEvent::TreeConstruction, self.tree_management),
            (SubEvent::VerificationProcess, self.verification),
            (SubEvent::RlPolicyPrediction, self.policy),
        ]
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t_target_base,
            self.t_target_per_token,
            self.t_draft_base,
            self.t_draft_per_node,
            self.t_policy,
            self.t_tree_mgmt_per_node,
        ];
        if all.iter().all(|t| t.is_finite() && *t >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("cost constants must be finite and >= 0".into()))
        }
    }

    /// Zero-cost model except for the given target pass time.
    pub fn target_only(t_target_base: f64) -> Self {
        Self {
            t_target_base,
            t_target_per_token: 0.0,
            t_draft_base: 0.0,
            t_draft_per_node: 0.0,
            t_policy: 0.0,
            t_tree_mgmt_per_node: 0.0,
            mode: TimingMode::Simulated,
        }
    }

    pub fn step_cost(&self, stats: &TreeStats, policy_invoked: bool) -> StepCost {
        StepCost {
            verification: self.t_target_base + self.t_target_per_token * stats.candidates as f64,
            drafting: self.t_draft_base * stats.layers as f64 + self.t_draft_per_node * stats.expanded as f64,
            tree_management: self.t_tree_mgmt_per_node * stats.nodes as f64,
            policy: if policy_invoked { self.t_policy } else { 0.0 },
        }
    }

    /// Simulated seconds for one step built under `action`.
    pub fn simulate_step_latency(&self, action: &Action, stats: &TreeStats, policy_invoked: bool) -> Result<f64> {
        if self.mode != TimingMode::Simulated {
            return Err(Error::Contract("latency simulation requires simulated mode".into()));
        }
        if stats.nodes > action.total_tokens as usize
            || stats.layers > action.depth as usize
            || stats.candidates > stats.nodes
            || stats.nodes > stats.layers * action.top_k as usize
        {
            return Err(Error::Contract(format!(
                "tree stats {stats:?} inconsistent with {action}"
            )));
        }
        Ok(self.step_cost(stats, policy_invoked).total())
    }

    /// Seconds for pure autoregressive decoding of `tokens` tokens.
    pub fn autoregressive_time(&self, tokens: usize) -> f64 {
        self.t_target_base * tokens as f64
    }
}

/// Profiled sub-events. The set is closed; parsing an unknown tag fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubEvent {
    DraftingProcess,
    TreeInitialization,
    TreeConstruction,
    TreeUpdate,
    InputUpdate,
    VerificationProcess,
    RlPolicyPrediction,
}

/// Consolidated profiling categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Drafting,
    TreeStructureManagement,
    Verification,
    RlPolicyPrediction,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Drafting,
        Category::TreeStructureManagement,
        Category::Verification,
        Category::RlPolicyPrediction,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Category::Drafting => "Drafting",
            Category::TreeStructureManagement => "Tree Structure Management",
            Category::Verification => "Verification",
            Category::RlPolicyPrediction => "RL Policy Prediction",
        }
    }
}

impl SubEvent {
    pub const ALL: [SubEvent; 7] = [
        SubEvent::DraftingProcess,
        SubEvent::TreeInitialization,
        SubEvent::TreeConstruction,
        SubEvent::TreeUpdate,
        SubEvent::InputUpdate,
        SubEvent::VerificationProcess,
        SubEvent::RlPolicyPrediction,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            SubEvent::DraftingProcess => "drafting_process",
            SubEvent::TreeInitialization => "tree_initialization",
            SubEvent::TreeConstruction => "tree_construction",
            SubEvent::TreeUpdate => "tree_update",
            SubEvent::InputUpdate => "input_update",
            SubEvent::VerificationProcess => "verification_process",
            SubEvent::RlPolicyPrediction => "rl_policy_prediction",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            SubEvent::DraftingProcess => Category::Drafting,
            SubEvent::TreeInitialization
            | SubEvent::TreeConstruction
            | SubEvent::TreeUpdate
            | SubEvent::InputUpdate => Category::TreeStructureManagement,
            SubEvent::VerificationProcess => Category::Verification,
            SubEvent::RlPolicyPrediction => Category::RlPolicyPrediction,
        }
    }
}

impl fmt::Display for SubEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SubEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubEvent::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::UnknownSubEvent(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero() -> CostModel {
        CostModel::target_only(0.0)
    }

    #[test]
    fn zero_costs_give_zero_time() {
        let a = Action::new(64, 6, 16);
        let stats = TreeStats {
            layers: 4,
            expanded: 40,
            nodes: 64,
            candidates: 64,
        };
        assert_eq!(zero().simulate_step_latency(&a, &stats, true).unwrap(), 0.0);
    }

    #[test]
    fn base_plus_policy() {
        let cost = CostModel {
            t_target_base: 0.02,
            t_policy: 0.0005,
            ..zero()
        };
        let a = Action::new(32, 3, 8);
        let t = cost.simulate_step_latency(&a, &TreeStats::default(), true).unwrap();
        assert!((t - 0.0205).abs() < 1e-15);
    }

    #[test]
    fn inconsistent_stats_rejected() {
        let a = Action::new(32, 3, 8);
        let stats = TreeStats {
            layers: 5,
            expanded: 1,
            nodes: 8,
            candidates: 8,
        };
        assert!(CostModel::default().simulate_step_latency(&a, &stats, false).is_err());
        let wall = CostModel {
            mode: TimingMode::Wallclock,
            ..CostModel::default()
        };
        assert!(wall.simulate_step_latency(&a, &TreeStats::default(), false).is_err());
    }

    #[test]
    fn sub_event_tags_round_trip_and_close() {
        for e in SubEvent::ALL {
            assert_eq!(e.tag().parse::<SubEvent>().unwrap(), e);
        }
        assert!(matches!(
            "model_inference".parse::<SubEvent>(),
            Err(Error::UnknownSubEvent(_))
        ));
        assert_eq!(SubEvent::InputUpdate.category(), Category::TreeStructureManagement);
    }
}
