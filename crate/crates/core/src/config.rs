//! Top-level configuration file and the objects built from it.
//!
//! The file is TOML. Every section is optional; omitted keys take their
//! defaults. Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! seed = 7
//! vocab_size = 64
//! noise_kind = "perturbed"
//! regime_schedule = [{ class = 0, noise = 0.05 }, { class = 1, noise = 0.7 }]
//!
//! [ppo]
//! algorithm = "max_entropy"   # or "standard"; presets fill the rest
//!
//! [policy]
//! hidden = 64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSpace};
use crate::corpus::{generate_corpus, CorpusConfig, Question};
use crate::cost::CostModel;
use crate::engine::{Controller, EvalSelection, RunConfig, TrainSetup};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureSpec};
use crate::lm::{ModelConfig, NoiseKind, Regime, TargetModel};
use crate::policy::{config_digest, PolicyArch, PolicyNet, Selection};
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Static action used as the fixed-hyperparameter baseline.
    pub baseline_action: Action,
    /// Cache intervals visited by `sweep-cache`.
    pub sweep_intervals: Vec<usize>,
    /// Hidden widths visited by `ablate`.
    pub ablation_hidden: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            baseline_action: Action::new(64, 6, 16),
            sweep_intervals: vec![1, 5, 10, 20, 30, 50],
            ablation_hidden: vec![64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub features: FeatureSpec,
    pub cost: CostModel,
    pub ppo: PpoConfig,
    pub policy: PolicySection,
    pub run: RunConfig,
    pub train_corpus: CorpusConfig,
    pub eval_corpus: CorpusConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    /// Two regimes (easy eps 0.05, hard eps 0.7) over a 64-token vocabulary.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 64,
                noise_kind: NoiseKind::Perturbed,
                block_affinity: 0.5,
                regime_schedule: vec![Regime { class: 0, noise: 0.05 }, Regime { class: 1, noise: 0.7 }],
                ..ModelConfig::default()
            },
            features: FeatureSpec::default(),
            cost: CostModel::default(),
            ppo: PpoConfig::default(),
            policy: PolicySection::default(),
            run: RunConfig {
                max_new_tokens: 256,
                eval_selection: EvalSelection::Greedy,
                ..RunConfig::default()
            },
            train_corpus: CorpusConfig {
                n_questions: 10_000,
                ..CorpusConfig::default()
            },
            eval_corpus: CorpusConfig {
                seed: 99,
                n_questions: 64,
                id_offset: 1_000_000,
                ..CorpusConfig::default()
            },
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        self.ppo.validate()?;
        self.run.validate()?;
        self.train_corpus.validate(&self.model)?;
        self.eval_corpus.validate(&self.model)?;
        if self.policy.hidden == 0 {
            return Err(Error::Config("policy.hidden must be >= 1".into()));
        }
        if self.features.state_dim() == 0 {
            return Err(Error::Config("feature state dimension must be >= 1".into()));
        }
        self.bench
            .baseline_action
            .ensure_feasible()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.bench.sweep_intervals.contains(&0) {
            return Err(Error::Config("sweep intervals must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        config_digest(&serde_json::to_string(self).expect("config serializes"))
    }

    /// Overrides the policy-initialization and sampling seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.policy_seed = seed;
        self.run.sampling_seed = seed;
        self
    }
}

/// Models, features and action space instantiated from a [`Config`].
#[derive(Debug, Clone)]
pub struct Harness {
    pub cfg: Config,
    pub target: TargetModel,
    pub features: FeatureExtractor,
    pub space: ActionSpace,
}

impl Harness {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let target = TargetModel::new(cfg.model.clone())?;
        let features = FeatureExtractor::new(cfg.features.clone(), &target)?;
        Ok(Self {
            cfg,
            target,
            features,
            space: ActionSpace::new(),
        })
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            state_dim: self.features.state_dim(),
            hidden: self.cfg.policy.hidden,
            n_actions: self.space.len(),
        }
    }

    pub fn new_policy(&self) -> Result<PolicyNet> {
        PolicyNet::new(self.arch(), self.cfg.run.policy_seed)
    }

    pub fn train_corpus(&self) -> Result<Vec<Question>> {
        generate_corpus(&self.cfg.train_corpus, &self.cfg.model)
    }

    pub fn eval_suite(&self) -> Result<Vec<Question>> {
        generate_corpus(&self.cfg.eval_corpus, &self.cfg.model)
    }

    pub fn train_setup(&self) -> TrainSetup<'_> {
        TrainSetup {
            target: &self.target,
            cost: &self.cfg.cost,
            features: &self.features,
            space: &self.space,
            ppo: &self.cfg.ppo,
            run: &self.cfg.run,
        }
    }

    /// Evaluation-time selection rule from the run configuration.
    pub fn eval_selection(&self) -> Selection {
        match self.cfg.run.eval_selection {
            EvalSelection::Greedy => Selection::Greedy,
            EvalSelection::Sample => Selection::Sample {
                temperature: self.cfg.ppo.inference_temperature,
            },
        }
    }

    pub fn policy_controller<'a>(&'a self, net: &'a PolicyNet, selection: Selection) -> Controller<'a> {
        Controller::Policy {
            net,
            features: &self.features,
            space: &self.space,
            selection,
        }
    }
}
