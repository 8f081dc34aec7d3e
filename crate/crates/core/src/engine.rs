//! Draft/verify generation loop with action caching, interval rewards,
//! on-policy training and evaluation.

use std::collections::BTreeSet;
use std::io;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{Action, ActionSpace};
use crate::cache::ActionCache;
use crate::corpus::Question;
use crate::cost::{CostModel, StepCost, TimingMode, MIN_ELAPSED};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, StateVector};
use crate::lm::{ModelPair, TargetModel};
use crate::policy::{policy_forward, PolicyNet, Selection};
use crate::ppo::{self, Adam, PpoConfig, Transition, UpdateReport};
use crate::rng::{self, domain};
use crate::tree::{build_tree, rerank};
use crate::verify::verify_greedy_tree;

/// How a frozen policy picks actions at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSelection {
    /// Sample at the configured inference temperature.
    #[default]
    Sample,
    /// Take the most likely action.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Per-turn cap on generated tokens.
    pub max_new_tokens: usize,
    pub train_cache_interval: usize,
    pub eval_cache_interval: usize,
    pub sampling_seed: u64,
    pub policy_seed: u64,
    pub eval_selection: EvalSelection,
    /// Drop unfinished rollout data at the end of every question.
    pub clear_buffer_each_question: bool,
    /// Compare every evaluated turn against pure greedy decoding.
    pub check_lossless: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 2048,
            train_cache_interval: 10,
            eval_cache_interval: 30,
            sampling_seed: 1,
            policy_seed: 3,
            eval_selection: EvalSelection::Sample,
            clear_buffer_each_question: false,
            check_lossless: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if self.train_cache_interval == 0 || self.eval_cache_interval == 0 {
            return Err(Error::Config("cache intervals must be >= 1".into()));
        }
        Ok(())
    }
}

/// One draft/verify step as written to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub question: u64,
    pub turn: usize,
    pub step: usize,
    pub tt: u32,
    pub depth: u32,
    pub top_k: u32,
    pub action_index: Option<usize>,
    /// Accepted draft tokens.
    pub accept_len: usize,
    /// Tokens appended to the output: accepted plus correction, cut at EOS
    /// or the length cap.
    pub tokens: usize,
    pub candidates: usize,
    pub nodes: usize,
    pub layers: usize,
    pub expanded: usize,
    pub elapsed: f64,
    pub policy_invoked: bool,
    /// Cache step after this step's lookup (1 when the policy was queried).
    pub cache_step: usize,
    pub drafting_process: f64,
    pub tree_construction: f64,
    pub verification_process: f64,
    pub rl_policy_prediction: f64,
}

impl StepRecord {
    pub fn action(&self) -> Action {
        Action::new(self.tt, self.depth, self.top_k)
    }

    pub fn cost(&self) -> StepCost {
        StepCost {
            drafting: self.drafting_process,
            tree_management: self.tree_construction,
            verification: self.verification_process,
            policy: self.rl_policy_prediction,
        }
    }
}

/// Column names of the run log, in order.
pub const STEP_LOG_COLUMNS: [&str; 20] = [
    "question",
    "turn",
    "step",
    "tt",
    "depth",
    "top_k",
    "action_index",
    "accept_len",
    "tokens",
    "candidates",
    "nodes",
    "layers",
    "expanded",
    "elapsed",
    "policy_invoked",
    "cache_step",
    "drafting_process",
    "tree_construction",
    "verification_process",
    "rl_policy_prediction",
];

fn log_err(e: csv::Error) -> Error {
    Error::Log(e.to_string())
}

pub fn write_step_log<W: io::Write>(w: W, records: &[StepRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if records.is_empty() {
        wr.write_record(STEP_LOG_COLUMNS).map_err(log_err)?;
    }
    for r in records {
        wr.serialize(r).map_err(log_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_step_log<R: io::Read>(r: R) -> Result<Vec<StepRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(log_err)
}

/// Mean per-step throughput (tokens / elapsed) over one cache interval.
pub fn interval_reward(records: &[StepRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("cache interval"));
    }
    let sum: f64 = records
        .iter()
        .map(|r| r.tokens as f64 / r.elapsed.max(MIN_ELAPSED))
        .sum();
    Ok(sum / records.len() as f64)
}

/// An action choice, with what PPO needs to learn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub index: Option<usize>,
    pub state: Option<StateVector>,
    pub log_prob: f64,
    pub value: f64,
}

/// Where actions come from.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Static(Action),
    Policy {
        net: &'a PolicyNet,
        features: &'a FeatureExtractor,
        space: &'a ActionSpace,
        selection: Selection,
    },
}

impl<'a> Controller<'a> {
    /// Chooses an action for `context`.
    pub fn decide(&self, context: &[u32], rng: &mut impl Rng) -> Result<Decision> {
        match *self {
            Controller::Static(action) => {
                action.ensure_feasible()?;
                Ok(Decision {
                    action,
                    index: None,
                    state: None,
                    log_prob: 0.0,
                    value: 0.0,
                })
            }
            Controller::Policy {
                net,
                features,
                space,
                selection,
            } => {
                if net.arch.n_actions != space.len() {
                    return Err(Error::DimensionMismatch {
                        expected: space.len(),
                        got: net.arch.n_actions,
                    });
                }
                let state = features.extract(context)?;
                let out = policy_forward(net, &state, selection, rng)?;
                let action = space.get(out.index).expect("index within action space");
                Ok(Decision {
                    action,
                    index: Some(out.index),
                    log_prob: out.log_prob,
                    value: 0.0,
                    state: Some(state),
                })
            }
        }
    }
}

/// One turn in progress: the context grows by each step's emitted tokens.
pub struct Turn<'a> {
    pair: ModelPair<'a>,
    cost: &'a CostModel,
    context: Vec<u32>,
    prompt_len: usize,
    max_new: usize,
    cache: ActionCache<Decision>,
    records: Vec<StepRecord>,
    ids: (u64, usize),
    finished: bool,
}

impl<'a> Turn<'a> {
    pub fn new(
        pair: ModelPair<'a>,
        cost: &'a CostModel,
        context: Vec<u32>,
        cache_interval: usize,
        max_new: usize,
        question: u64,
        turn: usize,
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if max_new == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        pair.target.check_tokens(&context)?;
        Ok(Self {
            pair,
            cost,
            prompt_len: context.len(),
            context,
            max_new,
            cache: ActionCache::new(cache_interval)?,
            records: Vec::new(),
            ids: (question, turn),
            finished: false,
        })
    }

    pub fn is_done(&self) -> bool {
        self.finished
    }

    /// The next step will query the action source.
    pub fn needs_decision(&self) -> bool {
        self.cache.needs_query()
    }

    pub fn context(&self) -> &[u32] {
        &self.context
    }

    pub fn output(&self) -> &[u32] {
        &self.context[self.prompt_len..]
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn into_parts(self) -> (Vec<u32>, Vec<StepRecord>) {
        let out = self.context[self.prompt_len..].to_vec();
        (out, self.records)
    }

    /// Runs one draft/verify step. `decide` is called only when the cache
    /// needs a fresh action.
    pub fn step(&mut self, decide: impl FnOnce(&[u32]) -> Result<Decision>) -> Result<&StepRecord> {
        if self.finished {
            return Err(Error::Contract("turn already finished".into()));
        }
        let wall = self.cost.mode == TimingMode::Wallclock;
        let t0 = Instant::now();
        let ctx = &self.context;
        let (decision, invoked) = self.cache.get(|| decide(ctx))?;
        let t_policy = t0.elapsed().as_secs_f64();
        let action = decision.action;

        let t1 = Instant::now();
        let tree = build_tree(&self.pair, &self.context, &action)?;
        let t_draft = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let candidates = rerank(&tree, action.total_tokens as usize);
        let t_tree = t2.elapsed().as_secs_f64();
        let t3 = Instant::now();
        let v = verify_greedy_tree(self.pair.target, &self.context, &tree, &candidates)?;
        let t_verify = t3.elapsed().as_secs_f64();

        let stats = tree.stats(candidates.len());
        let (cost, elapsed) = if wall {
            let c = StepCost {
                drafting: t_draft,
                tree_management: t_tree,
                verification: t_verify,
                policy: if invoked { t_policy } else { 0.0 },
            };
            (c, c.total().max(MIN_ELAPSED))
        } else {
            let c = self.cost.step_cost(&stats, invoked);
            let total = self.cost.simulate_step_latency(&action, &stats, invoked)?;
            (c, total.max(MIN_ELAPSED))
        };

        let eos = self.pair.target.config().eos_token;
        let room = self.max_new - self.output().len();
        let mut appended = 0;
        for t in v.accepted.iter().copied().chain([v.correction]) {
            if appended == room {
                break;
            }
            self.context.push(t);
            appended += 1;
            if Some(t) == eos {
                self.finished = true;
                break;
            }
        }
        if self.output().len() >= self.max_new {
            self.finished = true;
        }

        self.records.push(StepRecord {
            question: self.ids.0,
            turn: self.ids.1,
            step: self.records.len(),
            tt: action.total_tokens,
            depth: action.depth,
            top_k: action.top_k,
            action_index: decision.index,
            accept_len: v.accept_len,
            tokens: appended,
            candidates: stats.candidates,
            nodes: stats.nodes,
            layers: stats.layers,
            expanded: stats.expanded,
            elapsed,
            policy_invoked: invoked,
            cache_step: self.cache.cache_step(),
            drafting_process: cost.drafting,
            tree_construction: cost.tree_management,
            verification_process: cost.verification,
            rl_policy_prediction: cost.policy,
        });
        Ok(self.records.last().expect("just pushed"))
    }
}

/// Output of one generated turn.
#[derive(Debug, Clone)]
pub struct TurnOutput {
    pub tokens: Vec<u32>,
    pub records: Vec<StepRecord>,
}

/// Generates until EOS or `max_new` tokens, querying `controller` through
/// the action cache.
#[allow(clippy::too_many_arguments)]
pub fn generate_turn(
    pair: ModelPair<'_>,
    cost: &CostModel,
    context: &[u32],
    controller: &Controller<'_>,
    cache_interval: usize,
    max_new: usize,
    rng: &mut impl Rng,
    ids: (u64, usize),
) -> Result<TurnOutput> {
    let mut turn = Turn::new(pair, cost, context.to_vec(), cache_interval, max_new, ids.0, ids.1)?;
    while !turn.is_done() {
        turn.step(|ctx| controller.decide(ctx, rng))?;
    }
    let (tokens, records) = turn.into_parts();
    Ok(TurnOutput { tokens, records })
}

/// Digest of everything that fixes a question's token stream: model
/// configuration, prompts, and sampling seed.
pub fn seed_digest(target: &TargetModel, q: &Question, sampling_seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(target.config()).expect("model config serializes"));
    h.update(serde_json::to_vec(q).expect("question serializes"));
    h.update(sampling_seed.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: u64,
    pub class: u32,
    pub tokens: usize,
    pub seconds: f64,
    pub steps: usize,
    pub invocations: usize,
    pub tokens_per_s: f64,
    pub autoregressive_seconds: f64,
    pub speedup_vs_autoregressive: f64,
    pub lossless: bool,
    pub seed_digest: String,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub questions: Vec<QuestionResult>,
    pub records: Vec<StepRecord>,
}

impl EvalOutput {
    pub fn mean_tokens_per_s(&self) -> f64 {
        let n = self.questions.len() as f64;
        self.questions.iter().map(|q| q.tokens_per_s).sum::<f64>() / n
    }

    pub fn mismatches(&self) -> usize {
        self.questions.iter().filter(|q| !q.lossless).count()
    }

    pub fn unique_actions(&self) -> usize {
        self.records.iter().map(|r| r.action()).collect::<BTreeSet<_>>().len()
    }
}

/// Runs one question (all turns) with `controller`.
pub fn run_question(
    target: &TargetModel,
    cost: &CostModel,
    q: &Question,
    controller: &Controller<'_>,
    run: &RunConfig,
    cache_interval: usize,
) -> Result<(QuestionResult, Vec<StepRecord>)> {
    let pair = target.pair_for_class(q.class);
    let mut r = rng::stream(run.sampling_seed, domain::SAMPLING, q.id);
    let mut context: Vec<u32> = Vec::new();
    let mut records = Vec::new();
    let mut lossless = true;
    let mut tokens = 0;
    for (t, prompt) in q.turns.iter().enumerate() {
        context.extend_from_slice(prompt);
        let out = generate_turn(
            pair,
            cost,
            &context,
            controller,
            cache_interval,
            run.max_new_tokens,
            &mut r,
            (q.id, t),
        )?;
        if run.check_lossless && out.tokens != target.greedy_decode(&context, run.max_new_tokens)? {
            lossless = false;
        }
        tokens += out.tokens.len();
        context.extend_from_slice(&out.tokens);
        records.extend(out.records);
    }
    let seconds: f64 = records.iter().map(|r| r.elapsed).sum();
    let ar = cost.autoregressive_time(tokens);
    Ok((
        QuestionResult {
            id: q.id,
            class: q.class,
            tokens,
            seconds,
            steps: records.len(),
            invocations: records.iter().filter(|r| r.policy_invoked).count(),
            tokens_per_s: tokens as f64 / seconds,
            autoregressive_seconds: ar,
            speedup_vs_autoregressive: ar / seconds,
            lossless,
            seed_digest: seed_digest(target, q, run.sampling_seed),
        },
        records,
    ))
}

/// Evaluates every question of `suite` in parallel. Results are in suite
/// order and do not depend on scheduling.
pub fn evaluate(
    target: &TargetModel,
    cost: &CostModel,
    suite: &[Question],
    controller: &Controller<'_>,
    run: &RunConfig,
    cache_interval: usize,
) -> Result<EvalOutput> {
    if suite.is_empty() {
        return Err(Error::Empty("evaluation suite"));
    }
    run.validate()?;
    let per: Vec<(QuestionResult, Vec<StepRecord>)> = suite
        .par_iter()
        .map(|q| run_question(target, cost, q, controller, run, cache_interval))
        .collect::<Result<_>>()?;
    let mut questions = Vec::with_capacity(per.len());
    let mut records = Vec::new();
    for (q, r) in per {
        questions.push(q);
        records.extend(r);
    }
    Ok(EvalOutput { questions, records })
}

/// One completed cache interval seen during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLog {
    pub question: u64,
    pub turn: usize,
    /// Step index (within the turn) of the interval's first step.
    pub first_step: usize,
    pub steps: usize,
    pub action_index: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub questions: usize,
    pub steps: usize,
    pub transitions: usize,
    pub updates: Vec<UpdateReport>,
    /// Interval rewards in collection order.
    pub reward_curve: Vec<f64>,
    pub unique_actions: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: TrainReport,
    pub records: Vec<StepRecord>,
    pub intervals: Vec<IntervalLog>,
}

/// Everything training reads but does not modify.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub target: &'a TargetModel,
    pub cost: &'a CostModel,
    pub features: &'a FeatureExtractor,
    pub space: &'a ActionSpace,
    pub ppo: &'a PpoConfig,
    pub run: &'a RunConfig,
}

struct Pending {
    decision: Decision,
    first_step: usize,
}

struct Trainer<'a, 'n> {
    s: TrainSetup<'a>,
    net: &'n mut PolicyNet,
    opt: Adam,
    buffer: Vec<Transition>,
    report: TrainReport,
    intervals: Vec<IntervalLog>,
    actions: BTreeSet<usize>,
}

impl Trainer<'_, '_> {
    /// `end` is `Some(value after the episode)` for the last interval.
    fn close_interval(&mut self, pending: Pending, records: &[StepRecord], end: Option<f64>) -> Result<()> {
        let done = end.is_some();
        let slice = &records[pending.first_step..];
        let reward = interval_reward(slice)?;
        let d = pending.decision;
        let index = d.index.expect("policy decisions carry an index");
        let first = &slice[0];
        self.intervals.push(IntervalLog {
            question: first.question,
            turn: first.turn,
            first_step: pending.first_step,
            steps: slice.len(),
            action_index: index,
            reward,
            done,
        });
        self.report.reward_curve.push(reward);
        self.report.transitions += 1;
        self.buffer.push(Transition {
            state: d.state.expect("policy decisions carry a state"),
            action_index: index,
            log_prob: d.log_prob,
            value: d.value,
            reward,
            done,
            end_value: end.unwrap_or(0.0),
        });
        Ok(())
    }

    fn maybe_update(&mut self, next_state: Option<&[f64]>) -> Result<()> {
        if self.buffer.len() < self.s.ppo.n_steps {
            return Ok(());
        }
        let bootstrap = match next_state {
            Some(st) => self.net.value(st)?,
            None => 0.0,
        };
        let samples = ppo::prepare_batch(&self.buffer, bootstrap, self.s.ppo)?;
        let mut r = rng::stream(
            self.s.run.sampling_seed,
            domain::MINIBATCH,
            self.report.updates.len() as u64,
        );
        let rep = ppo::ppo_update(self.net, &mut self.opt, &samples, self.s.ppo, &mut r)?;
        self.report.updates.push(rep);
        self.buffer.clear();
        Ok(())
    }

    fn decide(&mut self, state: StateVector, rng: &mut impl Rng) -> Result<Decision> {
        let out = policy_forward(self.net, &state, Selection::Sample { temperature: 1.0 }, rng)?;
        let value = self.net.value(&state)?;
        self.actions.insert(out.index);
        Ok(Decision {
            action: self.s.space.get(out.index).expect("index within action space"),
            index: Some(out.index),
            state: Some(state),
            log_prob: out.log_prob,
            value,
        })
    }

    fn question(&mut self, q: &Question, all_records: &mut Vec<StepRecord>) -> Result<()> {
        let s = self.s;
        let pair = s.target.pair_for_class(q.class);
        let mut r = rng::stream(s.run.sampling_seed, domain::SAMPLING, q.id);
        let mut context: Vec<u32> = Vec::new();
        let n_turns = q.turns.len();
        for (t, prompt) in q.turns.iter().enumerate() {
            context.extend_from_slice(prompt);
            let mut turn = Turn::new(
                pair,
                s.cost,
                context.clone(),
                s.run.train_cache_interval,
                s.run.max_new_tokens,
                q.id,
                t,
            )?;
            let mut pending: Option<Pending> = None;
            while !turn.is_done() {
                if turn.needs_decision() {
                    let state = s.features.extract(turn.context())?;
                    if let Some(p) = pending.take() {
                        self.close_interval(p, turn.records(), None)?;
                        self.maybe_update(Some(&state))?;
                    }
                    let decision = self.decide(state, &mut r)?;
                    pending = Some(Pending {
                        decision: decision.clone(),
                        first_step: turn.records().len(),
                    });
                    turn.step(|_| Ok(decision))?;
                } else {
                    turn.step(|_| Err(Error::Contract("cache lookup expected a hit".into())))?;
                }
            }
            if let Some(p) = pending.take() {
                let last = t + 1 == n_turns;
                // a length cutoff is not a real end: credit the final state's value
                let ended = turn.output().last().copied() == s.target.config().eos_token
                    && s.target.config().eos_token.is_some();
                let end = match (last, ended) {
                    (false, _) => None,
                    (true, true) => Some(0.0),
                    (true, false) => Some(self.net.value(&s.features.extract(turn.context())?)?),
                };
                self.close_interval(p, turn.records(), end)?;
                if last {
                    self.maybe_update(None)?;
                }
            }
            let (out, records) = turn.into_parts();
            context.extend_from_slice(&out);
            self.report.steps += records.len();
            all_records.extend(records);
        }
        if s.run.clear_buffer_each_question {
            self.buffer.clear();
        }
        Ok(())
    }
}

/// Single pass over `corpus`, updating `net` in place with PPO every
/// `n_steps` transitions.
pub fn train(net: &mut PolicyNet, corpus: &[Question], setup: TrainSetup<'_>) -> Result<TrainOutput> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    setup.run.validate()?;
    setup.ppo.validate()?;
    if net.arch.state_dim != setup.features.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: setup.features.state_dim(),
            got: net.arch.state_dim,
        });
    }
    if net.arch.n_actions != setup.space.len() {
        return Err(Error::DimensionMismatch {
            expected: setup.space.len(),
            got: net.arch.n_actions,
        });
    }
    let opt = Adam::new(net, setup.ppo.learning_rate);
    let mut trainer = Trainer {
        s: setup,
        net,
        opt,
        buffer: Vec::new(),
        report: TrainReport {
            questions: corpus.len(),
            steps: 0,
            transitions: 0,
            updates: Vec::new(),
            reward_curve: Vec::new(),
            unique_actions: 0,
        },
        intervals: Vec::new(),
        actions: BTreeSet::new(),
    };
    let mut records = Vec::new();
    for q in corpus {
        trainer.question(q, &mut records)?;
    }
    trainer.report.unique_actions = trainer.actions.len();
    Ok(TrainOutput {
        report: trainer.report,
        records,
        intervals: trainer.intervals,
    })
}
