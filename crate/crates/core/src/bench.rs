//! Paired comparisons, cache sweeps, profiling and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::action::{enumerate_actions, Action};
use crate::config::{Config, Harness};
use crate::corpus::Question;
use crate::cost::{Category, CostModel, SubEvent};
use crate::engine::{evaluate, train, Controller, EvalOutput, RunConfig, StepRecord, STEP_LOG_COLUMNS};
use crate::error::{Error, Result};
use crate::features::EncoderKind;
use crate::policy::{entropy, PolicyNet};
use crate::ppo::{Algorithm, PpoConfig};
use crate::verify::{accept_stats_counts, AcceptStats};

/// Largest sample size handled by full sign enumeration.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Enumeration of all `2^n` sign assignments.
    Exact,
    /// Normal approximation with continuity and tie corrections.
    Normal,
    /// Every difference was zero; `p = 1` by convention.
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences kept.
    pub n: usize,
    pub zeros_dropped: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Paired two-sided Wilcoxon signed-rank test on `x - y`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    wilcoxon_differences(&d)
}

/// Doubled midranks of `|d|` (integers, so ties stay exact).
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean; doubled that is i+j+2.
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// [`wilcoxon_signed_rank`] on precomputed differences.
pub fn wilcoxon_differences(d: &[f64]) -> Result<WilcoxonResult> {
    if d.is_empty() {
        return Err(Error::Empty("paired samples"));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let zeros_dropped = d.len() - nz.len();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            zeros_dropped,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::AllZero,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w2: u64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_plus = w2 as f64 / 2.0;
    let w_minus = (total - w2) as f64 / 2.0;

    let (p, method) = if n <= EXACT_MAX_N {
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let s: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            le += (s <= w2) as u64;
            ge += (s >= w2) as u64;
        }
        let all = (1u64 << n) as f64;
        ((2.0 * le.min(ge) as f64 / all).min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties: BTreeMap<u64, usize> = BTreeMap::new();
        for &r in &ranks {
            *ties.entry(r).or_default() += 1;
        }
        let tie: f64 = ties
            .values()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        let p = (2.0 * normal.sf(z)).clamp(f64::MIN_POSITIVE, 1.0);
        (p, WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        zeros_dropped,
        w_plus,
        w_minus,
        p_value: p,
        method,
    })
}

/// Acceptance summary of one evaluation run.
pub fn eval_accept_stats(out: &EvalOutput) -> Result<AcceptStats> {
    let counts: Vec<(usize, usize)> = out.records.iter().map(|r| (r.accept_len, r.candidates)).collect();
    let elapsed: Vec<f64> = out.records.iter().map(|r| r.elapsed).collect();
    accept_stats_counts(&counts, &elapsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpeed {
    pub class: u32,
    pub questions: usize,
    pub adaptive_tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: String,
    pub questions: usize,
    pub baseline_action: Action,
    pub adaptive_tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
    pub autoregressive_tokens_per_s: f64,
    pub speedup_vs_baseline: f64,
    pub speedup_vs_autoregressive: f64,
    pub baseline_speedup_vs_autoregressive: f64,
    pub per_class: Vec<ClassSpeed>,
    pub wilcoxon: WilcoxonResult,
    pub adaptive_accept: AcceptStats,
    pub baseline_accept: AcceptStats,
    pub unique_actions: usize,
    pub checks: Vec<Check>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite {} ({} questions)", self.suite, self.questions);
        let rows = vec![
            vec![
                "adaptive".to_string(),
                format!("{:.2}", self.adaptive_tokens_per_s),
                format!("{:.4}", self.speedup_vs_baseline),
                format!("{:.3}", self.speedup_vs_autoregressive),
                self.adaptive_accept.rate_display(),
                self.adaptive_accept.length_display(),
            ],
            vec![
                format!("static {}", self.baseline_action),
                format!("{:.2}", self.baseline_tokens_per_s),
                "1.0000".to_string(),
                format!("{:.3}", self.baseline_speedup_vs_autoregressive),
                self.baseline_accept.rate_display(),
                self.baseline_accept.length_display(),
            ],
            vec![
                "autoregressive".to_string(),
                format!("{:.2}", self.autoregressive_tokens_per_s),
                format!("{:.4}", self.autoregressive_tokens_per_s / self.baseline_tokens_per_s),
                "1.000".to_string(),
                "-".to_string(),
                "-".to_string(),
            ],
        ];
        s.push_str(&render_table(
            &["method", "tokens/s", "vs static", "vs AR", "accept rate", "accept len"],
            &rows,
        ));
        let _ = writeln!(
            s,
            "wilcoxon p = {:.4e} ({:?}, n = {}), unique actions = {}",
            self.wilcoxon.p_value, self.wilcoxon.method, self.wilcoxon.n, self.unique_actions
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "check {}: {} {}",
                c.name,
                if c.passed { "ok" } else { "FAILED" },
                c.detail
            );
        }
        s
    }
}

/// Compares an adaptive run against a static baseline run on the same suite.
pub fn paired_report(
    suite: &str,
    adaptive: &EvalOutput,
    baseline: &EvalOutput,
    baseline_action: Action,
    cost: &CostModel,
) -> Result<BenchReport> {
    let n = adaptive.questions.len();
    if n == 0 {
        return Err(Error::Empty("evaluation suite"));
    }
    if baseline.questions.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: baseline.questions.len(),
        });
    }
    let a: Vec<f64> = adaptive.questions.iter().map(|q| q.tokens_per_s).collect();
    let b: Vec<f64> = baseline.questions.iter().map(|q| q.tokens_per_s).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let adaptive_tps = mean(&a);
    let baseline_tps = mean(&b);
    let ar_tps = 1.0 / cost.t_target_base;

    let mut classes: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for (qa, qb) in adaptive.questions.iter().zip(&baseline.questions) {
        let e = classes.entry(qa.class).or_default();
        e.0 += 1;
        e.1 += qa.tokens_per_s;
        e.2 += qb.tokens_per_s;
    }
    let per_class = classes
        .into_iter()
        .map(|(class, (k, sa, sb))| ClassSpeed {
            class,
            questions: k,
            adaptive_tokens_per_s: sa / k as f64,
            baseline_tokens_per_s: sb / k as f64,
        })
        .collect();

    let wilcoxon = wilcoxon_signed_rank(&a, &b)?;
    let paired = adaptive
        .questions
        .iter()
        .zip(&baseline.questions)
        .all(|(x, y)| x.id == y.id && x.seed_digest == y.seed_digest);
    let mismatches = adaptive.mismatches() + baseline.mismatches();
    let speedup_vs_baseline = adaptive_tps / baseline_tps;
    let speedup_vs_ar = adaptive_tps / ar_tps;
    let baseline_vs_ar = baseline_tps / ar_tps;
    let ratios_ok = [speedup_vs_baseline, speedup_vs_ar, baseline_vs_ar]
        .iter()
        .all(|r| r.is_finite() && *r > 0.0);
    let checks = vec![
        Check::new("paired_seeds", paired, "question ids and seed digests match"),
        Check::new(
            "lossless",
            mismatches == 0,
            format!("{mismatches} mismatching questions"),
        ),
        Check::new("ratios_positive", ratios_ok, ""),
        Check::new(
            "p_value_range",
            wilcoxon.p_value > 0.0 && wilcoxon.p_value <= 1.0,
            format!("p = {}", wilcoxon.p_value),
        ),
    ];
    Ok(BenchReport {
        suite: suite.to_string(),
        questions: n,
        baseline_action,
        adaptive_tokens_per_s: adaptive_tps,
        baseline_tokens_per_s: baseline_tps,
        autoregressive_tokens_per_s: ar_tps,
        speedup_vs_baseline,
        speedup_vs_autoregressive: speedup_vs_ar,
        baseline_speedup_vs_autoregressive: baseline_vs_ar,
        per_class,
        wilcoxon,
        adaptive_accept: eval_accept_stats(adaptive)?,
        baseline_accept: eval_accept_stats(baseline)?,
        unique_actions: adaptive.unique_actions(),
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    /// Total simulated latency over the suite.
    pub latency_s: f64,
    /// Total tokens over total latency.
    pub tokens_per_s: f64,
    pub steps: usize,
    pub invocations: usize,
    /// Cumulative policy-prediction time.
    pub policy_time_s: f64,
}

impl SweepPoint {
    pub fn from_eval(n: usize, out: &EvalOutput) -> Self {
        let latency: f64 = out.questions.iter().map(|q| q.seconds).sum();
        let tokens: usize = out.questions.iter().map(|q| q.tokens).sum();
        Self {
            n,
            latency_s: latency,
            tokens_per_s: tokens as f64 / latency,
            steps: out.records.len(),
            invocations: out.records.iter().filter(|r| r.policy_invoked).count(),
            policy_time_s: out.records.iter().map(|r| r.rl_policy_prediction).sum(),
        }
    }
}

/// Evaluates `controller` once per cache interval in `ns`, with identical seeds.
pub fn cache_sweep(
    harness: &Harness,
    suite: &[Question],
    controller: &Controller<'_>,
    ns: &[usize],
) -> Result<Vec<(SweepPoint, EvalOutput)>> {
    if ns.is_empty() {
        return Err(Error::Empty("cache intervals"));
    }
    if let Some(&bad) = ns.iter().find(|&&n| n == 0) {
        return Err(Error::Config(format!("cache interval must be >= 1, got {bad}")));
    }
    ns.iter()
        .map(|&n| {
            let out = evaluate(
                &harness.target,
                &harness.cfg.cost,
                suite,
                controller,
                &harness.cfg.run,
                n,
            )?;
            Ok((SweepPoint::from_eval(n, &out), out))
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "n",
        "latency_s",
        "tokens_per_s",
        "steps",
        "invocations",
        "policy_time_s",
    ])
    .map_err(|e| Error::Log(e.to_string()))?;
    for p in points {
        w.write_record([
            p.n.to_string(),
            p.latency_s.to_string(),
            p.tokens_per_s.to_string(),
            p.steps.to_string(),
            p.invocations.to_string(),
            p.policy_time_s.to_string(),
        ])
        .map_err(|e| Error::Log(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Log(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: Category,
    pub label: String,
    pub seconds: f64,
    pub percent: f64,
}

/// Four-category consolidated time breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBreakdown {
    pub total_s: f64,
    pub categories: Vec<CategoryShare>,
}

impl ProfileBreakdown {
    pub fn percent(&self, c: Category) -> f64 {
        self.categories
            .iter()
            .find(|s| s.category == c)
            .map_or(0.0, |s| s.percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,seconds,percent\n");
        for c in &self.categories {
            let _ = writeln!(s, "{},{},{}", c.label, c.seconds, c.percent);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .categories
            .iter()
            .map(|c| {
                vec![
                    c.label.clone(),
                    format!("{:.6}", c.seconds),
                    format!("{:.2}%", c.percent),
                ]
            })
            .collect();
        render_table(&["category", "seconds", "share"], &rows)
    }
}

/// Aggregates sub-event times into the four categories.
pub fn profile_events(events: impl IntoIterator<Item = (SubEvent, f64)>) -> Result<ProfileBreakdown> {
    let mut sums = [0.0f64; 4];
    for (e, t) in events {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::NonFinite(format!("{e} time {t}")));
        }
        let i = Category::ALL
            .iter()
            .position(|&c| c == e.category())
            .expect("closed set");
        sums[i] += t;
    }
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return Err(Error::Empty("profiled time"));
    }
    Ok(ProfileBreakdown {
        total_s: total,
        categories: Category::ALL
            .iter()
            .zip(sums)
            .map(|(&c, s)| CategoryShare {
                category: c,
                label: c.label().to_string(),
                seconds: s,
                percent: 100.0 * s / total,
            })
            .collect(),
    })
}

pub fn profile(records: &[StepRecord]) -> Result<ProfileBreakdown> {
    profile_events(records.iter().flat_map(|r| r.cost().events()))
}

/// Profiles a CSV log. Columns of the step-log schema that are not timings are
/// skipped; every other column must be a sub-event tag.
pub fn profile_csv<R: io::Read>(r: R) -> Result<ProfileBreakdown> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(|e| Error::Log(e.to_string()))?.clone();
    let mut cols: Vec<(usize, SubEvent)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h.parse::<SubEvent>() {
            Ok(e) => cols.push((i, e)),
            Err(err) if !STEP_LOG_COLUMNS.contains(&h) => return Err(err),
            Err(_) => {}
        }
    }
    let mut events = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Log(e.to_string()))?;
        for &(i, e) in &cols {
            let t: f64 = row
                .get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Log(format!("bad {e} value on line {:?}", row.position().map(|p| p.line()))))?;
            events.push((e, t));
        }
    }
    profile_events(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticScore {
    pub action: Action,
    pub tokens_per_s: f64,
}

/// Mean tokens/s of every feasible static action, best first (ties by action order).
pub fn static_scan(harness: &Harness, suite: &[Question], run: &RunConfig) -> Result<Vec<StaticScore>> {
    let mut scores = enumerate_actions()
        .into_iter()
        .map(|a| {
            let out = evaluate(
                &harness.target,
                &harness.cfg.cost,
                suite,
                &Controller::Static(a),
                run,
                1,
            )?;
            Ok(StaticScore {
                action: a,
                tokens_per_s: out.mean_tokens_per_s(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| b.tokens_per_s.total_cmp(&a.tokens_per_s).then(a.action.cmp(&b.action)));
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub algorithm: Algorithm,
    pub encoder: EncoderKind,
    pub hidden: usize,
}

/// The 2 x 2 x 2 grid over algorithm, encoder and the given widths.
pub fn ablation_grid(hidden: &[usize]) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for algorithm in [Algorithm::Standard, Algorithm::MaxEntropy] {
        for encoder in [EncoderKind::FeatureVector, EncoderKind::ContextEmbedding] {
            for &h in hidden {
                cells.push(AblationCell {
                    algorithm,
                    encoder,
                    hidden: h,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub tokens_per_s: f64,
    pub baseline_tokens_per_s: f64,
    pub speedup_vs_baseline: f64,
    pub unique_actions: usize,
    /// Mean entropy of the evaluation-time action distribution at each prompt.
    pub mean_entropy: f64,
}

/// Applies a cell to `base`: algorithm preset fields, encoder and width.
pub fn ablation_config(base: &Config, cell: AblationCell) -> Config {
    let mut cfg = base.clone();
    let preset = PpoConfig::for_algorithm(cell.algorithm);
    cfg.ppo.algorithm = cell.algorithm;
    cfg.ppo.gamma = preset.gamma;
    cfg.ppo.gae_lambda = preset.gae_lambda;
    cfg.ppo.ent_coef = preset.ent_coef;
    cfg.ppo.inference_temperature = preset.inference_temperature;
    cfg.features.encoder = cell.encoder;
    cfg.policy.hidden = cell.hidden;
    cfg
}

/// Trains and evaluates one policy per cell with shared seeds.
pub fn compare_ablations(base: &Config, cells: &[AblationCell]) -> Result<Vec<AblationRow>> {
    let base_h = Harness::new(base.clone())?;
    let suite = base_h.eval_suite()?;
    let action = base.bench.baseline_action;
    let baseline = evaluate(
        &base_h.target,
        &base.cost,
        &suite,
        &Controller::Static(action),
        &base.run,
        base.run.eval_cache_interval,
    )?;
    let baseline_tps = baseline.mean_tokens_per_s();
    let corpus = base_h.train_corpus()?;
    cells
        .iter()
        .map(|&cell| {
            let h = Harness::new(ablation_config(base, cell))?;
            let mut net = h.new_policy()?;
            train(&mut net, &corpus, h.train_setup())?;
            let selection = h.eval_selection();
            let out = evaluate(
                &h.target,
                &h.cfg.cost,
                &suite,
                &h.policy_controller(&net, selection),
                &h.cfg.run,
                h.cfg.run.eval_cache_interval,
            )?;
            let tps = out.mean_tokens_per_s();
            Ok(AblationRow {
                cell,
                tokens_per_s: tps,
                baseline_tokens_per_s: baseline_tps,
                speedup_vs_baseline: tps / baseline_tps,
                unique_actions: out.unique_actions(),
                mean_entropy: prompt_entropy(&h, &net, &suite)?,
            })
        })
        .collect()
}

/// Mean entropy of the inference distribution at each question's first prompt.
pub fn prompt_entropy(h: &Harness, net: &PolicyNet, suite: &[Question]) -> Result<f64> {
    if suite.is_empty() {
        return Err(Error::Empty("evaluation suite"));
    }
    let mut sum = 0.0;
    for q in suite {
        let state = h.features.extract(&q.turns[0])?;
        sum += entropy(&net.probs(&state, h.cfg.ppo.inference_temperature)?);
    }
    Ok(sum / suite.len() as f64)
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.cell.algorithm),
                format!("{:?}", r.cell.encoder),
                r.cell.hidden.to_string(),
                format!("{:.4}", r.speedup_vs_baseline),
                r.unique_actions.to_string(),
                format!("{:.3}", r.mean_entropy),
            ]
        })
        .collect();
    render_table(
        &[
            "algorithm",
            "encoder",
            "hidden",
            "speedup vs static",
            "unique actions",
            "entropy",
        ],
        &body,
    )
}

/// Left-aligned text table with a header rule.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(
        widths
            .iter()
            .map(|&w| &"--------------------------------"[..w.min(32)])
            .collect(),
    );
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}
