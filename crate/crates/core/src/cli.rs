//! Command-line front end.
//!
//! Every subcommand reads an optional TOML config (`--config`), applies
//! `--seed` to the policy and sampling seeds, and writes its artifacts under
//! `--out` (or `$SPECTUNE_OUT_DIR`). Artifacts are byte-identical across
//! reruns; wall-clock timestamps go only to `meta.json`.
//!
//! Exit codes: 0 success, 1 failed invariant check, 2 usage or config error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::action::Action;
use crate::bench::{
    ablation_grid, ablation_text, cache_sweep, compare_ablations, paired_report, profile, profile_csv, static_scan,
    sweep_csv, BenchReport, ProfileBreakdown, StaticScore,
};
use crate::config::{Config, Harness};
use crate::engine::{evaluate, train, write_step_log, Controller, StepRecord};
use crate::error::{Error, Result};
use crate::policy::PolicyNet;
use crate::tree::{build_tree, rerank};

#[derive(Debug, Parser)]
#[command(
    name = "spectune",
    version,
    about = "Simulated speculative decoding with a learned tree controller"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the policy and sampling seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "SPECTUNE_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy on the training corpus.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a policy against a static baseline on the held-out suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Static baseline as TT,d,k.
        #[arg(long)]
        baseline_action: Option<Action>,
    },
    /// Scan all static actions and compare a policy with the baseline and the best static action.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; trains one when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        baseline_action: Option<Action>,
    },
    /// Evaluate a policy at several cache intervals.
    SweepCache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Comma-separated cache intervals.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Four-category time breakdown of a step log or a fresh evaluation.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Step log CSV to profile.
        #[arg(long, conflicts_with = "policy")]
        log: Option<PathBuf>,
        /// Checkpoint to evaluate and profile.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train and evaluate the algorithm x encoder x width grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated hidden widths.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
    },
    /// Build one draft tree and write it as DOT and JSON.
    InspectTree {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        action: Action,
        /// Question class selecting the draft regime.
        #[arg(long, default_value_t = 0)]
        class: u32,
        /// Comma-separated context tokens; the first held-out prompt when omitted.
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<u32>>,
    },
    /// Write the target table and one class's draft table as CSV.
    DumpModel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        class: u32,
    },
    /// Write a checkpoint's weights as CSV.
    ExportPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::SweepCache { common, .. }
            | Command::Profile { common, .. }
            | Command::Ablate { common, .. }
            | Command::InspectTree { common, .. }
            | Command::DumpModel { common, .. }
            | Command::ExportPolicy { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::SweepCache { .. } => "sweep-cache",
            Command::Profile { .. } => "profile",
            Command::Ablate { .. } => "ablate",
            Command::InspectTree { .. } => "inspect-tree",
            Command::DumpModel { .. } => "dump-model",
            Command::ExportPolicy { .. } => "export-policy",
        }
    }
}

/// What a subcommand reports back: a summary line and whether its checks held.
struct Outcome {
    summary: String,
    ok: bool,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, ok: true }
    }
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Ok(t) = std::env::var("SPECTUNE_THREADS") {
        match t.parse::<usize>() {
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Err(_) => {
                eprintln!("error: SPECTUNE_THREADS must be an integer, got `{t}`");
                return 2;
            }
        }
    }
    match dispatch(&cli.command) {
        Ok(o) => {
            println!("{}", o.summary);
            if o.ok {
                0
            } else {
                eprintln!("error: invariant check failed");
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::InfeasibleAction { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    config_digest: String,
    started_unix: f64,
    finished_unix: f64,
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write(dir, name, s)
}

fn write_log(dir: &Path, name: &str, records: &[StepRecord]) -> Result<()> {
    let f = fs::File::create(dir.join(name))?;
    write_step_log(io_buf(f), records)
}

fn io_buf(f: fs::File) -> std::io::BufWriter<fs::File> {
    std::io::BufWriter::new(f)
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let started = unix_now();
    let out = common.out.as_path();
    fs::create_dir_all(out)?;
    let digest = hex::encode(cfg.digest());
    let harness = Harness::new(cfg)?;
    let outcome = match cmd {
        Command::Train { .. } => cmd_train(&harness, out)?,
        Command::Eval {
            policy,
            baseline_action,
            ..
        } => cmd_eval(&harness, out, policy, *baseline_action)?,
        Command::Bench {
            policy,
            baseline_action,
            ..
        } => cmd_bench(&harness, out, policy.as_deref(), *baseline_action)?,
        Command::SweepCache { policy, n, .. } => cmd_sweep(&harness, out, policy, n.as_deref())?,
        Command::Profile { log, policy, .. } => cmd_profile(&harness, out, log.as_deref(), policy.as_deref())?,
        Command::Ablate { hidden, .. } => cmd_ablate(&harness, out, hidden.as_deref())?,
        Command::InspectTree {
            action, class, prompt, ..
        } => cmd_inspect_tree(&harness, out, *action, *class, prompt.as_deref())?,
        Command::DumpModel { class, .. } => cmd_dump_model(&harness, out, *class)?,
        Command::ExportPolicy { policy, .. } => {
            let net = load_policy(&harness, policy)?;
            write(out, "policy.csv", net.export_csv())?;
            Outcome::ok(format!(
                "exported {} actions x {} inputs",
                net.arch.n_actions, net.arch.state_dim
            ))
        }
    };
    write_json(
        out,
        "meta.json",
        &Meta {
            command: cmd.name(),
            version: env!("CARGO_PKG_VERSION"),
            config_digest: digest,
            started_unix: started,
            finished_unix: unix_now(),
        },
    )?;
    Ok(outcome)
}

fn load_policy(h: &Harness, path: &Path) -> Result<PolicyNet> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (net, digest) = PolicyNet::from_bytes(&bytes)?;
    if net.arch != h.arch() {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match config {:?}",
            net.arch,
            h.arch()
        )));
    }
    if digest != h.cfg.digest() {
        eprintln!("warning: checkpoint was trained under a different config");
    }
    Ok(net)
}

fn train_policy(h: &Harness, out: &Path) -> Result<(PolicyNet, String)> {
    let corpus = h.train_corpus()?;
    let mut net = h.new_policy()?;
    let res = train(&mut net, &corpus, h.train_setup())?;
    write(out, "policy.ckpt", net.to_bytes(&h.cfg.digest()))?;
    write_json(out, "train_report.json", &res.report)?;
    write_log(out, "train_steps.csv", &res.records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in &res.intervals {
        w.serialize(i).map_err(|e| Error::Log(e.to_string()))?;
    }
    write(
        out,
        "train_intervals.csv",
        w.into_inner().map_err(|e| Error::Log(e.to_string()))?,
    )?;
    let summary = format!(
        "trained on {} questions: {} steps, {} transitions, {} updates",
        res.report.questions,
        res.report.steps,
        res.report.transitions,
        res.report.updates.len()
    );
    Ok((net, summary))
}

fn cmd_train(h: &Harness, out: &Path) -> Result<Outcome> {
    let (_, summary) = train_policy(h, out)?;
    Ok(Outcome::ok(summary))
}

fn paired(
    h: &Harness,
    net: &PolicyNet,
    baseline: Action,
    suite_name: &str,
) -> Result<(BenchReport, Vec<StepRecord>, Vec<StepRecord>)> {
    baseline.ensure_feasible()?;
    let suite = h.eval_suite()?;
    let run = &h.cfg.run;
    let n = run.eval_cache_interval;
    let adaptive = evaluate(
        &h.target,
        &h.cfg.cost,
        &suite,
        &h.policy_controller(net, h.eval_selection()),
        run,
        n,
    )?;
    let base = evaluate(&h.target, &h.cfg.cost, &suite, &Controller::Static(baseline), run, n)?;
    let report = paired_report(suite_name, &adaptive, &base, baseline, &h.cfg.cost)?;
    Ok((report, adaptive.records, base.records))
}

fn cmd_eval(h: &Harness, out: &Path, policy: &Path, baseline: Option<Action>) -> Result<Outcome> {
    let net = load_policy(h, policy)?;
    let baseline = baseline.unwrap_or(h.cfg.bench.baseline_action);
    let (report, a, b) = paired(h, &net, baseline, "eval")?;
    write_json(out, "eval_report.json", &report)?;
    write(out, "eval_report.txt", report.to_text())?;
    write_log(out, "eval_steps.csv", &a)?;
    write_log(out, "baseline_steps.csv", &b)?;
    Ok(Outcome {
        summary: format!(
            "adaptive {:.2} tok/s vs static {} {:.2} tok/s: {:.4}x, wilcoxon p = {:.4e}",
            report.adaptive_tokens_per_s,
            baseline,
            report.baseline_tokens_per_s,
            report.speedup_vs_baseline,
            report.wilcoxon.p_value
        ),
        ok: report.passed(),
    })
}

#[derive(Serialize)]
struct BenchOutput {
    vs_baseline: BenchReport,
    vs_best_static: BenchReport,
    static_scan: Vec<StaticScore>,
}

fn cmd_bench(h: &Harness, out: &Path, policy: Option<&Path>, baseline: Option<Action>) -> Result<Outcome> {
    let net = match policy {
        Some(p) => load_policy(h, p)?,
        None => train_policy(h, out)?.0,
    };
    let baseline = baseline.unwrap_or(h.cfg.bench.baseline_action);
    let suite = h.eval_suite()?;
    let scan = static_scan(h, &suite, &h.cfg.run)?;
    let best = scan[0].action;
    let (vs_baseline, a, _) = paired(h, &net, baseline, "held-out")?;
    let (vs_best_static, _, _) = paired(h, &net, best, "held-out")?;
    write_log(out, "bench_steps.csv", &a)?;
    let text = format!(
        "against configured baseline\n{}\nagainst best static action\n{}",
        vs_baseline.to_text(),
        vs_best_static.to_text()
    );
    write(out, "bench.txt", text)?;
    let summary = format!(
        "adaptive {:.2} tok/s: {:.4}x vs baseline {}, {:.4}x vs best static {} (p = {:.4e})",
        vs_baseline.adaptive_tokens_per_s,
        vs_baseline.speedup_vs_baseline,
        baseline,
        vs_best_static.speedup_vs_baseline,
        best,
        vs_best_static.wilcoxon.p_value
    );
    let ok = vs_baseline.passed() && vs_best_static.passed();
    write_json(
        out,
        "bench.json",
        &BenchOutput {
            vs_baseline,
            vs_best_static,
            static_scan: scan,
        },
    )?;
    Ok(Outcome { summary, ok })
}

fn cmd_sweep(h: &Harness, out: &Path, policy: &Path, ns: Option<&[usize]>) -> Result<Outcome> {
    let net = load_policy(h, policy)?;
    let ns = ns.unwrap_or(&h.cfg.bench.sweep_intervals);
    let suite = h.eval_suite()?;
    let res = cache_sweep(h, &suite, &h.policy_controller(&net, h.eval_selection()), ns)?;
    let mut points = Vec::with_capacity(res.len());
    let mut ok = true;
    for (p, eval) in res {
        write_log(out, &format!("sweep_steps_n{}.csv", p.n), &eval.records)?;
        ok &= eval.mismatches() == 0;
        points.push(p);
    }
    write(out, "sweep.csv", sweep_csv(&points)?)?;
    write_json(out, "sweep.json", &points)?;
    let summary = points
        .iter()
        .map(|p| format!("N={}: {:.2} tok/s", p.n, p.tokens_per_s))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome { summary, ok })
}

fn cmd_profile(h: &Harness, out: &Path, log: Option<&Path>, policy: Option<&Path>) -> Result<Outcome> {
    let breakdown: ProfileBreakdown = match (log, policy) {
        (Some(path), _) => profile_csv(fs::File::open(path)?)?,
        (None, Some(p)) => {
            let net = load_policy(h, p)?;
            let suite = h.eval_suite()?;
            let eval = evaluate(
                &h.target,
                &h.cfg.cost,
                &suite,
                &h.policy_controller(&net, h.eval_selection()),
                &h.cfg.run,
                h.cfg.run.eval_cache_interval,
            )?;
            profile(&eval.records)?
        }
        (None, None) => return Err(Error::Config("profile needs --log or --policy".into())),
    };
    write(out, "profile.csv", breakdown.to_csv())?;
    write(out, "profile.txt", breakdown.to_text())?;
    write_json(out, "profile.json", &breakdown)?;
    let sum: f64 = breakdown.categories.iter().map(|c| c.percent).sum();
    let summary = breakdown
        .categories
        .iter()
        .map(|c| format!("{} {:.2}%", c.label, c.percent))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome {
        summary,
        ok: (sum - 100.0).abs() <= 0.1,
    })
}

fn cmd_ablate(h: &Harness, out: &Path, hidden: Option<&[usize]>) -> Result<Outcome> {
    let widths = hidden.unwrap_or(&h.cfg.bench.ablation_hidden);
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config("hidden widths must be non-empty and >= 1".into()));
    }
    let rows = compare_ablations(&h.cfg, &ablation_grid(widths))?;
    write_json(out, "ablation.json", &rows)?;
    write(out, "ablation.txt", ablation_text(&rows))?;
    Ok(Outcome::ok(format!("{} ablation cells", rows.len())))
}

#[derive(Serialize)]
struct TreeDump<'a> {
    action: Action,
    class: u32,
    context: &'a [u32],
    tree: &'a crate::tree::DraftTree,
    /// Node indices kept by reranking, best first.
    reranked: Vec<usize>,
}

fn cmd_inspect_tree(h: &Harness, out: &Path, action: Action, class: u32, prompt: Option<&[u32]>) -> Result<Outcome> {
    let context: Vec<u32> = match prompt {
        Some(p) => p.to_vec(),
        None => h
            .eval_suite()?
            .into_iter()
            .find(|q| q.class == class)
            .map(|q| q.turns[0].clone())
            .ok_or_else(|| Error::Config(format!("no held-out question of class {class}")))?,
    };
    h.target
        .check_tokens(&context)
        .map_err(|e| Error::Config(e.to_string()))?;
    let pair = h.target.pair_for_class(class);
    let tree = build_tree(&pair, &context, &action)?;
    let reranked = rerank(&tree, action.total_tokens as usize);
    write(out, "tree.dot", tree.to_dot())?;
    write_json(
        out,
        "tree.json",
        &TreeDump {
            action,
            class,
            context: &context,
            tree: &tree,
            reranked,
        },
    )?;
    Ok(Outcome::ok(format!(
        "tree for {action}: {} nodes, depth {}",
        tree.len(),
        tree.max_depth()
    )))
}

fn cmd_dump_model(h: &Harness, out: &Path, class: u32) -> Result<Outcome> {
    let m = h.target.order();
    let v = h.target.vocab_size();
    let header = || {
        let mut s: Vec<String> = (0..m).map(|i| format!("ctx{i}")).collect();
        s.extend((0..v).map(|t| format!("p{t}")));
        s.join(",") + "\n"
    };
    let fmt_row = |window: &[u32], row: &[f64]| {
        let mut s: Vec<String> = window.iter().map(u32::to_string).collect();
        s.extend(row.iter().map(f64::to_string));
        s.join(",") + "\n"
    };
    let pair = h.target.pair_for_class(class);
    let mut target = header();
    let mut draft = header();
    for (window, row) in h.target.table_rows() {
        target += &fmt_row(&window, row);
        draft += &fmt_row(&window, pair.draft_next_dist(&window)?.probs());
    }
    write(out, "target.csv", target)?;
    write(out, &format!("draft_class{class}.csv"), draft)?;
    Ok(Outcome::ok(format!("dumped {} rows over {v} tokens", h.target.rows())))
}
