//! Python bindings: configuration, the simulated models, draft trees,
//! policy training and evaluation. Structured results come back as plain
//! dicts and lists.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use spectune::action::{enumerate_actions as all_actions, Action};
use spectune::bench::{cache_sweep, paired_report, profile, static_scan, wilcoxon_signed_rank};
use spectune::config::{Config, Harness};
use spectune::engine::{evaluate, train, Controller, EvalOutput};
use spectune::policy::{PolicyNet, Selection};
use spectune::tree::build_tree;

create_exception!(spectune_py, SpectuneError, PyException);

fn err(e: spectune::Error) -> PyErr {
    match e {
        spectune::Error::Config(_) | spectune::Error::InfeasibleAction { .. } => PyValueError::new_err(e.to_string()),
        _ => SpectuneError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into Python objects through JSON.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SpectuneError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "Action", module = "spectune_py", frozen, eq, hash, ord, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct PyAction(Action);

#[pymethods]
impl PyAction {
    #[new]
    fn new(total_tokens: u32, depth: u32, top_k: u32) -> PyResult<Self> {
        let a = Action::new(total_tokens, depth, top_k);
        a.ensure_feasible().map_err(err)?;
        Ok(Self(a))
    }

    /// Parses `"TT,d,k"` or `"(TT,d,k)"`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let a: Action = text.parse().map_err(err)?;
        Self::new(a.total_tokens, a.depth, a.top_k)
    }

    #[getter]
    fn total_tokens(&self) -> u32 {
        self.0.total_tokens
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.0.depth
    }

    #[getter]
    fn top_k(&self) -> u32 {
        self.0.top_k
    }

    fn __repr__(&self) -> String {
        format!("Action{}", self.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

/// The feasible actions in index order.
#[pyfunction]
fn enumerate_actions() -> Vec<PyAction> {
    all_actions().into_iter().map(PyAction).collect()
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
#[pyfunction]
fn wilcoxon(py: Python<'_>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &wilcoxon_signed_rank(&x, &y).map_err(err)?)
}

#[pyclass(name = "Config", module = "spectune_py", from_py_object)]
#[derive(Clone)]
struct PyConfig(Config);

#[pymethods]
impl PyConfig {
    /// The shipped defaults.
    #[new]
    fn new() -> Self {
        Self(Config::default())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let cfg = Config::from_toml(text).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    /// Builds a config from a (possibly partial) nested dict.
    #[staticmethod]
    fn from_dict(py: Python<'_>, d: &Bound<'_, PyAny>) -> PyResult<Self> {
        let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid config: {e}")))?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0)
    }

    /// A copy with the policy and sampling seeds replaced.
    fn with_seed(&self, seed: u64) -> Self {
        Self(self.0.clone().with_seed(seed))
    }

    /// Hex SHA-256 of the canonical config.
    fn digest(&self) -> String {
        hex::encode(self.0.digest())
    }
}

#[pyclass(name = "Policy", module = "spectune_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy(PolicyNet);

#[pymethods]
impl PyPolicy {
    /// Action probabilities for a state vector.
    #[pyo3(signature = (state, temperature = 1.0))]
    fn probs(&self, state: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
        self.0.probs(&state, temperature).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>, harness: &PyHarness) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes(&harness.0.cfg.digest()))
    }

    /// Loads a checkpoint; the architecture must match the harness.
    #[staticmethod]
    fn from_bytes(data: &[u8], harness: &PyHarness) -> PyResult<Self> {
        let (net, _) = PolicyNet::from_bytes(data).map_err(err)?;
        if net.arch != harness.0.arch() {
            return Err(PyValueError::new_err(
                "checkpoint architecture does not match the config",
            ));
        }
        Ok(Self(net))
    }

    fn __eq__(&self, other: &PyPolicy) -> bool {
        self.0 == other.0
    }
}

/// A target model, its features and corpora, built from one config.
#[pyclass(name = "Harness", module = "spectune_py")]
struct PyHarness(Harness);

impl PyHarness {
    fn controller<'a>(&'a self, policy: Option<&'a PyPolicy>, action: Option<PyAction>) -> PyResult<Controller<'a>> {
        match (policy, action) {
            (Some(p), None) => Ok(self.0.policy_controller(&p.0, self.0.eval_selection())),
            (None, Some(a)) => Ok(Controller::Static(a.0)),
            _ => Err(PyValueError::new_err("pass exactly one of policy or action")),
        }
    }
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    mean_tokens_per_s: f64,
    mismatches: usize,
    unique_actions: usize,
    questions: &'a [spectune::engine::QuestionResult],
    profile: spectune::bench::ProfileBreakdown,
}

fn summarize(py: Python<'_>, out: &EvalOutput) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &EvalSummary {
            mean_tokens_per_s: out.mean_tokens_per_s(),
            mismatches: out.mismatches(),
            unique_actions: out.unique_actions(),
            questions: &out.questions,
            profile: profile(&out.records).map_err(err)?,
        },
    )
}

#[pymethods]
impl PyHarness {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.0).unwrap_or_default();
        cfg.validate().map_err(err)?;
        Ok(Self(Harness::new(cfg).map_err(err)?))
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig(self.0.cfg.clone())
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.target.vocab_size()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.0.features.state_dim()
    }

    fn target_next_dist(&self, context: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(self.0.target.target_next_dist(&context).map_err(err)?.0)
    }

    /// Draft distribution for a prompt of the given regime class.
    #[pyo3(signature = (context, class_ = 0))]
    fn draft_next_dist(&self, context: Vec<u32>, class_: u32) -> PyResult<Vec<f64>> {
        Ok(self
            .0
            .target
            .pair_for_class(class_)
            .draft_next_dist(&context)
            .map_err(err)?
            .0)
    }

    fn greedy_decode(&self, prompt: Vec<u32>, max_new: usize) -> PyResult<Vec<u32>> {
        self.0.target.greedy_decode(&prompt, max_new).map_err(err)
    }

    /// Policy state vector for a context.
    fn features(&self, context: Vec<u32>) -> PyResult<Vec<f64>> {
        self.0.features.extract(&context).map_err(err)
    }

    #[pyo3(signature = (action, context, class_ = 0))]
    fn build_tree(&self, py: Python<'_>, action: PyAction, context: Vec<u32>, class_: u32) -> PyResult<Py<PyAny>> {
        let pair = self.0.target.pair_for_class(class_);
        to_py(py, &build_tree(&pair, &context, &action.0).map_err(err)?)
    }

    /// An untrained policy seeded from the config.
    fn new_policy(&self) -> PyResult<PyPolicy> {
        Ok(PyPolicy(self.0.new_policy().map_err(err)?))
    }

    /// Trains a fresh policy on the training corpus; returns it with the report.
    fn train(&self, py: Python<'_>) -> PyResult<(PyPolicy, Py<PyAny>)> {
        let h = &self.0;
        let (net, report) = py
            .detach(|| {
                let mut net = h.new_policy()?;
                let out = train(&mut net, &h.train_corpus()?, h.train_setup())?;
                Ok::<_, spectune::Error>((net, out.report))
            })
            .map_err(err)?;
        Ok((PyPolicy(net), to_py(py, &report)?))
    }

    /// Runs the held-out suite under a policy or a static action.
    #[pyo3(signature = (policy = None, action = None, n = None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        policy: Option<PyRef<'_, PyPolicy>>,
        action: Option<PyAction>,
        n: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let ctl = self.controller(policy.as_deref(), action)?;
        let h = &self.0;
        let n = n.unwrap_or(h.cfg.run.eval_cache_interval);
        let out = py
            .detach(|| evaluate(&h.target, &h.cfg.cost, &h.eval_suite()?, &ctl, &h.cfg.run, n))
            .map_err(err)?;
        summarize(py, &out)
    }

    /// Paired comparison of a policy against a static action on the held-out suite.
    fn compare(&self, py: Python<'_>, policy: PyRef<'_, PyPolicy>, action: PyAction) -> PyResult<Py<PyAny>> {
        let h = &self.0;
        let ctl = h.policy_controller(&policy.0, h.eval_selection());
        let n = h.cfg.run.eval_cache_interval;
        let report = py
            .detach(|| {
                let suite = h.eval_suite()?;
                let a = evaluate(&h.target, &h.cfg.cost, &suite, &ctl, &h.cfg.run, n)?;
                let b = evaluate(
                    &h.target,
                    &h.cfg.cost,
                    &suite,
                    &Controller::Static(action.0),
                    &h.cfg.run,
                    n,
                )?;
                paired_report("held-out", &a, &b, action.0, &h.cfg.cost)
            })
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Every static action on the held-out suite, best first.
    fn static_scan(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let h = &self.0;
        let scan = py
            .detach(|| static_scan(h, &h.eval_suite()?, &h.cfg.run))
            .map_err(err)?;
        to_py(py, &scan)
    }

    /// Tokens/s and policy time for each cache interval.
    #[pyo3(signature = (policy, intervals = None))]
    fn sweep(&self, py: Python<'_>, policy: PyRef<'_, PyPolicy>, intervals: Option<Vec<usize>>) -> PyResult<Py<PyAny>> {
        let h = &self.0;
        let ns = intervals.unwrap_or_else(|| h.cfg.bench.sweep_intervals.clone());
        let ctl = h.policy_controller(&policy.0, h.eval_selection());
        let res = py.detach(|| cache_sweep(h, &h.eval_suite()?, &ctl, &ns)).map_err(err)?;
        let points: Vec<_> = res.into_iter().map(|(p, _)| p).collect();
        to_py(py, &points)
    }

    /// Greedy policy choice for a context.
    fn choose(&self, policy: PyRef<'_, PyPolicy>, context: Vec<u32>) -> PyResult<PyAction> {
        let ctl = self.0.policy_controller(&policy.0, Selection::Greedy);
        let mut rng = spectune::rng::stream(0, 0, 0);
        Ok(PyAction(ctl.decide(&context, &mut rng).map_err(err)?.action))
    }
}

#[pymodule]
fn spectune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SpectuneError", m.py().get_type::<SpectuneError>())?;
    m.add_class::<PyAction>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyHarness>()?;
    m.add_function(wrap_pyfunction!(enumerate_actions, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    Ok(())
}
