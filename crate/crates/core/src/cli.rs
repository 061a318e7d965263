//! Experiment runner: configuration, sweeps, CSV and summary output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ConfigError, Error, Result};
use crate::metrics::{
    cpu_windows, sample_quantile, write_csv, MetricRow, StepCollector, CPU_QUANTILES,
    LATENCY_QUANTILES, RIF_QUANTILES,
};
use crate::probe_pool::PrequalConfig;
use crate::rng::run_seed;
use crate::selection::{LinearParams, PolicyKind};
use crate::signals::SignalsConfig;
use crate::sim::{simulate, SimConfig, SimSetup};
use crate::types::ReplicaId;
use crate::workload::{build_schedule, Experiment, Step, WorkloadConfig};

/// Approximate median latency at one request in flight on the calibrated
/// testbed, used to put RIF in latency units.
pub const TESTBED_ALPHA_US: f64 = 4_000.0;

/// Recursively overlays `patch` on `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Client-side selection constants shared by the pool-based rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Weight on RIF for the linear rule when a step does not set one.
    pub linear_lambda: f64,
    /// Latency value of one unit of RIF in the linear rule.
    pub linear_alpha_us: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let p = LinearParams::default();
        SelectionConfig {
            linear_lambda: p.lambda,
            linear_alpha_us: p.alpha_us,
        }
    }
}

/// Everything needed to reproduce an experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Independent repetitions with seeds derived from `seed`.
    pub replicates: usize,
    /// Only steps for these policies run. Empty runs everything.
    pub policies: Vec<PolicyKind>,
    pub out: Option<PathBuf>,
    pub prequal: PrequalConfig,
    pub workload: WorkloadConfig,
    pub sim: SimConfig,
    pub signals: SignalsConfig,
    pub selection: SelectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: Experiment::LoadRamp,
            seed: 1,
            replicates: 1,
            policies: Vec::new(),
            out: None,
            prequal: PrequalConfig::default(),
            workload: WorkloadConfig::default(),
            sim: SimConfig::default(),
            signals: SignalsConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for `experiment`, including the antagonist environment its
    /// testbed runs under.
    pub fn preset(experiment: Experiment) -> Self {
        let mut cfg = RunConfig {
            experiment,
            ..RunConfig::default()
        };
        let ant = &mut cfg.sim.antagonist;
        match experiment {
            Experiment::SelectionRules => {
                // Some machines stay oversubscribed; hobbling halves the replica.
                cfg.sim.hobble_penalty = 0.5;
                ant.base_min = 0.5;
                ant.base_max = 0.95;
                ant.persistence = 0.5;
            }
            Experiment::LoadRamp
            | Experiment::ProbeRate
            | Experiment::RifQuantile
            | Experiment::LinearSweep => {
                // Long saturation episodes that cap replicas at their allocation.
                ant.base_min = 0.5;
                ant.base_max = 0.9;
                ant.burst_prob = 0.5;
                ant.persistence = 0.995;
            }
        }
        cfg.selection.linear_alpha_us = TESTBED_ALPHA_US;
        cfg
    }

    /// Parses a JSON document over the preset of its experiment, naming the
    /// offending key on failure.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Self::from_json_as(text, None)
    }

    /// Like [`RunConfig::from_json`], with `experiment` replacing the
    /// document's own choice.
    pub fn from_json_as(text: &str, experiment: Option<Experiment>) -> Result<Self, ConfigError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::invalid("<root>", e.to_string()))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| ConfigError::invalid("<root>", "expected a JSON object"))?;
        if let Some(e) = experiment {
            obj.insert("experiment".into(), Value::String(e.name().into()));
        }
        let experiment = match obj.get("experiment") {
            Some(v) => Experiment::deserialize(v)
                .map_err(|e| ConfigError::invalid("experiment", e.to_string()))?,
            None => RunConfig::default().experiment,
        };
        let mut merged = serde_json::to_value(Self::preset(experiment)).expect("config serializes");
        merge(&mut merged, doc);
        serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { String::from("<root>") } else { path };
            ConfigError::invalid(key, e.into_inner().to_string())
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_file_as(path, None)
    }

    pub fn from_file_as(path: &Path, experiment: Option<Experiment>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_json_as(&text, experiment)?)
    }

    /// Applies the experiment's fixed settings and checks every section.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        if self.experiment.slow_even_replicas() {
            self.workload.slow_even_replicas = true;
        }
        self.prequal.n_replicas = self.workload.n_servers;
        if self.replicates == 0 {
            return Err(ConfigError::invalid("replicates", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.selection.linear_lambda) {
            return Err(ConfigError::invalid(
                "selection.linear_lambda",
                format!("must lie in [0, 1], got {}", self.selection.linear_lambda),
            ));
        }
        if !(self.selection.linear_alpha_us > 0.0) {
            return Err(ConfigError::invalid("selection.linear_alpha_us", "must be > 0"));
        }
        self.prequal.validate()?;
        self.workload.validate()?;
        self.sim.validate()?;
        if self.schedule().is_empty() {
            return Err(ConfigError::invalid(
                "policies",
                format!("no step of `{}` uses the selected policies", self.experiment),
            ));
        }
        Ok(self)
    }

    /// The experiment's steps after the policy filter.
    pub fn schedule(&self) -> Vec<Step> {
        build_schedule(self.experiment, &self.workload)
            .into_iter()
            .filter(|s| self.policies.is_empty() || self.policies.contains(&s.policy))
            .collect()
    }

    fn linear(&self) -> LinearParams {
        LinearParams {
            lambda: self.selection.linear_lambda,
            alpha_us: self.selection.linear_alpha_us,
        }
    }
}

/// Headline numbers for one step, all derivable from the CSV rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub run_id: usize,
    pub step: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub load: f64,
    pub r_probe: Option<f64>,
    pub q_rif: Option<f64>,
    pub lambda: Option<f64>,
    /// Milliseconds.
    pub latency_p50: f64,
    pub latency_p90: f64,
    pub latency_p99: f64,
    pub latency_p999: f64,
    pub rif_p50: f64,
    pub rif_p90: f64,
    pub rif_p99: f64,
    pub arrivals: u64,
    pub errors: u64,
    pub error_rate: f64,
    pub errors_per_s: f64,
    pub cpu_mean: f64,
    /// Mean utilization of the even (slow) and odd (fast) replicas.
    pub cpu_mean_even: f64,
    pub cpu_mean_odd: f64,
    pub probes_per_query: f64,
    pub theta_mean: Option<f64>,
    /// `(window_quantile, value)` pairs such as `("1s_p90", 1.4)`.
    pub cpu_windows: Vec<(String, f64)>,
}

impl StepSummary {
    /// Utilization quantile for a key such as `"1s_p75"`.
    pub fn cpu_window(&self, key: &str) -> Option<f64> {
        self.cpu_windows.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Interquartile range of 1 s utilization across replicas and seconds.
    pub fn cpu_1s_iqr(&self) -> f64 {
        match (self.cpu_window("1s_p25"), self.cpu_window("1s_p75")) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub steps: Vec<StepSummary>,
    pub rows: Vec<MetricRow>,
}

impl ExperimentResult {
    /// Summaries for `policy`, in step order.
    pub fn for_policy(&self, policy: PolicyKind) -> impl Iterator<Item = &StepSummary> {
        self.steps.iter().filter(move |s| s.policy == policy)
    }

    pub fn csv(&self) -> String {
        let mut buf = Vec::new();
        write_csv(&mut buf, &self.rows).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    /// Plain-text table with one line per step.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>3} {:>4} {:<12} {:>5} {:>7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}",
            "run", "step", "policy", "load", "param", "p50_ms", "p90_ms", "p99_ms", "rif_p99",
            "err_pct", "cpu_iqr"
        );
        for st in &self.steps {
            let param = st
                .r_probe
                .or(st.q_rif)
                .or(st.lambda)
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            let iqr = st.cpu_1s_iqr();
            let iqr = if iqr.is_finite() { format!("{iqr:.3}") } else { "-".into() };
            let _ = writeln!(
                s,
                "{:>3} {:>4} {:<12} {:>5.2} {:>7} {:>9.1} {:>9.1} {:>9.1} {:>8.2} {:>8.3} {:>8}",
                st.run_id,
                st.step,
                st.policy.name(),
                st.load,
                param,
                st.latency_p50,
                st.latency_p90,
                st.latency_p99,
                st.rif_p99,
                100.0 * st.error_rate,
                iqr
            );
        }
        s
    }

    /// Writes the metrics CSV, the resolved configuration, and the summary.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join(format!("{}.csv", self.config.experiment));
        fs::write(&csv, self.csv()).map_err(io(&csv))?;
        let cfg = dir.join("resolved_config.json");
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&cfg, json + "\n").map_err(io(&cfg))?;
        let summary = dir.join("summary.txt");
        fs::write(&summary, self.summary_table()).map_err(io(&summary))?;
        Ok(())
    }
}

struct RunPlan {
    run_id: usize,
    seed: u64,
    /// Index of each planned step within the filtered schedule.
    step_ids: Vec<usize>,
    steps: Vec<Step>,
}

fn plan(cfg: &RunConfig) -> Vec<RunPlan> {
    let schedule = cfg.schedule();
    let mut plans = Vec::new();
    for rep in 0..cfg.replicates {
        // Every replicate shares arrivals and antagonists across its runs.
        let seed = run_seed(cfg.seed, rep as u64);
        if cfg.experiment.independent_steps() {
            for (i, s) in schedule.iter().enumerate() {
                plans.push(RunPlan {
                    run_id: plans.len(),
                    seed,
                    step_ids: vec![i],
                    steps: vec![s.clone()],
                });
            }
        } else {
            plans.push(RunPlan {
                run_id: plans.len(),
                seed,
                step_ids: (0..schedule.len()).collect(),
                steps: schedule.clone(),
            });
        }
    }
    plans
}

/// Runs every simulation of the experiment, using up to `parallel` threads.
pub fn run_experiment(cfg: RunConfig, parallel: usize) -> Result<ExperimentResult> {
    let cfg = cfg.resolve()?;
    let plans = plan(&cfg);
    let run_one = |p: &RunPlan| -> Result<Vec<StepSummary>> {
        let setup = SimSetup {
            sim: cfg.sim.clone(),
            workload: cfg.workload.clone(),
            prequal: cfg.prequal.clone(),
            signals: cfg.signals.clone(),
            linear: cfg.linear(),
            steps: p.steps.clone(),
            seed: p.seed,
        };
        let out = simulate(setup)?;
        Ok(out
            .steps
            .iter()
            .zip(&p.steps)
            .zip(&p.step_ids)
            .map(|((col, step), &id)| summarize(p.run_id, id, p.seed, step, col, &cfg))
            .collect())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<Vec<StepSummary>>> = pool.install(|| plans.par_iter().map(run_one).collect());
    let mut steps = Vec::new();
    for r in results {
        steps.extend(r?);
    }
    let rows = steps.iter().flat_map(rows_for).collect();
    Ok(ExperimentResult {
        config: cfg,
        steps,
        rows,
    })
}

fn summarize(
    run_id: usize,
    step_id: usize,
    seed: u64,
    step: &Step,
    col: &StepCollector,
    cfg: &RunConfig,
) -> StepSummary {
    let ms = |q: f64| col.latency.quantile(q).map_or(f64::NAN, |v| v / 1000.0);
    let rif = |q: f64| col.rif.quantile(q).unwrap_or(f64::NAN);
    let alloc = cfg.sim.allocation;
    let mean_of = |keep: &dyn Fn(usize) -> bool| {
        let (sum, n) = col
            .cpu_per_second
            .iter()
            .enumerate()
            .filter(|(r, _)| keep(*r))
            .flat_map(|(_, s)| s.iter())
            .fold((0.0, 0usize), |(a, n), v| (a + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / (n as f64 * alloc)
        }
    };
    let secs = col.measured_us as f64 / 1e6;
    StepSummary {
        run_id,
        step: step_id,
        seed,
        policy: step.policy,
        load: step.load,
        r_probe: step.r_probe,
        q_rif: step.q_rif,
        lambda: step.lambda,
        latency_p50: ms(0.5),
        latency_p90: ms(0.9),
        latency_p99: ms(0.99),
        latency_p999: ms(0.999),
        rif_p50: rif(0.5),
        rif_p90: rif(0.9),
        rif_p99: rif(0.99),
        arrivals: col.arrivals,
        errors: col.errors,
        error_rate: if col.arrivals == 0 {
            0.0
        } else {
            col.errors as f64 / col.arrivals as f64
        },
        errors_per_s: col.errors as f64 / secs,
        cpu_mean: mean_of(&|_| true),
        cpu_mean_even: mean_of(&|r| ReplicaId::from(r).0 % 2 == 0),
        cpu_mean_odd: mean_of(&|r| ReplicaId::from(r).0 % 2 == 1),
        probes_per_query: if col.arrivals == 0 {
            0.0
        } else {
            col.probes_sent as f64 / col.arrivals as f64
        },
        theta_mean: (col.theta_samples > 0).then(|| col.theta_sum / col.theta_samples as f64),
        cpu_windows: cpu_window_quantiles(col, alloc),
    }
}

/// 1 s and 60 s utilization quantiles pooled over replicas and windows.
fn cpu_window_quantiles(col: &StepCollector, allocation: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (window, label) in [(1usize, "1s"), (60, "60s")] {
        let pooled: Vec<f64> = cpu_windows(&col.cpu_per_second, window, allocation)
            .into_iter()
            .flatten()
            .collect();
        for (q, name) in CPU_QUANTILES {
            if let Some(v) = sample_quantile(&pooled, q) {
                out.push((format!("{label}_{name}"), v));
            }
        }
    }
    out
}

fn rows_for(s: &StepSummary) -> Vec<MetricRow> {
    let row = |metric: &str, q: &str, value: f64, unit: &'static str| MetricRow {
        run_id: s.run_id,
        step: s.step,
        policy: s.policy,
        metric: metric.to_string(),
        quantile_or_window: q.to_string(),
        value,
        unit,
    };
    let lat = [s.latency_p50, s.latency_p90, s.latency_p99, s.latency_p999];
    let rif = [s.rif_p50, s.rif_p90, s.rif_p99];
    let mut rows = vec![row("load", "target", s.load, "fraction")];
    for (name, v) in [("r_probe", s.r_probe), ("q_rif", s.q_rif), ("lambda", s.lambda)] {
        if let Some(v) = v {
            rows.push(row(name, "setting", v, "ratio"));
        }
    }
    rows.extend(
        LATENCY_QUANTILES
            .iter()
            .zip(lat)
            .map(|((_, label), v)| row("latency", label, v, "ms")),
    );
    rows.extend(
        RIF_QUANTILES
            .iter()
            .zip(rif)
            .map(|((_, label), v)| row("rif", label, v, "queries")),
    );
    rows.push(row("arrivals", "step", s.arrivals as f64, "count"));
    rows.push(row("errors", "step", s.errors as f64, "count"));
    rows.push(row("error_rate", "step", s.error_rate, "fraction"));
    rows.push(row("errors_per_s", "step", s.errors_per_s, "1/s"));
    rows.extend(s.cpu_windows.iter().map(|(w, v)| row("cpu_util", w, *v, "fraction")));
    rows.push(row("cpu_util", "mean", s.cpu_mean, "fraction"));
    rows.push(row("cpu_util", "mean_even", s.cpu_mean_even, "fraction"));
    rows.push(row("cpu_util", "mean_odd", s.cpu_mean_odd, "fraction"));
    rows.push(row("probes_per_query", "step", s.probes_per_query, "ratio"));
    if let Some(t) = s.theta_mean {
        rows.push(row("rif_threshold", "mean", t, "queries"));
    }
    rows
}
