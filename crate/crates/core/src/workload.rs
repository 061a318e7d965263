//! Query generation and experiment schedules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::ConfigError;
use crate::selection::PolicyKind;
use crate::types::{secs_to_micros, Micros, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson,
    /// Evenly spaced arrivals per client, for variance studies.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub n_clients: usize,
    pub n_servers: usize,
    /// Mean of the untruncated normal, in core-seconds. The default puts
    /// 100 replicas at 75% of a 0.1-core allocation near 5.8k qps.
    pub work_mean: f64,
    /// Standard deviation; defaults to `work_mean`.
    pub work_sd: Option<f64>,
    /// Double the work of queries sent to even-numbered replicas.
    pub slow_even_replicas: bool,
    pub arrivals: ArrivalProcess,
    pub step_duration_s: f64,
    /// Leading part of every step excluded from metrics.
    pub warmup_s: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_clients: 100,
            n_servers: 100,
            work_mean: 0.001,
            work_sd: None,
            slow_even_replicas: false,
            arrivals: ArrivalProcess::Poisson,
            step_duration_s: 120.0,
            warmup_s: 20.0,
        }
    }
}

impl WorkloadConfig {
    pub fn work_sd(&self) -> f64 {
        self.work_sd.unwrap_or(self.work_mean)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: String| Err(ConfigError::invalid(k, m));
        if self.n_clients == 0 {
            return bad("workload.n_clients", "must be >= 1".into());
        }
        if self.n_servers == 0 {
            return bad("workload.n_servers", "must be >= 1".into());
        }
        if !(self.work_mean.is_finite() && self.work_mean > 0.0) {
            return bad("workload.work_mean", format!("must be > 0, got {}", self.work_mean));
        }
        if !(self.work_sd().is_finite() && self.work_sd() > 0.0) {
            return bad("workload.work_sd", format!("must be > 0, got {}", self.work_sd()));
        }
        if !(self.step_duration_s > 0.0) {
            return bad("workload.step_duration_s", "must be > 0".into());
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.step_duration_s) {
            return bad(
                "workload.warmup_s",
                format!("must lie in [0, step_duration_s), got {}", self.warmup_s),
            );
        }
        Ok(())
    }

    /// Work multiplier for queries sent to `replica`.
    pub fn work_multiplier(&self, replica: ReplicaId) -> f64 {
        if self.slow_even_replicas && replica.0 % 2 == 0 {
            2.0
        } else {
            1.0
        }
    }

    /// Average multiplier across replicas (uniform routing).
    pub fn mean_work_multiplier(&self) -> f64 {
        let n = self.n_servers;
        (0..n).map(|i| self.work_multiplier(ReplicaId::from(i))).sum::<f64>() / n as f64
    }

    /// Mean of a single draw before the replica multiplier is applied.
    pub fn truncated_work_mean(&self) -> f64 {
        truncated_normal_mean(self.work_mean, self.work_sd())
    }

    /// Aggregate query rate that makes expected CPU demand equal `load`
    /// times the job's total allocation.
    pub fn qps_for_load(&self, load: f64, allocation: f64) -> f64 {
        load * allocation * self.n_servers as f64
            / (self.truncated_work_mean() * self.mean_work_multiplier())
    }
}

/// `E[X | X > 0]` for `X ~ Normal(mean, sd)`.
pub fn truncated_normal_mean(mean: f64, sd: f64) -> f64 {
    let z = StdNormal::standard();
    let a = -mean / sd;
    mean + sd * z.pdf(a) / (1.0 - z.cdf(a))
}

/// Draws one query's work: normal, redrawn until positive, then scaled by
/// the target replica's multiplier.
pub fn draw_query_work<R: Rng + ?Sized>(cfg: &WorkloadConfig, rng: &mut R, target: ReplicaId) -> f64 {
    draw_base_work(cfg, rng) * cfg.work_multiplier(target)
}

/// The replica-independent part of [`draw_query_work`].
pub fn draw_base_work<R: Rng + ?Sized>(cfg: &WorkloadConfig, rng: &mut R) -> f64 {
    let normal = Normal::new(cfg.work_mean, cfg.work_sd()).expect("validated sd");
    loop {
        let w = normal.sample(rng);
        if w > 0.0 {
            return w;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    LoadRamp,
    SelectionRules,
    ProbeRate,
    RifQuantile,
    LinearSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::LoadRamp,
        Experiment::SelectionRules,
        Experiment::ProbeRate,
        Experiment::RifQuantile,
        Experiment::LinearSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::LoadRamp => "load_ramp",
            Experiment::SelectionRules => "selection_rules",
            Experiment::ProbeRate => "probe_rate",
            Experiment::RifQuantile => "rif_quantile",
            Experiment::LinearSweep => "linear_sweep",
        }
    }

    /// Whether each step runs as its own simulation (with the same seed)
    /// rather than as consecutive epochs of one simulation.
    pub fn independent_steps(self) -> bool {
        matches!(self, Experiment::SelectionRules)
    }

    /// Experiments that need fast (odd) and slow (even) replicas.
    pub fn slow_even_replicas(self) -> bool {
        matches!(self, Experiment::RifQuantile | Experiment::LinearSweep)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::invalid("experiment", format!("unknown experiment `{s}`")))
    }
}

/// One epoch of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Step {
    pub duration_us: Micros,
    pub warmup_us: Micros,
    pub policy: PolicyKind,
    /// Target aggregate CPU demand as a fraction of total allocation.
    pub load: f64,
    pub r_probe: Option<f64>,
    pub r_remove: Option<f64>,
    pub q_rif: Option<f64>,
    pub lambda: Option<f64>,
}

impl Step {
    fn new(policy: PolicyKind, load: f64, cfg: &WorkloadConfig) -> Self {
        Step {
            duration_us: secs_to_micros(cfg.step_duration_s),
            warmup_us: secs_to_micros(cfg.warmup_s),
            policy,
            load,
            r_probe: None,
            r_remove: None,
            q_rif: None,
            lambda: None,
        }
    }
}

/// Load multipliers of the ramp: 0.75 growing by 10/9 per step.
pub fn load_ramp_levels() -> Vec<f64> {
    (0..9).map(|i| 0.75 * (10.0f64 / 9.0).powi(i)).collect()
}

/// Probes per query, from 4 down to 1/2 in steps of sqrt(2).
pub fn probe_rate_levels() -> Vec<f64> {
    (0..7).map(|i| 4.0 / 2f64.sqrt().powi(i)).collect()
}

/// RIF quantiles: 0, then 0.9^10 up to 0.9 by factors of 10/9, then 0.99,
/// 0.999 and 1.
pub fn rif_quantile_levels() -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend((1..=10).rev().map(|i| 0.9f64.powi(i)));
    v.extend([0.99, 0.999, 1.0]);
    v
}

/// Weights on RIF for the linear-combination sweep.
pub const LINEAR_LAMBDAS: [f64; 13] = [
    0.769, 0.785, 0.801, 0.817, 0.834, 0.868, 0.886, 0.904, 0.922, 0.941, 0.960, 0.980, 1.0,
];

/// Q_RIF used for the probing balancer in the selection-rule comparison.
pub const SELECTION_RULES_Q_RIF: f64 = 0.75;

/// Builds the step sequence for an experiment. Durations and warm-up come
/// from `cfg`; the load-ramp steps are split into a WRR half and a probing
/// half of equal length.
pub fn build_schedule(experiment: Experiment, cfg: &WorkloadConfig) -> Vec<Step> {
    match experiment {
        Experiment::LoadRamp => {
            let half = WorkloadConfig {
                step_duration_s: cfg.step_duration_s / 2.0,
                warmup_s: cfg.warmup_s.min(cfg.step_duration_s / 4.0),
                ..cfg.clone()
            };
            load_ramp_levels()
                .into_iter()
                .flat_map(|load| {
                    [
                        Step::new(PolicyKind::Wrr, load, &half),
                        Step::new(PolicyKind::Prequal, load, &half),
                    ]
                })
                .collect()
        }
        Experiment::SelectionRules => [0.7, 0.9]
            .into_iter()
            .flat_map(|load| {
                PolicyKind::ALL.into_iter().map(move |p| {
                    let mut s = Step::new(p, load, cfg);
                    if p == PolicyKind::Prequal {
                        s.q_rif = Some(SELECTION_RULES_Q_RIF);
                    }
                    s
                })
            })
            .collect(),
        Experiment::ProbeRate => probe_rate_levels()
            .into_iter()
            .map(|r| Step {
                r_probe: Some(r),
                r_remove: Some(0.25),
                ..Step::new(PolicyKind::Prequal, 1.5, cfg)
            })
            .collect(),
        Experiment::RifQuantile => rif_quantile_levels()
            .into_iter()
            .map(|q| Step {
                q_rif: Some(q),
                ..Step::new(PolicyKind::Prequal, 0.75, cfg)
            })
            .collect(),
        Experiment::LinearSweep => LINEAR_LAMBDAS
            .into_iter()
            .map(|l| Step {
                lambda: Some(l),
                ..Step::new(PolicyKind::Linear, 0.94, cfg)
            })
            .collect(),
    }
}
