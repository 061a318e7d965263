//! Machines shared between one server replica and its antagonists.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::types::{Micros, MICROS_PER_MS};

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    /// Cores.
    pub capacity: f64,
    /// Cores guaranteed to the server replica.
    pub replica_allocation: f64,
    /// Cores the antagonists currently want.
    pub antagonist_demand: f64,
    /// Per-run antagonist baseline.
    pub antagonist_base: f64,
    /// Current burst on top of the baseline.
    pub antagonist_burst: f64,
    /// Multiplier on the replica's rate while the machine is oversubscribed.
    pub hobble_penalty: f64,
}

impl Machine {
    pub fn new(capacity: f64, replica_allocation: f64) -> Self {
        Machine {
            capacity,
            replica_allocation,
            antagonist_demand: 0.0,
            antagonist_base: 0.0,
            antagonist_burst: 0.0,
            hobble_penalty: 1.0,
        }
    }

    /// Cores nobody is entitled to.
    pub fn spare(&self) -> f64 {
        (self.capacity - self.antagonist_demand - self.replica_allocation).max(0.0)
    }

    /// Whether antagonists plus the replica's allocation exceed the machine.
    pub fn is_oversubscribed(&self) -> bool {
        self.antagonist_demand + self.replica_allocation > self.capacity
    }

    /// CPU the antagonists actually get once the replica runs at `replica_rate`.
    pub fn antagonist_usage(&self, replica_rate: f64) -> f64 {
        self.antagonist_demand.min(self.capacity - replica_rate).max(0.0)
    }
}

/// Cores the replica receives when it wants `demand` cores.
///
/// The replica always gets up to its allocation and may borrow spare cores
/// beyond it. On an oversubscribed machine isolation caps it at its
/// allocation, scaled by the machine's hobble penalty.
pub fn replica_service_rate(machine: &Machine, demand: f64) -> f64 {
    if demand <= 0.0 {
        return 0.0;
    }
    let rate = demand.min(machine.replica_allocation + machine.spare());
    if machine.is_oversubscribed() {
        rate * machine.hobble_penalty
    } else {
        rate
    }
}

/// Synthetic antagonist demand: a per-machine baseline plus occasional
/// bursts, resampled every `period_us`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AntagonistConfig {
    pub period_us: Micros,
    /// Baselines are drawn once per run from `[base_min, base_max]`.
    pub base_min: f64,
    pub base_max: f64,
    /// Chance that a resample produces a burst.
    pub burst_prob: f64,
    /// Bursts are uniform on `[0, capacity - base - allocation + burst_headroom]`.
    pub burst_headroom: f64,
    /// Chance, per period, that the current burst state is kept instead of
    /// resampled. Zero resamples every period.
    pub persistence: f64,
    /// Demand never reaches full capacity; it stays this far below.
    pub epsilon: f64,
}

impl Default for AntagonistConfig {
    fn default() -> Self {
        AntagonistConfig {
            period_us: 100 * MICROS_PER_MS,
            base_min: 0.2,
            base_max: 0.7,
            burst_prob: 0.2,
            burst_headroom: 0.1,
            persistence: 0.0,
            epsilon: 1e-3,
        }
    }
}

impl AntagonistConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: String| Err(ConfigError::invalid(k, m));
        if self.period_us == 0 {
            return bad("sim.antagonist.period_us", "must be > 0".into());
        }
        if !(0.0 <= self.base_min && self.base_min <= self.base_max) {
            return bad(
                "sim.antagonist.base_min",
                format!("need 0 <= base_min <= base_max, got {} and {}", self.base_min, self.base_max),
            );
        }
        for (k, v) in [
            ("sim.antagonist.burst_prob", self.burst_prob),
            ("sim.antagonist.persistence", self.persistence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(k, format!("must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// Draws a machine's baseline for the run.
    pub fn draw_base<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.base_max > self.base_min {
            rng.random_range(self.base_min..=self.base_max)
        } else {
            self.base_min
        }
    }
}

/// Advances one machine's antagonist by one period.
pub fn antagonist_step<R: Rng + ?Sized>(machine: &mut Machine, cfg: &AntagonistConfig, rng: &mut R) {
    let keep = cfg.persistence > 0.0 && rng.random::<f64>() < cfg.persistence;
    if !keep {
        machine.antagonist_burst = if rng.random::<f64>() < cfg.burst_prob {
            let top = (machine.capacity - machine.antagonist_base - machine.replica_allocation
                + cfg.burst_headroom)
                .max(0.0);
            rng.random::<f64>() * top
        } else {
            0.0
        };
    }
    machine.antagonist_demand = (machine.antagonist_base + machine.antagonist_burst)
        .clamp(0.0, machine.capacity - cfg.epsilon);
}
