//! Small shared domain types.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated time and durations, in microseconds.
pub type Micros = u64;

pub const MICROS_PER_SEC: Micros = 1_000_000;
pub const MICROS_PER_MS: Micros = 1_000;

/// Index of a server replica (and, in the simulator, of the machine hosting it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl From<usize> for ReplicaId {
    fn from(i: usize) -> Self {
        ReplicaId(i as u32)
    }
}

/// Convert seconds (possibly fractional) to whole microseconds, rounding to nearest.
pub fn secs_to_micros(secs: f64) -> Micros {
    (secs * MICROS_PER_SEC as f64).round() as Micros
}

pub fn micros_to_secs(us: Micros) -> f64 {
    us as f64 / MICROS_PER_SEC as f64
}
