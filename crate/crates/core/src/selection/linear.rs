//! Linear combinations of latency and RIF.

use serde::{Deserialize, Serialize};

use crate::probe_pool::PoolEntry;
use crate::types::{Micros, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearParams {
    /// Weight on RIF; 0 is latency-only, 1 is RIF-only.
    pub lambda: f64,
    /// Latency that one unit of RIF is worth.
    pub alpha_us: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        LinearParams {
            lambda: 0.5,
            alpha_us: 75_000.0,
        }
    }
}

/// `(1 - lambda) * latency + lambda * alpha * rif`, in microseconds.
#[inline]
pub fn linear_score(latency: Micros, rif: u32, lambda: f64, alpha_us: f64) -> f64 {
    (1.0 - lambda) * latency as f64 + lambda * alpha_us * rif as f64
}

/// Lowest-scoring pool entry. Ties go to the lower latency, then the lower
/// RIF, then the lower replica id, so the endpoints agree with the hot-cold
/// rule's orderings.
pub fn linear_select(entries: &[PoolEntry], params: LinearParams) -> Option<ReplicaId> {
    entries
        .iter()
        .map(|e| {
            (
                linear_score(e.latency(), e.effective_rif, params.lambda, params.alpha_us),
                (e.latency(), e.effective_rif, e.replica()),
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, (_, _, r))| r)
}
