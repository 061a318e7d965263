//! Weighted round robin with weights `q_i / u_i`.

use rand::Rng;

use crate::types::ReplicaId;

/// Utilization floor applied before dividing, as a fraction of allocation.
pub const MIN_UTILIZATION: f64 = 0.01;
/// No replica's weight drops below this fraction of the mean weight.
const MIN_WEIGHT_FRACTION: f64 = 0.01;

/// Per-replica weights from recent goodput (`qps`) and CPU utilization
/// (fraction of allocation). Replicas with no data get the mean weight.
pub fn compute_wrr_weights(qps: &[f64], utilization: &[f64]) -> Vec<f64> {
    assert_eq!(qps.len(), utilization.len());
    let raw: Vec<Option<f64>> = qps
        .iter()
        .zip(utilization)
        .map(|(&q, &u)| {
            if q <= 0.0 && u <= 0.0 {
                None
            } else {
                Some(q / u.max(MIN_UTILIZATION))
            }
        })
        .collect();
    let known: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = if known.is_empty() {
        1.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let mean = if mean > 0.0 { mean } else { 1.0 };
    raw.into_iter()
        .map(|w| w.unwrap_or(mean).max(mean * MIN_WEIGHT_FRACTION))
        .collect()
}

#[derive(Debug, Clone)]
pub struct WrrTable {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl WrrTable {
    pub fn uniform(n: usize) -> Self {
        Self::from_weights(vec![1.0; n])
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        assert!(weights.iter().all(|w| w.is_finite() && *w > 0.0));
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        WrrTable {
            weights,
            cumulative,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws a replica with probability proportional to its weight.
    pub fn sample<R: Rng + ?Sized>(&self, available: &[ReplicaId], rng: &mut R) -> ReplicaId {
        let full = available.len() == self.weights.len()
            && available.iter().enumerate().all(|(i, r)| r.index() == i);
        if full {
            let total = *self.cumulative.last().expect("non-empty");
            let x = rng.random::<f64>() * total;
            let i = self.cumulative.partition_point(|c| *c <= x);
            return ReplicaId::from(i.min(self.weights.len() - 1));
        }
        let total: f64 = available.iter().map(|r| self.weights[r.index()]).sum();
        let mut x = rng.random::<f64>() * total;
        for r in available {
            x -= self.weights[r.index()];
            if x < 0.0 {
                return *r;
            }
        }
        *available.last().expect("non-empty")
    }
}
