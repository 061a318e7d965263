//! The hot-cold lexicographic rule.
//!
//! Probes whose RIF reaches the threshold are hot. If every candidate is hot
//! the one with the fewest requests in flight wins; otherwise the cold
//! candidate with the lowest latency estimate wins. Remaining ties fall to
//! the other signal and then to the lower replica id.

use rand::Rng;

use crate::probe_pool::{PrequalConfig, ProbePool, RifThreshold};
use crate::signals::ProbeResponse;
use crate::types::{Micros, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub replica: ReplicaId,
    pub rif: u32,
    pub latency: Micros,
}

pub fn hcl_choose<I>(candidates: I, theta: RifThreshold) -> Option<ReplicaId>
where
    I: IntoIterator<Item = Candidate>,
{
    let mut best_cold: Option<Candidate> = None;
    let mut best_hot: Option<Candidate> = None;
    for c in candidates {
        if theta.is_hot(c.rif) {
            let key = (c.rif, c.latency, c.replica);
            if best_hot.is_none_or(|b| key < (b.rif, b.latency, b.replica)) {
                best_hot = Some(c);
            }
        } else {
            let key = (c.latency, c.rif, c.replica);
            if best_cold.is_none_or(|b| key < (b.latency, b.rif, b.replica)) {
                best_cold = Some(c);
            }
        }
    }
    best_cold.or(best_hot).map(|c| c.replica)
}

/// Selects from the probe pool, or uniformly from `replicas` when the pool
/// holds fewer than `min_occupancy` entries.
pub fn hcl_select<R: Rng + ?Sized>(
    pool: &ProbePool,
    theta: RifThreshold,
    cfg: &PrequalConfig,
    replicas: &[ReplicaId],
    rng: &mut R,
) -> ReplicaId {
    if pool.len() < cfg.min_occupancy.max(1) {
        return uniform(replicas, rng);
    }
    hcl_choose(
        pool.entries().iter().map(|e| Candidate {
            replica: e.replica(),
            rif: e.effective_rif,
            latency: e.latency(),
        }),
        theta,
    )
    .expect("non-empty pool")
}

/// Probe-then-pick selection over the responses gathered for one query.
///
/// `d` probes were sent; the caller waits for `needed` of them. Returns `None`
/// when too few responses arrived before the probe timeout, in which case the
/// caller should pick uniformly at random.
pub fn sync_select(
    d: usize,
    needed: usize,
    responses: &[ProbeResponse],
    theta: RifThreshold,
) -> Option<ReplicaId> {
    assert!(d >= 2, "synchronous probing needs at least two probes");
    if responses.len() < needed.max(1) {
        return None;
    }
    hcl_choose(
        responses.iter().map(|r| Candidate {
            replica: r.replica,
            rif: r.rif,
            latency: r.latency_estimate,
        }),
        theta,
    )
}

pub(crate) fn uniform<R: Rng + ?Sized>(replicas: &[ReplicaId], rng: &mut R) -> ReplicaId {
    replicas[rng.random_range(0..replicas.len())]
}
