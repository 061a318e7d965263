//! Client-side probe pool.
//!
//! Each client keeps a small pool of recent probe responses and picks replicas
//! from it. The pool is maintained against three failure modes:
//!
//! * **staleness**: entries expire after `age_limit_us`, the oldest entry is
//!   evicted when a new response would overflow the pool, and a client bumps
//!   the RIF on an entry whenever it sends that replica a query;
//! * **depletion**: each response may be used several times, with the reuse
//!   budget set by [`compute_reuse_budget`];
//! * **degradation**: `r_remove` entries per query are removed, alternating
//!   between the oldest entry and the worst entry by the selection ranking.
//!
//! Fractional per-query rates (`r_probe`, `r_remove`) are realised with an
//! accumulator so the long-run average is exact.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::signals::ProbeResponse;
use crate::types::{Micros, ReplicaId, MICROS_PER_SEC};

/// Reuse budget used when probes arrive more slowly than they are removed.
pub const B_MAX: f64 = 64.0;

/// Tunables for the probing balancer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrequalConfig {
    /// Probes issued per query.
    pub r_probe: f64,
    /// Rate-driven removals per query.
    pub r_remove: f64,
    /// Net drift rate at which probes accumulate in the pool.
    pub delta: f64,
    /// Maximum pool size.
    pub max_pool_size: usize,
    /// Number of server replicas.
    pub n_replicas: usize,
    /// Quantile of the recent RIF distribution above which a probe is hot.
    pub q_rif: f64,
    pub age_limit_us: Micros,
    /// Below this occupancy selection falls back to a uniform random replica.
    pub min_occupancy: usize,
    /// Probe once if a client has been idle this long.
    pub idle_probe_interval_us: Option<Micros>,
    /// Number of recent probe RIFs used to estimate the RIF distribution.
    pub rif_window: usize,
}

impl Default for PrequalConfig {
    fn default() -> Self {
        PrequalConfig {
            r_probe: 3.0,
            r_remove: 1.0,
            delta: 1.0,
            max_pool_size: 16,
            n_replicas: 100,
            q_rif: 2f64.powf(-0.25),
            age_limit_us: MICROS_PER_SEC,
            min_occupancy: 2,
            idle_probe_interval_us: None,
            rif_window: 128,
        }
    }
}

impl PrequalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(ConfigError::invalid(key, msg));
        if !(self.r_probe.is_finite() && self.r_probe > 0.0) {
            return bad("prequal.r_probe", format!("must be > 0, got {}", self.r_probe));
        }
        if !(self.r_remove.is_finite() && self.r_remove >= 0.0) {
            return bad("prequal.r_remove", format!("must be >= 0, got {}", self.r_remove));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return bad("prequal.delta", format!("must be > 0, got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.q_rif) {
            return bad("prequal.q_rif", format!("must be within [0, 1], got {}", self.q_rif));
        }
        if self.max_pool_size < 1 {
            return bad("prequal.max_pool_size", "must be >= 1".into());
        }
        if self.n_replicas < 1 {
            return bad("prequal.n_replicas", "must be >= 1".into());
        }
        if self.rif_window < 1 {
            return bad("prequal.rif_window", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Maximum number of times one probe response may be used.
///
/// `max{1, (1 + delta) / ((1 - m/n) * r_probe - r_remove)}`, or [`B_MAX`] when
/// the denominator is not positive.
pub fn compute_reuse_budget(cfg: &PrequalConfig) -> f64 {
    let m_over_n = cfg.max_pool_size as f64 / cfg.n_replicas as f64;
    let denom = (1.0 - m_over_n) * cfg.r_probe - cfg.r_remove;
    if denom <= 0.0 {
        return B_MAX;
    }
    ((1.0 + cfg.delta) / denom).clamp(1.0, B_MAX)
}

/// RIF threshold separating hot from cold probes. A probe is hot iff its RIF
/// is at least the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RifThreshold {
    Finite(u32),
    Infinite,
}

impl RifThreshold {
    #[inline]
    pub fn is_hot(self, rif: u32) -> bool {
        match self {
            RifThreshold::Finite(t) => rif >= t,
            RifThreshold::Infinite => false,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            RifThreshold::Finite(t) => t as f64,
            RifThreshold::Infinite => f64::INFINITY,
        }
    }
}

/// A probe response plus the client's own bookkeeping on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolEntry {
    pub response: ProbeResponse,
    /// Reported RIF plus one for every query this client has since sent there.
    pub effective_rif: u32,
    pub uses_remaining: u32,
}

impl PoolEntry {
    pub fn replica(&self) -> ReplicaId {
        self.response.replica
    }

    pub fn latency(&self) -> Micros {
        self.response.latency_estimate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalTurn {
    Oldest,
    Worst,
}

/// Counters kept for rate and hygiene checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub probes_requested: u64,
    pub removal_turns: u64,
    pub removed_by_rate: u64,
    pub removed_by_budget: u64,
    pub removed_by_age: u64,
    pub evicted_by_cap: u64,
    pub replaced_duplicates: u64,
}

#[derive(Debug, Clone)]
pub struct ProbePool {
    entries: Vec<PoolEntry>,
    removal_turn: RemovalTurn,
    probe_accumulator: f64,
    removal_accumulator: f64,
    rif_history: VecDeque<u32>,
    stats: PoolStats,
}

impl Default for ProbePool {
    fn default() -> Self {
        Self::new()
    }
}

impl ProbePool {
    pub fn new() -> Self {
        ProbePool {
            entries: Vec::new(),
            removal_turn: RemovalTurn::Oldest,
            probe_accumulator: 0.0,
            removal_accumulator: 0.0,
            rif_history: VecDeque::new(),
            stats: PoolStats::default(),
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn next_removal_turn(&self) -> RemovalTurn {
        self.removal_turn
    }

    pub fn rif_history(&self) -> impl Iterator<Item = u32> + '_ {
        self.rif_history.iter().copied()
    }

    pub fn entry_for(&self, replica: ReplicaId) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| e.replica() == replica)
    }

    /// Number of probes to send for the query being dispatched now.
    pub fn probes_for_query(&mut self, cfg: &PrequalConfig) -> usize {
        self.probe_accumulator += cfg.r_probe;
        let n = self.probe_accumulator.floor();
        self.probe_accumulator -= n;
        self.stats.probes_requested += n as u64;
        n as usize
    }

    /// Inserts a fresh response with a randomly rounded reuse budget.
    pub fn add_probe<R: Rng + ?Sized>(
        &mut self,
        response: ProbeResponse,
        cfg: &PrequalConfig,
        budget: f64,
        rng: &mut R,
    ) {
        let uses = round_budget(budget, rng);

        if self.rif_history.len() == cfg.rif_window {
            self.rif_history.pop_front();
        }
        self.rif_history.push_back(response.rif);

        let entry = PoolEntry {
            response,
            effective_rif: response.rif,
            uses_remaining: uses,
        };
        if let Some(slot) = self
            .entries
            .iter_mut()
            .find(|e| e.replica() == response.replica)
        {
            *slot = entry;
            self.stats.replaced_duplicates += 1;
            return;
        }
        while self.entries.len() >= cfg.max_pool_size {
            if let Some(i) = self.oldest_index() {
                self.entries.remove(i);
                self.stats.evicted_by_cap += 1;
            }
        }
        self.entries.push(entry);
    }

    /// Drops every entry older than the age limit (strictly).
    pub fn expire(&mut self, now: Micros, cfg: &PrequalConfig) {
        let before = self.entries.len();
        self.entries
            .retain(|e| now.saturating_sub(e.response.received_at) <= cfg.age_limit_us);
        self.stats.removed_by_age += (before - self.entries.len()) as u64;
    }

    /// Nearest-rank quantile of the recent probe RIFs.
    pub fn rif_threshold(&self, cfg: &PrequalConfig) -> RifThreshold {
        if cfg.q_rif >= 1.0 {
            return RifThreshold::Infinite;
        }
        if self.rif_history.is_empty() {
            return RifThreshold::Finite(0);
        }
        let mut v: Vec<u32> = self.rif_history.iter().copied().collect();
        let rank = ((cfg.q_rif * v.len() as f64).ceil() as usize).max(1);
        let (_, k, _) = v.select_nth_unstable(rank - 1);
        RifThreshold::Finite(*k)
    }

    /// Bookkeeping after a query has been sent to `chosen`.
    pub fn on_query_sent(&mut self, chosen: ReplicaId, cfg: &PrequalConfig) {
        if let Some(i) = self.entries.iter().position(|e| e.replica() == chosen) {
            let e = &mut self.entries[i];
            e.effective_rif += 1;
            e.uses_remaining = e.uses_remaining.saturating_sub(1);
            if e.uses_remaining == 0 {
                self.entries.remove(i);
                self.stats.removed_by_budget += 1;
            }
        }

        self.removal_accumulator += cfg.r_remove;
        let turns = self.removal_accumulator.floor();
        self.removal_accumulator -= turns;
        if turns > 0.0 {
            let theta = self.rif_threshold(cfg);
            for _ in 0..turns as u64 {
                self.remove_one(theta);
            }
        }
    }

    fn remove_one(&mut self, theta: RifThreshold) {
        self.stats.removal_turns += 1;
        let victim = match self.removal_turn {
            RemovalTurn::Oldest => {
                self.removal_turn = RemovalTurn::Worst;
                self.oldest_index()
            }
            RemovalTurn::Worst => {
                self.removal_turn = RemovalTurn::Oldest;
                worst_index(&self.entries, theta)
            }
        };
        if let Some(i) = victim {
            self.entries.remove(i);
            self.stats.removed_by_rate += 1;
        }
    }

    fn oldest_index(&self) -> Option<usize> {
        self.entries
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| (e.response.received_at, e.replica()))
            .map(|(i, _)| i)
    }
}

/// Rounds `budget` to a neighboring integer so the expectation is `budget`,
/// never going below one use.
pub fn round_budget<R: Rng + ?Sized>(budget: f64, rng: &mut R) -> u32 {
    let floor = budget.floor();
    let frac = budget - floor;
    let uses = if frac > 0.0 && rng.random::<f64>() < frac {
        floor + 1.0
    } else {
        floor
    };
    (uses as u32).max(1)
}

/// Index of the entry the reversed hot-cold ranking likes least: the hottest
/// hot entry if any entry is hot, otherwise the slowest cold entry.
pub fn worst_index(entries: &[PoolEntry], theta: RifThreshold) -> Option<usize> {
    let any_hot = entries.iter().any(|e| theta.is_hot(e.effective_rif));
    let it = entries.iter().enumerate();
    if any_hot {
        it.filter(|(_, e)| theta.is_hot(e.effective_rif))
            .max_by_key(|(_, e)| (e.effective_rif, e.latency(), e.replica()))
            .map(|(i, _)| i)
    } else {
        it.max_by_key(|(_, e)| (e.latency(), e.effective_rif, e.replica()))
            .map(|(i, _)| i)
    }
}

/// `k` distinct replicas drawn uniformly without replacement. `k` is clamped
/// to the number of replicas.
pub fn pick_probe_targets<R: Rng + ?Sized>(
    replicas: &[ReplicaId],
    k: usize,
    rng: &mut R,
) -> Vec<ReplicaId> {
    let k = k.min(replicas.len());
    index::sample(rng, replicas.len(), k)
        .into_iter()
        .map(|i| replicas[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn resp(replica: u32, rif: u32, lat_ms: u64, at: Micros) -> ProbeResponse {
        ProbeResponse {
            replica: ReplicaId(replica),
            rif,
            latency_estimate: lat_ms * 1000,
            received_at: at,
        }
    }

    fn cfg(r_probe: f64, r_remove: f64) -> PrequalConfig {
        PrequalConfig {
            r_probe,
            r_remove,
            ..PrequalConfig::default()
        }
    }

    #[test]
    fn reuse_budget_matches_hand_evaluation() {
        let b = compute_reuse_budget(&cfg(3.0, 1.0));
        assert!((b - 2.0 / 1.52).abs() < 1e-12);
        let b = compute_reuse_budget(&cfg(0.5, 0.25));
        assert!((b - 2.0 / 0.17).abs() < 1e-9);
        let tiny = PrequalConfig {
            max_pool_size: 1,
            n_replicas: 1_000_000_000,
            ..cfg(3.0, 1.0)
        };
        assert!((compute_reuse_budget(&tiny) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reuse_budget_caps_when_removals_outpace_probes() {
        assert_eq!(compute_reuse_budget(&cfg(0.5, 1.0)), B_MAX);
        assert_eq!(compute_reuse_budget(&cfg(1.0, 0.84)), B_MAX);
    }

    #[test]
    fn fractional_probe_rates_alternate() {
        let mut p = ProbePool::new();
        let seq: Vec<_> = (0..6).map(|_| p.probes_for_query(&cfg(0.5, 1.0))).collect();
        assert_eq!(seq, vec![0, 1, 0, 1, 0, 1]);
        let mut p = ProbePool::new();
        let seq: Vec<_> = (0..6).map(|_| p.probes_for_query(&cfg(1.5, 1.0))).collect();
        assert_eq!(seq, vec![1, 2, 1, 2, 1, 2]);
        let mut p = ProbePool::new();
        assert!((0..5).all(|_| p.probes_for_query(&cfg(3.0, 1.0)) == 3));
    }

    #[test]
    fn probe_targets_are_distinct_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let replicas: Vec<ReplicaId> = (0..10usize).map(ReplicaId::from).collect();
        assert!(pick_probe_targets(&replicas, 0, &mut rng).is_empty());
        let mut all = pick_probe_targets(&replicas, 10, &mut rng);
        all.sort();
        assert_eq!(all, replicas);
        assert_eq!(pick_probe_targets(&replicas, 25, &mut rng).len(), 10);
    }

    #[test]
    fn cap_evicts_oldest_and_duplicates_replace() {
        let c = PrequalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ProbePool::new();
        for i in 0..16 {
            p.add_probe(resp(i, 1, 10, 100 + i as u64), &c, 2.0, &mut rng);
        }
        p.add_probe(resp(50, 1, 10, 500), &c, 2.0, &mut rng);
        assert_eq!(p.len(), 16);
        assert!(p.entry_for(ReplicaId(0)).is_none());
        p.add_probe(resp(5, 9, 10, 600), &c, 2.0, &mut rng);
        assert_eq!(p.len(), 16);
        assert_eq!(p.entry_for(ReplicaId(5)).unwrap().response.rif, 9);
    }

    #[test]
    fn expiry_is_strict() {
        let c = PrequalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ProbePool::new();
        let now = 2_000_000;
        p.add_probe(resp(0, 1, 1, now - 1_100_000), &c, 1.0, &mut rng);
        p.add_probe(resp(1, 1, 1, now - 1_000_000), &c, 1.0, &mut rng);
        p.add_probe(resp(2, 1, 1, now - 200_000), &c, 1.0, &mut rng);
        p.add_probe(resp(3, 1, 1, now - 900_000), &c, 1.0, &mut rng);
        p.add_probe(resp(4, 1, 1, now - 1_500_000), &c, 1.0, &mut rng);
        let history_before: Vec<_> = p.rif_history().collect();
        p.expire(now, &c);
        let mut left: Vec<u32> = p.entries().iter().map(|e| e.replica().0).collect();
        left.sort();
        assert_eq!(left, vec![1, 2, 3]);
        assert_eq!(p.rif_history().collect::<Vec<_>>(), history_before);
    }

    fn pool_with_history(rifs: &[u32], window: usize) -> (ProbePool, PrequalConfig) {
        let c = PrequalConfig {
            rif_window: window,
            ..PrequalConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ProbePool::new();
        for (i, &r) in rifs.iter().enumerate() {
            p.add_probe(resp(i as u32, r, 1, 0), &c, 1.0, &mut rng);
        }
        (p, c)
    }

    #[test]
    fn threshold_is_nearest_rank() {
        let (p, c) = pool_with_history(&(1..=10).collect::<Vec<_>>(), 128);
        let at = |q: f64| p.rif_threshold(&PrequalConfig { q_rif: q, ..c.clone() });
        assert_eq!(at(0.75), RifThreshold::Finite(8));
        assert_eq!(at(1.0), RifThreshold::Infinite);
        let (p, c) = pool_with_history(&[3, 7, 5], 128);
        assert_eq!(
            p.rif_threshold(&PrequalConfig { q_rif: 0.0, ..c }),
            RifThreshold::Finite(3)
        );
        assert_eq!(
            ProbePool::new().rif_threshold(&PrequalConfig::default()),
            RifThreshold::Finite(0)
        );
    }

    #[test]
    fn history_window_slides() {
        let (p, _) = pool_with_history(&[9, 9, 1, 2, 3], 3);
        assert_eq!(p.rif_history().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn sent_query_bumps_rif_and_spends_budget() {
        let c = cfg(3.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ProbePool::new();
        p.add_probe(resp(0, 4, 10, 0), &c, 2.0, &mut rng);
        p.on_query_sent(ReplicaId(0), &c);
        let e = p.entry_for(ReplicaId(0)).unwrap();
        assert_eq!((e.effective_rif, e.uses_remaining), (5, 1));
        assert_eq!(e.latency(), 10_000);
        p.on_query_sent(ReplicaId(0), &c);
        assert!(p.is_empty());
    }

    #[test]
    fn integer_removal_rate_alternates_oldest_and_worst() {
        let c = cfg(3.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ProbePool::new();
        // replica 0 oldest and cold-fast, replica 2 hottest.
        p.add_probe(resp(0, 1, 5, 10), &c, 8.0, &mut rng);
        p.add_probe(resp(1, 2, 50, 20), &c, 8.0, &mut rng);
        p.add_probe(resp(2, 9, 20, 30), &c, 8.0, &mut rng);
        p.add_probe(resp(3, 1, 30, 40), &c, 8.0, &mut rng);
        assert_eq!(p.next_removal_turn(), RemovalTurn::Oldest);
        p.on_query_sent(ReplicaId(99), &c);
        assert!(p.entry_for(ReplicaId(0)).is_none());
        assert_eq!(p.next_removal_turn(), RemovalTurn::Worst);
        p.on_query_sent(ReplicaId(99), &c);
        // θ over {1,2,9,1} at q≈0.84 → rank ceil(3.36)=4 → 9, so replica 2 is hot.
        assert!(p.entry_for(ReplicaId(2)).is_none());
        assert_eq!(p.next_removal_turn(), RemovalTurn::Oldest);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn quarter_removal_rate_fires_every_fourth_query() {
        let c = cfg(3.0, 0.25);
        let mut p = ProbePool::new();
        let mut fired = Vec::new();
        for q in 1..=12 {
            let before = p.stats().removal_turns;
            p.on_query_sent(ReplicaId(0), &c);
            if p.stats().removal_turns > before {
                fired.push(q);
            }
        }
        assert_eq!(fired, vec![4, 8, 12]);
    }

    #[test]
    fn worst_removal_prefers_hottest_hot_entry() {
        let e = |r, rif, lat_ms: u64| PoolEntry {
            response: resp(r, rif, lat_ms, 0),
            effective_rif: rif,
            uses_remaining: 1,
        };
        let entries = [e(0, 3, 50), e(1, 10, 20), e(2, 9, 90)];
        assert_eq!(worst_index(&entries, RifThreshold::Finite(8)), Some(1));
        assert_eq!(worst_index(&entries, RifThreshold::Infinite), Some(2));
    }

    #[test]
    fn config_validation_names_the_key() {
        let err = PrequalConfig {
            q_rif: 1.5,
            ..PrequalConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("q_rif"));
    }
}
