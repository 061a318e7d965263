//! Replica selection rules.
//!
//! Three rules read the probe pool (`prequal`, `linear`, `c3`); the rest are
//! baselines that rely on client-local state or periodically refreshed
//! server reports.

mod c3;
mod hcl;
mod linear;
mod wrr;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::probe_pool::{PrequalConfig, ProbePool};
use crate::types::ReplicaId;

pub use c3::{c3_queue_estimate, c3_score, C3State, DEFAULT_SMOOTHING};
pub use hcl::{hcl_choose, hcl_select, sync_select, Candidate};
pub use linear::{linear_score, linear_select, LinearParams};
pub use wrr::{compute_wrr_weights, WrrTable, MIN_UTILIZATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    RoundRobin,
    Wrr,
    LeastLoaded,
    LlPo2c,
    YarpPo2c,
    Linear,
    C3,
    Prequal,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 9] = [
        PolicyKind::Random,
        PolicyKind::RoundRobin,
        PolicyKind::Wrr,
        PolicyKind::LeastLoaded,
        PolicyKind::LlPo2c,
        PolicyKind::YarpPo2c,
        PolicyKind::Linear,
        PolicyKind::C3,
        PolicyKind::Prequal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::Wrr => "wrr",
            PolicyKind::LeastLoaded => "least_loaded",
            PolicyKind::LlPo2c => "ll_po2c",
            PolicyKind::YarpPo2c => "yarp_po2c",
            PolicyKind::Linear => "linear",
            PolicyKind::C3 => "c3",
            PolicyKind::Prequal => "prequal",
        }
    }

    /// Whether the rule selects from the asynchronous probe pool.
    pub fn uses_probe_pool(self) -> bool {
        matches!(self, PolicyKind::Linear | PolicyKind::C3 | PolicyKind::Prequal)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ConfigError::invalid("policy", format!("unknown policy `{s}`")))
    }
}

/// Everything one client needs to pick a replica under any rule.
#[derive(Debug, Clone)]
pub struct ClientPolicyState {
    pub policy: PolicyKind,
    pub last_chosen: Option<ReplicaId>,
    /// Queries this client has outstanding at each replica.
    pub client_rif: Vec<u32>,
    pub wrr: WrrTable,
    /// Server RIFs from the most recent poll.
    pub yarp_rif: Vec<u32>,
    pub c3: C3State,
    pub linear: LinearParams,
}

impl ClientPolicyState {
    pub fn new(policy: PolicyKind, n_replicas: usize, n_clients: usize) -> Self {
        ClientPolicyState {
            policy,
            last_chosen: None,
            client_rif: vec![0; n_replicas],
            wrr: WrrTable::uniform(n_replicas),
            yarp_rif: vec![0; n_replicas],
            c3: C3State::new(n_replicas, n_clients, DEFAULT_SMOOTHING),
            linear: LinearParams::default(),
        }
    }

    pub fn on_query_sent(&mut self, replica: ReplicaId) {
        self.client_rif[replica.index()] += 1;
        self.last_chosen = Some(replica);
    }

    /// A response (or error) came back after `response_time_us`.
    pub fn on_query_returned(&mut self, replica: ReplicaId, response_time_us: f64) {
        let slot = &mut self.client_rif[replica.index()];
        assert!(*slot > 0, "client RIF underflow on {replica}");
        *slot -= 1;
        self.c3.observe_response(replica, response_time_us);
    }

    /// Picks with one of the non-pool rules. Returns `None` for rules that
    /// need the probe pool.
    pub fn baseline_select<R: Rng + ?Sized>(
        &self,
        available: &[ReplicaId],
        rng: &mut R,
    ) -> Option<ReplicaId> {
        assert!(!available.is_empty(), "no replicas available");
        let pick = match self.policy {
            PolicyKind::Random => hcl::uniform(available, rng),
            PolicyKind::RoundRobin => {
                let start = self.cyclic_start(available);
                available[start % available.len()]
            }
            PolicyKind::Wrr => self.wrr.sample(available, rng),
            PolicyKind::LeastLoaded => {
                let start = self.cyclic_start(available);
                let n = available.len();
                (0..n)
                    .map(|k| available[(start + k) % n])
                    .min_by_key(|r| self.client_rif[r.index()])
                    .expect("non-empty")
            }
            PolicyKind::LlPo2c => po2c(available, rng, |r| self.client_rif[r.index()]),
            PolicyKind::YarpPo2c => po2c(available, rng, |r| self.yarp_rif[r.index()]),
            PolicyKind::Linear | PolicyKind::C3 | PolicyKind::Prequal => return None,
        };
        Some(pick)
    }

    /// Picks a replica under the active rule. Pool rules fall back to a
    /// uniform choice when the pool is thinner than `min_occupancy`.
    pub fn select<R: Rng + ?Sized>(
        &self,
        available: &[ReplicaId],
        pool: &ProbePool,
        cfg: &PrequalConfig,
        rng: &mut R,
    ) -> ReplicaId {
        if let Some(r) = self.baseline_select(available, rng) {
            return r;
        }
        if pool.len() < cfg.min_occupancy.max(1) {
            return hcl::uniform(available, rng);
        }
        let picked = match self.policy {
            PolicyKind::Prequal => {
                hcl_select(pool, pool.rif_threshold(cfg), cfg, available, rng)
            }
            PolicyKind::Linear => linear_select(pool.entries(), self.linear).expect("non-empty"),
            PolicyKind::C3 => self
                .c3
                .select(pool.entries(), &self.client_rif)
                .expect("non-empty"),
            _ => unreachable!(),
        };
        picked
    }

    /// Index into `available` just after the last chosen replica.
    fn cyclic_start(&self, available: &[ReplicaId]) -> usize {
        match self.last_chosen {
            None => 0,
            Some(last) => available.partition_point(|r| *r <= last) % available.len(),
        }
    }
}

/// Two distinct uniform samples; the one with the smaller load wins and the
/// first sample wins ties.
fn po2c<R, F>(available: &[ReplicaId], rng: &mut R, load: F) -> ReplicaId
where
    R: Rng + ?Sized,
    F: Fn(ReplicaId) -> u32,
{
    if available.len() == 1 {
        return available[0];
    }
    let pair = index::sample(rng, available.len(), 2);
    let (a, b) = (available[pair.index(0)], available[pair.index(1)]);
    if load(b) < load(a) {
        b
    } else {
        a
    }
}
