//! Probing load balancing and a deterministic testbed to evaluate it.
//!
//! Clients keep a small pool of recent probe responses from server replicas
//! and pick a replica with the hot-cold lexicographic rule: among replicas
//! whose requests-in-flight (RIF) count is below a quantile threshold, pick
//! the lowest latency estimate; if none qualify, pick the lowest RIF.
//!
//! The crate also ships eight baseline rules and a discrete-event simulator
//! of clients and servers sharing machines with noisy antagonists.

pub mod cli;
pub mod error;
pub mod metrics;
pub mod probe_pool;
pub mod rng;
pub mod selection;
pub mod signals;
pub mod sim;
pub mod types;
pub mod workload;

pub use error::{ConfigError, Error, Result};
pub use probe_pool::{compute_reuse_budget, PrequalConfig, ProbePool};
pub use selection::PolicyKind;
pub use signals::{ProbeResponse, ServerLoadTracker};
pub use types::{Micros, ReplicaId};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/probe_pool.md")]
    mod probe_pool {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/testbed.md")]
    mod testbed {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
