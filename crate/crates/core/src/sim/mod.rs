//! Deterministic discrete-event testbed.

mod engine;
pub mod machine;
pub mod replica;

pub use engine::{simulate, SimConfig, SimOutput, SimSetup, Simulation};
pub use machine::{antagonist_step, replica_service_rate, AntagonistConfig, Machine};
pub use replica::{ActiveQuery, Finished, QueryId, ServerReplica};
