//! Named, independent random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    /// Inter-arrival gaps and query work for one client.
    Arrivals = 1,
    /// Probe targets, tie-breaks, and rounding for one client.
    Policy = 2,
    /// Wire latencies of one client's probes.
    Network = 3,
    /// One machine's antagonist trajectory.
    Antagonist = 4,
}

/// A ChaCha8 generator for stream `kind` of entity `id` under `seed`.
///
/// Streams for different `(kind, id)` pairs never overlap, and the same
/// triple always yields the same sequence.
pub fn stream(seed: u64, kind: Stream, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | id as u64);
    rng
}

/// Seed for replicate `index` of a sweep started from `master`.
pub fn run_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
