//! Server-side load signals.
//!
//! A [`ServerLoadTracker`] lives on every server replica. It counts requests in
//! flight (RIF) and keeps, per RIF value, a small ring of recent query
//! latencies. Each completed query is filed under the RIF the server had when
//! that query arrived, so a probe can ask "how long do queries take when this
//! server is about as busy as it is now?".

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::types::{Micros, ReplicaId, MICROS_PER_MS, MICROS_PER_SEC};

/// Tunables for latency estimation on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalsConfig {
    /// Ring capacity per RIF bucket.
    pub bucket_capacity: usize,
    /// Only samples that finished within this window of the probe count.
    pub sample_window_us: Micros,
    /// Stop widening the RIF neighbourhood once this many samples are found.
    pub min_samples: usize,
    /// Largest RIF distance searched before falling back to every bucket.
    pub max_radius: u32,
    /// Estimate reported before any query has finished.
    pub default_latency_us: Micros,
}

impl Default for SignalsConfig {
    fn default() -> Self {
        SignalsConfig {
            bucket_capacity: 32,
            sample_window_us: MICROS_PER_SEC,
            min_samples: 5,
            max_radius: 3,
            default_latency_us: MICROS_PER_MS,
        }
    }
}

/// One server's answer to a probe, as seen by the client that sent it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResponse {
    pub replica: ReplicaId,
    pub rif: u32,
    pub latency_estimate: Micros,
    pub received_at: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sample {
    finish_time: Micros,
    latency: Micros,
}

/// RIF counter plus RIF-tagged latency history for one server replica.
#[derive(Debug, Clone)]
pub struct ServerLoadTracker {
    rif: u32,
    buckets: Vec<VecDeque<Sample>>,
    cfg: SignalsConfig,
    arrivals: u64,
    finishes: u64,
    slot_touches: u64,
}

impl ServerLoadTracker {
    pub fn new(cfg: SignalsConfig) -> Self {
        assert!(cfg.bucket_capacity >= 1, "bucket capacity must be positive");
        ServerLoadTracker {
            rif: 0,
            buckets: Vec::new(),
            cfg,
            arrivals: 0,
            finishes: 0,
            slot_touches: 0,
        }
    }

    pub fn rif(&self) -> u32 {
        self.rif
    }

    pub fn config(&self) -> &SignalsConfig {
        &self.cfg
    }

    /// Buffer slots written or evicted by arrive/finish/abort since construction.
    /// Used to check that bookkeeping stays O(1) per query.
    pub fn slot_touches(&self) -> u64 {
        self.slot_touches
    }

    /// Number of samples currently stored under `rif_tag`.
    pub fn bucket_len(&self, rif_tag: u32) -> usize {
        self.buckets.get(rif_tag as usize).map_or(0, VecDeque::len)
    }

    /// Latencies stored under `rif_tag`, oldest first.
    pub fn bucket_latencies(&self, rif_tag: u32) -> Vec<Micros> {
        self.buckets
            .get(rif_tag as usize)
            .map(|b| b.iter().map(|s| s.latency).collect())
            .unwrap_or_default()
    }

    /// Registers an arriving query and returns its RIF tag, which counts the
    /// query itself.
    pub fn on_query_arrive(&mut self, _now: Micros) -> u32 {
        self.rif += 1;
        self.arrivals += 1;
        self.slot_touches += 1;
        self.rif
    }

    /// Records a completed query under the tag returned at its arrival.
    ///
    /// Panics if no query is in flight.
    pub fn on_query_finish(&mut self, arrival_rif: u32, latency: Micros, now: Micros) {
        assert!(self.rif >= 1, "query finished on a server with zero RIF");
        self.rif -= 1;
        self.finishes += 1;
        let idx = arrival_rif as usize;
        if self.buckets.len() <= idx {
            self.buckets.resize_with(idx + 1, VecDeque::new);
        }
        let cap = self.cfg.bucket_capacity;
        let bucket = &mut self.buckets[idx];
        if bucket.len() == cap {
            bucket.pop_front();
            self.slot_touches += 1;
        }
        bucket.push_back(Sample {
            finish_time: now,
            latency,
        });
        self.slot_touches += 1;
    }

    /// Removes a query that was terminated without completing (deadline
    /// exceeded). No latency sample is recorded.
    pub fn on_query_abort(&mut self) {
        assert!(self.rif >= 1, "query aborted on a server with zero RIF");
        self.rif -= 1;
        self.finishes += 1;
        self.slot_touches += 1;
    }

    /// Current RIF and the median recent latency near that RIF.
    pub fn answer_probe(&self, now: Micros) -> (u32, Micros) {
        (self.rif, self.latency_estimate(now))
    }

    fn in_window(&self, s: &Sample, now: Micros) -> bool {
        s.finish_time <= now && s.finish_time + self.cfg.sample_window_us >= now
    }

    fn collect_bucket(&self, tag: i64, now: Micros, out: &mut Vec<Micros>) {
        if tag < 0 {
            return;
        }
        if let Some(b) = self.buckets.get(tag as usize) {
            out.extend(
                b.iter()
                    .filter(|s| self.in_window(s, now))
                    .map(|s| s.latency),
            );
        }
    }

    fn latency_estimate(&self, now: Micros) -> Micros {
        let center = self.rif as i64;
        let mut eligible = Vec::with_capacity(self.cfg.min_samples * 2);
        self.collect_bucket(center, now, &mut eligible);
        let mut radius = 1;
        while eligible.len() < self.cfg.min_samples && radius <= self.cfg.max_radius as i64 {
            self.collect_bucket(center - radius, now, &mut eligible);
            self.collect_bucket(center + radius, now, &mut eligible);
            radius += 1;
        }
        if eligible.len() < self.cfg.min_samples {
            eligible.clear();
            for tag in 0..self.buckets.len() {
                self.collect_bucket(tag as i64, now, &mut eligible);
            }
        }
        lower_median(&mut eligible).unwrap_or(self.cfg.default_latency_us)
    }
}

/// Median taking the lower of the two middle elements for even counts.
pub(crate) fn lower_median(values: &mut [Micros]) -> Option<Micros> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable(mid);
    Some(*m)
}
