//! Streaming histograms, CPU-utilization windows, and per-step summaries.
//!
//! Latency histograms are log-spaced (100 buckets per decade between 100 µs
//! and 10 s). RIF histograms use unit-width buckets and, like most monitoring
//! systems, can smear each integer `k` uniformly over `[k - 1/2, k + 1/2)`,
//! which is why RIF quantiles come out fractional.

use std::io::Write;

use serde::Serialize;

use crate::selection::PolicyKind;

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    /// Bucket `i` covers `[min * 10^(i/per_decade), min * 10^((i+1)/per_decade))`.
    Log { min: f64, per_decade: u32 },
    /// Bucket `k` holds the integer value `k`.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    layout: Layout,
    counts: Vec<u64>,
    total: u64,
    smear_integers: bool,
}

pub const LATENCY_MIN_US: f64 = 100.0;
pub const LATENCY_MAX_US: f64 = 10_000_000.0;
pub const LATENCY_BUCKETS_PER_DECADE: u32 = 100;

impl Histogram {
    /// Log-spaced latency histogram in microseconds. Values outside
    /// `[100 µs, 10 s)` are clamped into the end buckets.
    pub fn latency() -> Self {
        let decades = (LATENCY_MAX_US / LATENCY_MIN_US).log10().round() as usize;
        Histogram {
            layout: Layout::Log {
                min: LATENCY_MIN_US,
                per_decade: LATENCY_BUCKETS_PER_DECADE,
            },
            counts: vec![0; decades * LATENCY_BUCKETS_PER_DECADE as usize],
            total: 0,
            smear_integers: false,
        }
    }

    /// Unit-width histogram for integer observations such as RIF.
    pub fn integer(smear_integers: bool) -> Self {
        Histogram {
            layout: Layout::Unit,
            counts: Vec::new(),
            total: 0,
            smear_integers,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn record(&mut self, value: f64) {
        self.record_n(value, 1);
    }

    pub fn record_n(&mut self, value: f64, n: u64) {
        let idx = match self.layout {
            Layout::Log { min, per_decade } => {
                let v = value.max(min);
                let i = ((v / min).log10() * per_decade as f64).floor() as usize;
                i.min(self.counts.len() - 1)
            }
            Layout::Unit => {
                let k = value.round().max(0.0) as usize;
                if self.counts.len() <= k {
                    self.counts.resize(k + 1, 0);
                }
                k
            }
        };
        self.counts[idx] += n;
        self.total += n;
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.layout, other.layout, "merging incompatible histograms");
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    fn bounds(&self, i: usize) -> (f64, f64) {
        match self.layout {
            Layout::Log { min, per_decade } => (
                min * 10f64.powf(i as f64 / per_decade as f64),
                min * 10f64.powf((i + 1) as f64 / per_decade as f64),
            ),
            Layout::Unit => (i as f64 - 0.5, i as f64 + 0.5),
        }
    }

    /// Value at cumulative fraction `q`, or `None` when empty.
    ///
    /// Mass inside a bucket is spread uniformly across it and the result is
    /// interpolated linearly. An unsmeared integer histogram returns the
    /// exact nearest-rank order statistic instead.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let q = q.clamp(0.0, 1.0);
        if self.layout == Layout::Unit && !self.smear_integers {
            let rank = ((q * self.total as f64).ceil() as u64).max(1);
            let mut cum = 0;
            for (k, &c) in self.counts.iter().enumerate() {
                cum += c;
                if cum >= rank {
                    return Some(k as f64);
                }
            }
            unreachable!("rank within total");
        }
        let target = q * self.total as f64;
        let mut cum = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let next = cum + c as f64;
            if next >= target {
                let (lo, hi) = self.bounds(i);
                let frac = ((target - cum) / c as f64).clamp(0.0, 1.0);
                return Some(lo + frac * (hi - lo));
            }
            cum = next;
        }
        let last = self.counts.iter().rposition(|&c| c > 0).expect("non-empty");
        Some(self.bounds(last).1)
    }

    pub fn mean(&self) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let s: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (lo, hi) = self.bounds(i);
                c as f64 * (lo + hi) / 2.0
            })
            .sum();
        Some(s / self.total as f64)
    }
}

/// Per-replica utilization (fraction of allocation) for consecutive windows.
///
/// `per_second[r][t]` is the core-seconds replica `r` consumed during second
/// `t`. Returns one row per complete window of `window_s` seconds, each row
/// holding one utilization value per replica. A trailing partial window is
/// dropped.
pub fn cpu_windows(per_second: &[Vec<f64>], window_s: usize, allocation: f64) -> Vec<Vec<f64>> {
    assert!(window_s >= 1 && allocation > 0.0);
    let len = per_second.iter().map(Vec::len).min().unwrap_or(0);
    (0..len / window_s)
        .map(|w| {
            per_second
                .iter()
                .map(|series| {
                    let used: f64 = series[w * window_s..(w + 1) * window_s].iter().sum();
                    used / (allocation * window_s as f64)
                })
                .collect()
        })
        .collect()
}

/// Linear-interpolated sample quantile of unsorted data.
pub fn sample_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Raw accumulation for one schedule step (after warm-up).
#[derive(Debug, Clone)]
pub struct StepCollector {
    pub latency: Histogram,
    pub rif: Histogram,
    pub completed: u64,
    pub errors: u64,
    pub arrivals: u64,
    /// `cpu_per_second[r]` = core-seconds used by replica `r` in each
    /// measured second.
    pub cpu_per_second: Vec<Vec<f64>>,
    pub theta_sum: f64,
    pub theta_samples: u64,
    pub probes_sent: u64,
    pub measured_us: u64,
}

impl StepCollector {
    pub fn new(n_replicas: usize) -> Self {
        StepCollector {
            latency: Histogram::latency(),
            rif: Histogram::integer(true),
            completed: 0,
            errors: 0,
            arrivals: 0,
            cpu_per_second: vec![Vec::new(); n_replicas],
            theta_sum: 0.0,
            theta_samples: 0,
            probes_sent: 0,
            measured_us: 0,
        }
    }
}

pub const LATENCY_QUANTILES: [(f64, &str); 4] =
    [(0.5, "p50"), (0.9, "p90"), (0.99, "p99"), (0.999, "p99.9")];
pub const RIF_QUANTILES: [(f64, &str); 3] = [(0.5, "p50"), (0.9, "p90"), (0.99, "p99")];
pub const CPU_QUANTILES: [(f64, &str); 5] =
    [(0.1, "p10"), (0.25, "p25"), (0.5, "p50"), (0.75, "p75"), (0.9, "p90")];

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: usize,
    pub step: usize,
    pub policy: PolicyKind,
    pub metric: String,
    pub quantile_or_window: String,
    pub value: f64,
    pub unit: &'static str,
}

pub const CSV_HEADER: &str = "run_id,step,policy,metric,quantile_or_window,value,unit";

pub fn write_csv<W: Write>(out: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.run_id, r.step, r.policy, r.metric, r.quantile_or_window, r.value, r.unit
        )?;
    }
    Ok(())
}
