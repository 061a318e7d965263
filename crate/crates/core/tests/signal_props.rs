use std::collections::{BTreeMap, VecDeque};

use proptest::prelude::*;

use prequal::metrics::Histogram;
use prequal::signals::SignalsConfig;
use prequal::ServerLoadTracker;

const CASES: u32 = 10_000;

/// Reference model of the tracker's latency estimate built from scratch.
fn oracle(
    cfg: &SignalsConfig,
    samples: &[(u32, u64, u64)],
    rif: u32,
    now: u64,
) -> u64 {
    let mut buckets: BTreeMap<u32, VecDeque<(u64, u64)>> = BTreeMap::new();
    for &(tag, lat, at) in samples {
        let b = buckets.entry(tag).or_default();
        if b.len() == cfg.bucket_capacity {
            b.pop_front();
        }
        b.push_back((lat, at));
    }
    let fresh = |tag: i64| -> Vec<u64> {
        if tag < 0 {
            return Vec::new();
        }
        buckets
            .get(&(tag as u32))
            .map(|b| {
                b.iter()
                    .filter(|&&(_, at)| at <= now && at + cfg.sample_window_us >= now)
                    .map(|&(l, _)| l)
                    .collect()
            })
            .unwrap_or_default()
    };
    let c = rif as i64;
    let mut pick = fresh(c);
    let mut radius = 1;
    while pick.len() < cfg.min_samples && radius <= cfg.max_radius as i64 {
        pick.extend(fresh(c - radius));
        pick.extend(fresh(c + radius));
        radius += 1;
    }
    if pick.len() < cfg.min_samples {
        pick = buckets.keys().flat_map(|&t| fresh(t as i64)).collect();
    }
    if pick.is_empty() {
        return cfg.default_latency_us;
    }
    pick.sort_unstable();
    pick[(pick.len() - 1) / 2]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn estimate_is_median_of_fresh_nearby_samples(
        samples in prop::collection::vec((0u32..10, 1u64..100_000, 0u64..3_000_000), 0..50),
        extra_rif in 0u32..10,
        now in 0u64..3_000_000,
    ) {
        let cfg = SignalsConfig::default();
        let mut t = ServerLoadTracker::new(cfg.clone());
        for _ in 0..samples.len() as u32 + extra_rif {
            t.on_query_arrive(0);
        }
        for &(tag, lat, at) in &samples {
            t.on_query_finish(tag, lat, at);
        }
        let (rif, est) = t.answer_probe(now);
        prop_assert_eq!(rif, extra_rif);
        prop_assert_eq!(est, oracle(&cfg, &samples, rif, now));
    }

    #[test]
    fn bookkeeping_touches_constant_slots(ops in prop::collection::vec((any::<bool>(), 0u32..64), 1..300)) {
        let mut t = ServerLoadTracker::new(SignalsConfig::default());
        let mut live = 0u32;
        for (arrive, tag) in ops {
            let before = t.slot_touches();
            if arrive || live == 0 {
                t.on_query_arrive(0);
                live += 1;
            } else {
                t.on_query_finish(tag, 1_000, 0);
                live -= 1;
            }
            prop_assert!(t.slot_touches() - before <= 2);
        }
    }

    #[test]
    fn latency_quantiles_are_monotone(
        values in prop::collection::vec(1.0f64..2e7, 1..300),
        q1 in 0.0f64..=1.0,
        q2 in 0.0f64..=1.0,
    ) {
        let mut h = Histogram::latency();
        for v in values {
            h.record(v);
        }
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(h.quantile(lo).unwrap() <= h.quantile(hi).unwrap());
    }
}
