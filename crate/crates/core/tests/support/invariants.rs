//! Randomized invariant suites run by the acceptance target.
//!
//! Each suite returns `Err` with the minimal failing input on violation.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prequal::cli::{run_experiment, RunConfig};
use prequal::metrics::Histogram;
use prequal::probe_pool::{round_budget, RifThreshold};
use prequal::selection::hcl_select;
use prequal::signals::SignalsConfig;
use prequal::sim::{Finished, Machine, ServerReplica};
use prequal::workload::Experiment;
use prequal::{compute_reuse_budget, PrequalConfig, ProbePool, ProbeResponse, ReplicaId, ServerLoadTracker};

pub const CASES: u32 = 10_000;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn response(replica: u32, rif: u32, latency: u64, at: u64) -> ProbeResponse {
    ProbeResponse {
        replica: ReplicaId(replica),
        rif,
        latency_estimate: latency,
        received_at: at,
    }
}

#[derive(Debug, Clone)]
enum PoolOp {
    Probe { replica: u32, rif: u32, latency: u64, gap: u64 },
    Send { replica: u32 },
    Expire { gap: u64 },
}

fn pool_op() -> impl Strategy<Value = PoolOp> {
    prop_oneof![
        3 => (0u32..24, 0u32..40, 1u64..50_000, 0u64..200_000)
            .prop_map(|(replica, rif, latency, gap)| PoolOp::Probe { replica, rif, latency, gap }),
        3 => (0u32..24).prop_map(|replica| PoolOp::Send { replica }),
        1 => (0u64..600_000).prop_map(|gap| PoolOp::Expire { gap }),
    ]
}

fn pool_cfg() -> impl Strategy<Value = PrequalConfig> {
    (1usize..20, 0.25f64..5.0, 0.0f64..2.0, 0.0f64..=1.0, 1usize..64).prop_map(
        |(m, r_probe, r_remove, q_rif, rif_window)| PrequalConfig {
            max_pool_size: m,
            r_probe,
            r_remove,
            q_rif,
            rif_window,
            n_replicas: 24,
            age_limit_us: 500_000,
            ..PrequalConfig::default()
        },
    )
}

/// Pool size never exceeds `m`; no entry with zero uses or past its age
/// limit survives maintenance; one entry per replica.
pub fn pool_cap_and_no_zombies(cases: u32) -> Result<(), String> {
    let strat = (pool_cfg(), prop::collection::vec(pool_op(), 1..120), any::<u64>());
    runner(cases)
        .run(&strat, |(cfg, ops, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool = ProbePool::new();
            let budget = compute_reuse_budget(&cfg);
            let mut now = 0u64;
            for op in ops {
                match op {
                    PoolOp::Probe { replica, rif, latency, gap } => {
                        now += gap;
                        pool.add_probe(response(replica, rif, latency, now), &cfg, budget, &mut rng);
                    }
                    PoolOp::Send { replica } => pool.on_query_sent(ReplicaId(replica), &cfg),
                    PoolOp::Expire { gap } => {
                        now += gap;
                        pool.expire(now, &cfg);
                        for e in pool.entries() {
                            prop_assert!(now - e.response.received_at <= cfg.age_limit_us);
                        }
                    }
                }
                prop_assert!(pool.len() <= cfg.max_pool_size);
                prop_assert!(pool.entries().iter().all(|e| e.uses_remaining >= 1));
                let mut ids: Vec<_> = pool.entries().iter().map(|e| e.replica()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), pool.len());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Probes issued and removal turns stay within one of `t * rate` after every
/// prefix of `t` queries.
pub fn rate_exactness(cases: u32) -> Result<(), String> {
    let strat = (0.05f64..8.0, 0.0f64..3.0, 1usize..400);
    runner(cases)
        .run(&strat, |(r_probe, r_remove, queries)| {
            let cfg = PrequalConfig {
                r_probe,
                r_remove,
                ..PrequalConfig::default()
            };
            let mut pool = ProbePool::new();
            let mut probes = 0usize;
            for q in 1..=queries {
                probes += pool.probes_for_query(&cfg);
                pool.on_query_sent(ReplicaId(0), &cfg);
                let t = q as f64;
                prop_assert!((probes as f64 - t * r_probe).abs() <= 1.0 + 1e-9);
                let removals = pool.stats().removal_turns as f64;
                prop_assert!((removals - t * r_remove).abs() <= 1.0 + 1e-9);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Randomized rounding lands on a neighbor and averages within 1% of the
/// budget over 10^5 draws.
pub fn rounding_expectation(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(1.0f64..64.0, any::<u64>()), |(budget, seed)| {
            const TRIALS: u32 = 100_000;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = (budget.floor() as u32, budget.ceil() as u32);
            let mut sum = 0u64;
            for _ in 0..TRIALS {
                let u = round_budget(budget, &mut rng);
                prop_assert!(u == lo || u == hi);
                sum += u as u64;
            }
            let mean = sum as f64 / TRIALS as f64;
            prop_assert!((mean - budget).abs() <= 0.01 * budget, "mean {} budget {}", mean, budget);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn nearest_rank(values: &[u32], q: f64) -> u32 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// The hot threshold equals a sort-and-index nearest-rank quantile of the
/// most recent `rif_window` probe RIFs.
pub fn rif_threshold_nearest_rank(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(0u32..200, 1..300), 1usize..200, 0usize..6);
    runner(cases)
        .run(&strat, |(rifs, window, qi)| {
            let q = [0.0, 0.25, 0.5, 0.75, 0.9, 0.999][qi];
            let cfg = PrequalConfig {
                q_rif: q,
                rif_window: window,
                max_pool_size: 4,
                ..PrequalConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut pool = ProbePool::new();
            for (i, &r) in rifs.iter().enumerate() {
                pool.add_probe(response(i as u32 % 50, r, 1_000, i as u64), &cfg, 2.0, &mut rng);
            }
            let recent = &rifs[rifs.len().saturating_sub(window)..];
            prop_assert_eq!(pool.rif_threshold(&cfg), RifThreshold::Finite(nearest_rank(recent, q)));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Smeared RIF quantiles stay within 1/2 of the exact order statistic.
pub fn smeared_quantile_bound(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(0u32..60, 1..400), 0.0f64..=1.0);
    runner(cases)
        .run(&strat, |(values, q)| {
            let mut smeared = Histogram::integer(true);
            let mut exact = Histogram::integer(false);
            for &v in &values {
                smeared.record(v as f64);
                exact.record(v as f64);
            }
            let mut sorted = values.clone();
            sorted.sort_unstable();
            let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            let order_stat = sorted[rank - 1] as f64;
            prop_assert_eq!(exact.quantile(q).unwrap(), order_stat);
            let s = smeared.quantile(q).unwrap();
            prop_assert!((s - order_stat).abs() <= 0.5 + 1e-12, "smeared {} exact {}", s, order_stat);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// RIF never goes negative and returns to zero once every query finishes.
pub fn rif_conservation(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&prop::collection::vec(any::<bool>(), 0..200), |order| {
            let mut t = ServerLoadTracker::new(SignalsConfig::default());
            let mut tags = Vec::new();
            let n = order.len();
            for (i, &arrive) in order.iter().enumerate() {
                if arrive || tags.is_empty() {
                    tags.push(t.on_query_arrive(i as u64));
                } else {
                    let tag = tags.pop().unwrap();
                    t.on_query_finish(tag, 1_000, i as u64);
                }
                prop_assert_eq!(t.rif() as usize, tags.len());
            }
            while let Some(tag) = tags.pop() {
                t.on_query_finish(tag, 1_000, n as u64);
            }
            prop_assert_eq!(t.rif(), 0);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
enum ReplicaOp {
    Admit { gap: u64, work: f64, antagonist: f64 },
    Abort,
}

fn replica_op() -> impl Strategy<Value = ReplicaOp> {
    prop_oneof![
        6 => (0u64..20_000, 1e-5f64..0.05, 0.0f64..1.0)
            .prop_map(|(gap, work, antagonist)| ReplicaOp::Admit { gap, work, antagonist }),
        1 => Just(ReplicaOp::Abort),
    ]
}

/// A replica burns exactly the work of the queries it finishes plus the
/// service already given to aborted ones, and its tracker RIF always equals
/// the number of active queries.
pub fn work_conservation(cases: u32) -> Result<(), String> {
    let strat = (
        prop::collection::vec(replica_op(), 1..60),
        0.5f64..4.0,
        0.05f64..1.0,
        0.1f64..=1.0,
        1u32..6,
    );
    runner(cases)
        .run(&strat, |(ops, capacity, alloc_frac, hobble, threads_cap)| {
            let mut machine = Machine::new(capacity, capacity * alloc_frac);
            machine.hobble_penalty = hobble;
            let mut rep = ServerReplica::new(ReplicaId(0), SignalsConfig::default(), threads_cap);
            let mut now = 0u64;
            let mut next_id = 0u64;
            let mut live: Vec<u64> = Vec::new();
            let mut expected = 0.0;
            let finish = |rep: &mut ServerReplica, done: Vec<Finished>, live: &mut Vec<u64>| {
                let mut w = 0.0;
                for f in done {
                    let q = &f.query;
                    // A query never gets more than one core.
                    assert!(f.finish_time as f64 >= q.arrival as f64 + q.work * 1e6 - 1.0);
                    live.retain(|&id| id != q.id);
                    w += q.work;
                    rep.record_finish(&f);
                }
                w
            };
            for op in ops {
                match op {
                    ReplicaOp::Admit { gap, work, antagonist } => {
                        now += gap;
                        let done = rep.advance_to(now, &machine);
                        expected += finish(&mut rep, done, &mut live);
                        machine.antagonist_demand = antagonist * capacity;
                        rep.admit(next_id, 0, work, now, None);
                        live.push(next_id);
                        next_id += 1;
                    }
                    ReplicaOp::Abort => {
                        if let Some(&id) = live.first() {
                            expected += rep.attained(id).unwrap();
                            rep.abort(id).unwrap();
                            live.remove(0);
                        }
                    }
                }
                prop_assert_eq!(rep.tracker.rif() as usize, rep.active_len());
            }
            let done = rep.advance_to(now + 10_000_000_000, &machine);
            expected += finish(&mut rep, done, &mut live);
            prop_assert_eq!(rep.active_len(), 0);
            prop_assert_eq!(rep.tracker.rif(), 0);
            let consumed = rep.cpu_used();
            prop_assert!(
                (consumed - expected).abs() <= 1e-9 * (1.0 + expected),
                "{} vs {}",
                consumed,
                expected
            );
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A small but complete configuration of `experiment`.
pub fn tiny(experiment: Experiment, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(experiment);
    cfg.seed = seed;
    cfg.workload.n_clients = 3;
    cfg.workload.n_servers = 4;
    cfg.workload.step_duration_s = 0.3;
    cfg.workload.warmup_s = 0.1;
    cfg.prequal.max_pool_size = 2;
    cfg
}

/// Two runs of the same configuration and seed produce byte-identical CSVs.
pub fn seed_determinism(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), 0usize..Experiment::ALL.len());
    runner(cases)
        .run(&strat, |(seed, e)| {
            let experiment = Experiment::ALL[e];
            let a = run_experiment(tiny(experiment, seed), 1).unwrap().csv();
            let b = run_experiment(tiny(experiment, seed), 1).unwrap().csv();
            prop_assert_eq!(a, b);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Counts mismatches between the hot-cold rule at Q_RIF = 0 and 1 and the
/// single-signal argmins, over `pools` random pools.
pub fn hcl_endpoint_mismatches(pools: u32, seed: u64) -> (u32, u32) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replicas: Vec<_> = (0..100).map(ReplicaId).collect();
    let mut mismatches = (0, 0);
    for _ in 0..pools {
        let size = rng.random_range(1..=16);
        let probes: Vec<(u32, u32, u64)> = (0..size)
            .map(|_| {
                (
                    rng.random_range(0..100),
                    rng.random_range(0..30),
                    // Coarse latencies make ties common.
                    rng.random_range(1..40) * 1_000,
                )
            })
            .collect();
        for (k, q_rif) in [0.0, 1.0].into_iter().enumerate() {
            let cfg = PrequalConfig {
                q_rif,
                min_occupancy: 1,
                max_pool_size: 16,
                ..PrequalConfig::default()
            };
            let mut pool = ProbePool::new();
            for (i, &(r, rif, lat)) in probes.iter().enumerate() {
                pool.add_probe(response(r, rif, lat, i as u64), &cfg, 4.0, &mut rng);
            }
            let theta = pool.rif_threshold(&cfg);
            let chosen = hcl_select(&pool, theta, &cfg, &replicas, &mut rng);
            let e = pool.entries();
            let expected = if k == 0 {
                e.iter().min_by_key(|e| (e.effective_rif, e.latency(), e.replica()))
            } else {
                e.iter().min_by_key(|e| (e.latency(), e.effective_rif, e.replica()))
            };
            if chosen != expected.unwrap().replica() {
                if k == 0 {
                    mismatches.0 += 1;
                } else {
                    mismatches.1 += 1;
                }
            }
        }
    }
    mismatches
}
