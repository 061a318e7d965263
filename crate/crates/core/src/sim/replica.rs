//! Egalitarian processor-sharing execution on one server replica.
//!
//! Every active query progresses at `rate / k` core-seconds per second, where
//! `k` is the number of active queries and `rate` comes from
//! [`replica_service_rate`] with a demand of `min(k, threads_cap)` cores.
//! Progress is tracked with a shared virtual clock: each query finishes once
//! the per-query attained service passes its arrival value plus its work.

use std::collections::{BTreeSet, HashMap};

use ordered_float::OrderedFloat;

use super::machine::{replica_service_rate, Machine};
use crate::signals::{ServerLoadTracker, SignalsConfig};
use crate::types::{Micros, ReplicaId, MICROS_PER_SEC};

pub type QueryId = u64;

/// Progress below this many core-seconds counts as done.
const WORK_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveQuery {
    pub id: QueryId,
    pub client: u32,
    pub arrival: Micros,
    pub arrival_rif: u32,
    pub work: f64,
    /// Step the query is measured under, if it arrived inside a measurement window.
    pub step: Option<usize>,
    finish_vtime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finished {
    pub query: ActiveQuery,
    pub finish_time: Micros,
}

#[derive(Debug, Clone)]
pub struct ServerReplica {
    pub id: ReplicaId,
    pub tracker: ServerLoadTracker,
    threads_cap: u32,
    vtime: f64,
    order: BTreeSet<(OrderedFloat<f64>, QueryId)>,
    active: HashMap<QueryId, ActiveQuery>,
    last_update: Micros,
    cpu_used: f64,
    /// Bumped whenever the projected next finish may have changed.
    pub version: u64,
}

impl ServerReplica {
    pub fn new(id: ReplicaId, signals: SignalsConfig, threads_cap: u32) -> Self {
        assert!(threads_cap >= 1);
        ServerReplica {
            id,
            tracker: ServerLoadTracker::new(signals),
            threads_cap,
            vtime: 0.0,
            order: BTreeSet::new(),
            active: HashMap::new(),
            last_update: 0,
            cpu_used: 0.0,
            version: 0,
        }
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn contains(&self, id: QueryId) -> bool {
        self.active.contains_key(&id)
    }

    /// Core-seconds consumed since construction, including probe overhead.
    pub fn cpu_used(&self) -> f64 {
        self.cpu_used
    }

    pub fn last_update(&self) -> Micros {
        self.last_update
    }

    /// Cores the replica draws right now on `machine`.
    pub fn current_rate(&self, machine: &Machine) -> f64 {
        let k = self.active.len() as u32;
        replica_service_rate(machine, k.min(self.threads_cap) as f64)
    }

    /// Runs the replica forward to `now` under a machine state that is
    /// constant over the interval, returning every query that completed.
    pub fn advance_to(&mut self, now: Micros, machine: &Machine) -> Vec<Finished> {
        assert!(now >= self.last_update, "time went backwards on {}", self.id);
        let mut done = Vec::new();
        let mut t = self.last_update as f64 / MICROS_PER_SEC as f64;
        let end = now as f64 / MICROS_PER_SEC as f64;
        while let Some(&(finish_v, qid)) = self.order.first() {
            let rate = self.current_rate(machine);
            let k = self.active.len() as f64;
            if rate <= 0.0 {
                break;
            }
            let per_query = rate / k;
            let need = (finish_v.0 - self.vtime).max(0.0);
            let dt = need / per_query;
            if t + dt <= end + 1e-9 {
                self.vtime = finish_v.0.max(self.vtime);
                self.cpu_used += rate * dt;
                t += dt;
                self.order.pop_first();
                let q = self.active.remove(&qid).expect("ordered query is active");
                let finish_time = ((t * MICROS_PER_SEC as f64).ceil() as Micros).clamp(q.arrival, now);
                done.push(Finished {
                    query: q,
                    finish_time,
                });
            } else {
                let dt = end - t;
                self.vtime += per_query * dt;
                self.cpu_used += rate * dt;
                break;
            }
        }
        self.last_update = now;
        done
    }

    /// Advances by `dt` from the replica's last update.
    pub fn advance_processor_sharing(&mut self, machine: &Machine, dt: Micros) -> Vec<Finished> {
        let now = self.last_update + dt;
        self.advance_to(now, machine)
    }

    /// Admits a query. The caller must have advanced the replica to `now`.
    pub fn admit(&mut self, id: QueryId, client: u32, work: f64, now: Micros, step: Option<usize>) -> u32 {
        debug_assert_eq!(self.last_update, now);
        assert!(work > 0.0, "query work must be positive");
        let arrival_rif = self.tracker.on_query_arrive(now);
        let finish_vtime = self.vtime + work;
        self.order.insert((OrderedFloat(finish_vtime), id));
        self.active.insert(
            id,
            ActiveQuery {
                id,
                client,
                arrival: now,
                arrival_rif,
                work,
                step,
                finish_vtime,
            },
        );
        self.version += 1;
        arrival_rif
    }

    /// Completes bookkeeping for a finished query on the load tracker.
    pub fn record_finish(&mut self, f: &Finished) {
        self.tracker
            .on_query_finish(f.query.arrival_rif, f.finish_time - f.query.arrival, f.finish_time);
        self.version += 1;
    }

    /// Terminates an unfinished query. The caller must have advanced the
    /// replica to the current time.
    pub fn abort(&mut self, id: QueryId) -> Option<ActiveQuery> {
        let q = self.active.remove(&id)?;
        self.order.remove(&(OrderedFloat(q.finish_vtime), id));
        self.tracker.on_query_abort();
        self.version += 1;
        Some(q)
    }

    /// Charges `core_seconds` of side work (answering a probe). Active
    /// queries are delayed by sharing the cost evenly.
    pub fn charge_overhead(&mut self, core_seconds: f64) {
        if core_seconds <= 0.0 {
            return;
        }
        if self.active.is_empty() {
            self.cpu_used += core_seconds;
        } else {
            self.vtime -= core_seconds / self.active.len() as f64;
            self.version += 1;
        }
    }

    /// Projected time of the next completion if nothing else changes.
    pub fn next_finish_time(&self, machine: &Machine) -> Option<Micros> {
        let &(finish_v, _) = self.order.first()?;
        let rate = self.current_rate(machine);
        if rate <= 0.0 {
            return None;
        }
        let per_query = rate / self.active.len() as f64;
        let dt = ((finish_v.0 - self.vtime).max(0.0) / per_query).max(0.0);
        let dt_us = (dt * MICROS_PER_SEC as f64 - WORK_EPSILON).ceil().max(0.0);
        Some(self.last_update + dt_us as Micros)
    }

    /// Work already done on each active query, in core-seconds.
    pub fn attained(&self, id: QueryId) -> Option<f64> {
        self.active
            .get(&id)
            .map(|q| q.work - (q.finish_vtime - self.vtime))
    }
}
