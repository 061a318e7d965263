//! The discrete-event loop.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::machine::{antagonist_step, AntagonistConfig, Machine};
use super::replica::{ActiveQuery, Finished, QueryId, ServerReplica};
use crate::error::{ConfigError, Error, Result};
use crate::metrics::StepCollector;
use crate::probe_pool::{compute_reuse_budget, pick_probe_targets, PrequalConfig, ProbePool, RifThreshold};
use crate::rng::{stream, Stream};
use crate::selection::{compute_wrr_weights, ClientPolicyState, LinearParams, PolicyKind, WrrTable};
use crate::signals::{ProbeResponse, SignalsConfig};
use crate::types::{Micros, ReplicaId, MICROS_PER_MS, MICROS_PER_SEC};
use crate::workload::{draw_base_work, ArrivalProcess, Step, WorkloadConfig};

/// Testbed constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Cores per machine.
    pub capacity: f64,
    /// Cores guaranteed to each server replica.
    pub allocation: f64,
    /// Most cores one replica can draw at once.
    pub threads_cap: u32,
    /// Rate multiplier for replicas on oversubscribed machines.
    pub hobble_penalty: f64,
    /// Core-seconds a server spends answering one probe.
    pub probe_cpu_cost: f64,
    pub wire_latency_min_us: Micros,
    pub wire_latency_max_us: Micros,
    pub probe_timeout_us: Micros,
    pub deadline_us: Micros,
    pub antagonist: AntagonistConfig,
    pub yarp_poll_us: Micros,
    pub wrr_period_us: Micros,
    /// Seconds of history behind each WRR weight.
    pub wrr_window_s: usize,
    pub c3_smoothing: f64,
    /// Verify RIF consistency and the capacity law as the run proceeds.
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            capacity: 1.0,
            allocation: 0.1,
            threads_cap: 4,
            hobble_penalty: 1.0,
            probe_cpu_cost: 10e-6,
            wire_latency_min_us: 200,
            wire_latency_max_us: 500,
            probe_timeout_us: 3 * MICROS_PER_MS,
            deadline_us: 5 * MICROS_PER_SEC,
            antagonist: AntagonistConfig::default(),
            yarp_poll_us: 500 * MICROS_PER_MS,
            wrr_period_us: 10 * MICROS_PER_SEC,
            wrr_window_s: 30,
            c3_smoothing: crate::selection::DEFAULT_SMOOTHING,
            check_invariants: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: String| Err(ConfigError::invalid(k, m));
        if !(self.capacity > 0.0) {
            return bad("sim.capacity", format!("must be > 0, got {}", self.capacity));
        }
        if !(self.allocation > 0.0 && self.allocation <= self.capacity) {
            return bad(
                "sim.allocation",
                format!("must lie in (0, capacity], got {}", self.allocation),
            );
        }
        if self.threads_cap == 0 {
            return bad("sim.threads_cap", "must be >= 1".into());
        }
        if !(self.hobble_penalty > 0.0 && self.hobble_penalty <= 1.0) {
            return bad(
                "sim.hobble_penalty",
                format!("must lie in (0, 1], got {}", self.hobble_penalty),
            );
        }
        if !(self.probe_cpu_cost >= 0.0) {
            return bad("sim.probe_cpu_cost", "must be >= 0".into());
        }
        if self.wire_latency_min_us > self.wire_latency_max_us {
            return bad(
                "sim.wire_latency_min_us",
                "must not exceed wire_latency_max_us".into(),
            );
        }
        if self.deadline_us == 0 {
            return bad("sim.deadline_us", "must be > 0".into());
        }
        for (k, v) in [
            ("sim.yarp_poll_us", self.yarp_poll_us),
            ("sim.wrr_period_us", self.wrr_period_us),
        ] {
            if v == 0 {
                return bad(k, "must be > 0".into());
            }
        }
        if self.wrr_window_s == 0 {
            return bad("sim.wrr_window_s", "must be >= 1".into());
        }
        if !(self.c3_smoothing > 0.0 && self.c3_smoothing <= 1.0) {
            return bad(
                "sim.c3_smoothing",
                format!("must lie in (0, 1], got {}", self.c3_smoothing),
            );
        }
        self.antagonist.validate()
    }
}

/// Everything a single simulation needs.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub sim: SimConfig,
    pub workload: WorkloadConfig,
    pub prequal: PrequalConfig,
    pub signals: SignalsConfig,
    pub linear: LinearParams,
    pub steps: Vec<Step>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// One collector per schedule step, in order.
    pub steps: Vec<StepCollector>,
    pub events_processed: u64,
    /// Time the last event ran.
    pub end_time: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    /// Start of step `i`; `i == steps.len()` marks the end of the schedule.
    StepBoundary(usize),
    AntagonistTick,
    MetricTick,
    WrrRecompute,
    QueryFinish { replica: u32, version: u64 },
    Deadline { query: QueryId, replica: u32 },
    ProbeResponse { client: u32, replica: u32, rif: u32, latency: Micros, sent_at: Micros },
    ProbeArrival { client: u32, replica: u32, sent_at: Micros, back: Micros },
    YarpPoll { client: u32 },
    IdleProbe { client: u32 },
    QueryArrival { client: u32, version: u64 },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::StepBoundary(_) => 0,
            EventKind::AntagonistTick => 1,
            EventKind::MetricTick => 2,
            EventKind::WrrRecompute => 3,
            EventKind::QueryFinish { .. } => 4,
            EventKind::Deadline { .. } => 5,
            EventKind::ProbeResponse { .. } => 6,
            EventKind::ProbeArrival { .. } => 7,
            EventKind::YarpPoll { .. } => 8,
            EventKind::IdleProbe { .. } => 9,
            EventKind::QueryArrival { .. } => 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: Micros,
    rank: u8,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (Micros, u8, u64) {
        (self.time, self.rank, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

struct Client {
    state: ClientPolicyState,
    pool: ProbePool,
    arrivals: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    net: ChaCha8Rng,
    arrival_version: u64,
    last_query: Micros,
}

/// Per-step settings resolved from the schedule.
#[derive(Debug, Clone)]
struct ActiveStep {
    index: usize,
    measure_from: Micros,
    end: Micros,
    policy: PolicyKind,
    qps_per_client: f64,
    prequal: PrequalConfig,
    budget: f64,
    linear: LinearParams,
}

const TRACE_LEN: usize = 32;

pub struct Simulation {
    setup: SimSetup,
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Event>,
    machines: Vec<Machine>,
    replicas: Vec<ServerReplica>,
    antagonist_rngs: Vec<ChaCha8Rng>,
    clients: Vec<Client>,
    all_replicas: Vec<ReplicaId>,
    step_starts: Vec<Micros>,
    current: Option<ActiveStep>,
    schedule_end: Option<Micros>,
    collectors: Vec<StepCollector>,
    next_query: QueryId,
    last_cpu: Vec<f64>,
    completions_this_second: Vec<u64>,
    /// Trailing per-second (cpu, completions) history for WRR weights.
    wrr_history: VecDeque<(Vec<f64>, Vec<u64>)>,
    trace: VecDeque<Event>,
    events_processed: u64,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Result<Self> {
        setup.sim.validate()?;
        setup.workload.validate()?;
        setup.prequal.validate()?;
        if setup.steps.is_empty() {
            return Err(ConfigError::invalid("experiment", "schedule has no steps").into());
        }
        let n = setup.workload.n_servers;
        let n_clients = setup.workload.n_clients;
        let sim = &setup.sim;
        let mut antagonist_rngs: Vec<ChaCha8Rng> =
            (0..n).map(|i| stream(setup.seed, Stream::Antagonist, i as u32)).collect();
        let machines = antagonist_rngs
            .iter_mut()
            .map(|rng| {
                let mut m = Machine::new(sim.capacity, sim.allocation);
                m.hobble_penalty = sim.hobble_penalty;
                m.antagonist_base = sim.antagonist.draw_base(rng);
                antagonist_step(&mut m, &sim.antagonist, rng);
                m
            })
            .collect();
        let replicas = (0..n)
            .map(|i| ServerReplica::new(ReplicaId::from(i), setup.signals.clone(), sim.threads_cap))
            .collect();
        let clients = (0..n_clients)
            .map(|c| {
                let mut state = ClientPolicyState::new(setup.steps[0].policy, n, n_clients);
                state.c3 = crate::selection::C3State::new(n, n_clients, sim.c3_smoothing);
                state.linear = setup.linear;
                let mut policy_rng = stream(setup.seed, Stream::Policy, c as u32);
                // Cyclic rules start at a random offset so clients do not march in step.
                state.last_chosen = Some(ReplicaId::from(policy_rng.random_range(0..n)));
                Client {
                    state,
                    pool: ProbePool::new(),
                    arrivals: stream(setup.seed, Stream::Arrivals, c as u32),
                    policy_rng,
                    net: stream(setup.seed, Stream::Network, c as u32),
                    arrival_version: 0,
                    last_query: 0,
                }
            })
            .collect();
        let mut step_starts = Vec::with_capacity(setup.steps.len() + 1);
        let mut t = 0;
        for s in &setup.steps {
            step_starts.push(t);
            t += s.duration_us;
        }
        step_starts.push(t);
        let collectors = setup.steps.iter().map(|_| StepCollector::new(n)).collect();
        let mut sim = Simulation {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            machines,
            replicas,
            antagonist_rngs,
            clients,
            all_replicas: (0..n).map(ReplicaId::from).collect(),
            step_starts,
            current: None,
            schedule_end: None,
            collectors,
            next_query: 0,
            last_cpu: vec![0.0; n],
            completions_this_second: vec![0; n],
            wrr_history: VecDeque::new(),
            trace: VecDeque::with_capacity(TRACE_LEN),
            events_processed: 0,
            setup,
        };
        sim.push(0, EventKind::StepBoundary(0));
        sim.push(sim.setup.sim.antagonist.period_us, EventKind::AntagonistTick);
        sim.push(MICROS_PER_SEC, EventKind::MetricTick);
        sim.push(sim.setup.sim.wrr_period_us, EventKind::WrrRecompute);
        let poll = sim.setup.sim.yarp_poll_us;
        for c in 0..n_clients {
            let offset = poll * c as u64 / n_clients as u64;
            sim.push(offset, EventKind::YarpPoll { client: c as u32 });
            if let Some(idle) = sim.setup.prequal.idle_probe_interval_us {
                sim.push(idle.max(1), EventKind::IdleProbe { client: c as u32 });
            }
        }
        Ok(sim)
    }

    /// Runs until the schedule has ended and every query has resolved.
    pub fn run(mut self) -> Result<SimOutput> {
        while let Some(ev) = self.queue.pop() {
            if ev.time < self.now {
                return Err(self.invariant(format!(
                    "event {:?} scheduled for {} popped after {}",
                    ev.kind, ev.time, self.now
                )));
            }
            self.now = ev.time;
            if self.trace.len() == TRACE_LEN {
                self.trace.pop_front();
            }
            self.trace.push_back(ev);
            self.events_processed += 1;
            self.handle(ev.kind)?;
        }
        if let Some(r) = self.replicas.iter().find(|r| r.active_len() > 0) {
            return Err(self.invariant(format!("{} still holds queries after drain", r.id)));
        }
        Ok(SimOutput {
            steps: self.collectors,
            events_processed: self.events_processed,
            end_time: self.now,
        })
    }

    fn push(&mut self, time: Micros, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            rank: kind.rank(),
            seq: self.seq,
            kind,
        });
    }

    fn invariant(&self, message: String) -> Error {
        let trace: Vec<String> = self
            .trace
            .iter()
            .map(|e| format!("  t={} {:?}", e.time, e.kind))
            .collect();
        Error::Invariant {
            time_us: self.now,
            message: format!("{message}\nrecent events:\n{}", trace.join("\n")),
        }
    }

    fn running(&self) -> bool {
        self.schedule_end.is_none()
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::StepBoundary(i) => self.on_step_boundary(i),
            EventKind::AntagonistTick => self.on_antagonist_tick()?,
            EventKind::MetricTick => self.on_metric_tick()?,
            EventKind::WrrRecompute => self.on_wrr_recompute(),
            EventKind::QueryFinish { replica, version } => {
                let r = replica as usize;
                if self.replicas[r].version == version {
                    self.sync_replica(r);
                    self.replicas[r].version += 1;
                    self.reschedule(r);
                    self.check_replica(r)?;
                }
            }
            EventKind::Deadline { query, replica } => self.on_deadline(query, replica as usize)?,
            EventKind::ProbeArrival {
                client,
                replica,
                sent_at,
                back,
            } => self.on_probe_arrival(client, replica as usize, sent_at, back)?,
            EventKind::ProbeResponse {
                client,
                replica,
                rif,
                latency,
                sent_at,
            } => self.on_probe_response(client as usize, replica, rif, latency, sent_at),
            EventKind::YarpPoll { client } => {
                let rifs: Vec<u32> = self.replicas.iter().map(|r| r.tracker.rif()).collect();
                self.clients[client as usize].state.yarp_rif = rifs;
                if self.running() {
                    self.push(self.now + self.setup.sim.yarp_poll_us, kind);
                }
            }
            EventKind::IdleProbe { client } => self.on_idle_probe(client as usize),
            EventKind::QueryArrival { client, version } => {
                if self.clients[client as usize].arrival_version == version {
                    self.on_query_arrival(client as usize)?;
                }
            }
        }
        Ok(())
    }

    fn on_step_boundary(&mut self, i: usize) {
        let n_clients = self.clients.len();
        if i == self.setup.steps.len() {
            self.schedule_end = Some(self.now);
            self.current = None;
            for c in &mut self.clients {
                c.arrival_version += 1;
            }
            return;
        }
        let step = &self.setup.steps[i];
        let mut prequal = self.setup.prequal.clone();
        prequal.n_replicas = self.replicas.len();
        if let Some(r) = step.r_probe {
            prequal.r_probe = r;
        }
        if let Some(r) = step.r_remove {
            prequal.r_remove = r;
        }
        if let Some(q) = step.q_rif {
            prequal.q_rif = q;
        }
        let mut linear = self.setup.linear;
        if let Some(l) = step.lambda {
            linear.lambda = l;
        }
        let qps = self.setup.workload.qps_for_load(step.load, self.setup.sim.allocation);
        let active = ActiveStep {
            index: i,
            measure_from: self.now + step.warmup_us,
            end: self.now + step.duration_us,
            policy: step.policy,
            qps_per_client: qps / n_clients as f64,
            budget: compute_reuse_budget(&prequal),
            prequal,
            linear,
        };
        self.collectors[i].measured_us = step.duration_us - step.warmup_us;
        for c in 0..n_clients {
            let client = &mut self.clients[c];
            client.state.policy = active.policy;
            client.state.linear = active.linear;
            client.arrival_version += 1;
            let first = match self.setup.workload.arrivals {
                ArrivalProcess::Poisson => gap(&mut client.arrivals, &self.setup.workload, active.qps_per_client),
                ArrivalProcess::Deterministic => {
                    let period = 1.0 / active.qps_per_client;
                    (client.arrivals.random::<f64>() * period * MICROS_PER_SEC as f64) as Micros
                }
            };
            let version = client.arrival_version;
            self.push(
                self.now + first,
                EventKind::QueryArrival {
                    client: c as u32,
                    version,
                },
            );
        }
        self.push(self.step_starts[i + 1], EventKind::StepBoundary(i + 1));
        self.current = Some(active);
    }

    /// Index of the step whose measurement window contains `t`.
    fn measured_step(&self, t: Micros) -> Option<usize> {
        let s = self.current.as_ref()?;
        (t >= s.measure_from && t < s.end).then_some(s.index)
    }

    fn on_query_arrival(&mut self, c: usize) -> Result<()> {
        let step = self.current.clone().expect("arrivals only while a step runs");
        let now = self.now;
        let measured = self.measured_step(now);
        let workload = &self.setup.workload;
        let client = &mut self.clients[c];
        let base_work = draw_base_work(workload, &mut client.arrivals);
        let next = gap(&mut client.arrivals, workload, step.qps_per_client);
        let version = client.arrival_version;
        client.last_query = now;

        let mut probes = Vec::new();
        if step.policy.uses_probe_pool() {
            client.pool.expire(now, &step.prequal);
            let k = client.pool.probes_for_query(&step.prequal);
            probes = pick_probe_targets(&self.all_replicas, k, &mut client.policy_rng);
        }
        let theta = (step.policy == PolicyKind::Prequal).then(|| client.pool.rif_threshold(&step.prequal));
        let chosen = client
            .state
            .select(&self.all_replicas, &client.pool, &step.prequal, &mut client.policy_rng);
        if step.policy.uses_probe_pool() {
            client.pool.on_query_sent(chosen, &step.prequal);
        }
        client.state.on_query_sent(chosen);
        let work = base_work * workload.work_multiplier(chosen);

        self.push(
            now + next,
            EventKind::QueryArrival {
                client: c as u32,
                version,
            },
        );
        if let Some(s) = measured {
            let col = &mut self.collectors[s];
            col.arrivals += 1;
            col.probes_sent += probes.len() as u64;
            if let Some(RifThreshold::Finite(t)) = theta {
                col.theta_sum += t as f64;
                col.theta_samples += 1;
            }
        }
        for target in probes {
            self.send_probe(c, target);
        }

        let r = chosen.index();
        let id = self.next_query;
        self.next_query += 1;
        self.sync_replica(r);
        self.replicas[r].admit(id, c as u32, work, now, measured);
        self.reschedule(r);
        self.push(
            now + self.setup.sim.deadline_us,
            EventKind::Deadline {
                query: id,
                replica: r as u32,
            },
        );
        self.check_replica(r)
    }

    fn send_probe(&mut self, c: usize, target: ReplicaId) {
        let (lo, hi) = (self.setup.sim.wire_latency_min_us, self.setup.sim.wire_latency_max_us);
        let net = &mut self.clients[c].net;
        let there = net.random_range(lo..=hi);
        let back = net.random_range(lo..=hi);
        self.push(
            self.now + there,
            EventKind::ProbeArrival {
                client: c as u32,
                replica: target.0,
                sent_at: self.now,
                back,
            },
        );
    }

    fn on_probe_arrival(&mut self, client: u32, r: usize, sent_at: Micros, back: Micros) -> Result<()> {
        self.sync_replica(r);
        self.replicas[r].charge_overhead(self.setup.sim.probe_cpu_cost);
        let (rif, latency) = self.replicas[r].tracker.answer_probe(self.now);
        self.reschedule(r);
        self.push(
            self.now + back,
            EventKind::ProbeResponse {
                client,
                replica: r as u32,
                rif,
                latency,
                sent_at,
            },
        );
        self.check_replica(r)
    }

    fn on_probe_response(&mut self, c: usize, replica: u32, rif: u32, latency: Micros, sent_at: Micros) {
        if self.now - sent_at > self.setup.sim.probe_timeout_us {
            return;
        }
        let Some(step) = self.current.as_ref() else {
            return;
        };
        if !step.policy.uses_probe_pool() {
            return;
        }
        let client = &mut self.clients[c];
        let replica = ReplicaId(replica);
        client.state.c3.observe_probe(replica, rif, latency as f64);
        let response = ProbeResponse {
            replica,
            rif,
            latency_estimate: latency,
            received_at: self.now,
        };
        client
            .pool
            .add_probe(response, &step.prequal, step.budget, &mut client.policy_rng);
    }

    fn on_idle_probe(&mut self, c: usize) {
        let Some(interval) = self.setup.prequal.idle_probe_interval_us else {
            return;
        };
        if !self.running() {
            return;
        }
        let interval = interval.max(1);
        self.push(self.now + interval, EventKind::IdleProbe { client: c as u32 });
        let Some(step) = self.current.as_ref() else {
            return;
        };
        if !step.policy.uses_probe_pool() || self.now - self.clients[c].last_query < interval {
            return;
        }
        let k = (step.prequal.r_probe.round() as usize).max(1);
        let client = &mut self.clients[c];
        let targets = pick_probe_targets(&self.all_replicas, k, &mut client.policy_rng);
        client.last_query = self.now;
        for t in targets {
            self.send_probe(c, t);
        }
    }

    fn on_deadline(&mut self, query: QueryId, r: usize) -> Result<()> {
        if !self.replicas[r].contains(query) {
            return Ok(());
        }
        self.sync_replica(r);
        if let Some(q) = self.replicas[r].abort(query) {
            self.fail(r, q);
        }
        self.reschedule(r);
        self.check_replica(r)
    }

    fn fail(&mut self, r: usize, q: ActiveQuery) {
        let deadline = self.setup.sim.deadline_us;
        self.clients[q.client as usize]
            .state
            .on_query_returned(ReplicaId::from(r), deadline as f64);
        if let Some(s) = q.step {
            let col = &mut self.collectors[s];
            col.errors += 1;
            col.latency.record(deadline as f64);
        }
    }

    fn complete(&mut self, r: usize, f: Finished) {
        self.replicas[r].record_finish(&f);
        let latency = f.finish_time - f.query.arrival;
        self.clients[f.query.client as usize]
            .state
            .on_query_returned(ReplicaId::from(r), latency as f64);
        self.completions_this_second[r] += 1;
        if let Some(s) = f.query.step {
            let col = &mut self.collectors[s];
            col.completed += 1;
            col.latency.record(latency as f64);
        }
    }

    /// Brings replica `r` up to the current time, retiring finished queries.
    fn sync_replica(&mut self, r: usize) -> bool {
        let finished = self.replicas[r].advance_to(self.now, &self.machines[r]);
        let any = !finished.is_empty();
        for f in finished {
            self.complete(r, f);
        }
        any
    }

    fn reschedule(&mut self, r: usize) {
        if let Some(t) = self.replicas[r].next_finish_time(&self.machines[r]) {
            let version = self.replicas[r].version;
            self.push(
                t.max(self.now),
                EventKind::QueryFinish {
                    replica: r as u32,
                    version,
                },
            );
        }
    }

    fn check_replica(&self, r: usize) -> Result<()> {
        if !self.setup.sim.check_invariants {
            return Ok(());
        }
        let rep = &self.replicas[r];
        if rep.tracker.rif() as usize != rep.active_len() {
            return Err(self.invariant(format!(
                "{}: tracker RIF {} but {} active queries",
                rep.id,
                rep.tracker.rif(),
                rep.active_len()
            )));
        }
        let m = &self.machines[r];
        let rate = rep.current_rate(m);
        if rate + m.antagonist_usage(rate) > m.capacity + 1e-9 {
            return Err(self.invariant(format!(
                "{}: replica rate {rate} plus antagonists exceeds capacity {}",
                rep.id, m.capacity
            )));
        }
        Ok(())
    }

    /// Samples every replica's RIF for metrics, then moves the antagonists.
    fn on_antagonist_tick(&mut self) -> Result<()> {
        if let Some(s) = self.measured_step(self.now) {
            let col = &mut self.collectors[s];
            for rep in &self.replicas {
                col.rif.record(rep.tracker.rif() as f64);
            }
        }
        for r in 0..self.machines.len() {
            self.sync_replica(r);
            antagonist_step(&mut self.machines[r], &self.setup.sim.antagonist, &mut self.antagonist_rngs[r]);
            self.replicas[r].version += 1;
            self.reschedule(r);
            self.check_replica(r)?;
        }
        if self.running() {
            self.push(self.now + self.setup.sim.antagonist.period_us, EventKind::AntagonistTick);
        }
        Ok(())
    }

    fn on_metric_tick(&mut self) -> Result<()> {
        let n = self.replicas.len();
        let mut cpu = vec![0.0; n];
        for (r, slot) in cpu.iter_mut().enumerate() {
            if self.sync_replica(r) {
                self.replicas[r].version += 1;
                self.reschedule(r);
            }
            let used = self.replicas[r].cpu_used();
            *slot = used - self.last_cpu[r];
            self.last_cpu[r] = used;
            self.check_replica(r)?;
        }
        // The second just ended counts if it lies inside a measurement window.
        let start = self.now.saturating_sub(MICROS_PER_SEC);
        let within = (0..self.setup.steps.len()).find(|&i| {
            let from = self.step_starts[i] + self.setup.steps[i].warmup_us;
            start >= from && self.now <= self.step_starts[i + 1]
        });
        if let Some(i) = within {
            let col = &mut self.collectors[i];
            for (r, v) in cpu.iter().enumerate() {
                col.cpu_per_second[r].push(*v);
            }
        }
        let completions = std::mem::replace(&mut self.completions_this_second, vec![0; n]);
        self.wrr_history.push_back((cpu, completions));
        while self.wrr_history.len() > self.setup.sim.wrr_window_s {
            self.wrr_history.pop_front();
        }
        if self.running() {
            self.push(self.now + MICROS_PER_SEC, EventKind::MetricTick);
        }
        Ok(())
    }

    fn on_wrr_recompute(&mut self) {
        if !self.wrr_history.is_empty() {
            let n = self.replicas.len();
            let secs = self.wrr_history.len() as f64;
            let mut qps = vec![0.0; n];
            let mut util = vec![0.0; n];
            for (cpu, done) in &self.wrr_history {
                for r in 0..n {
                    qps[r] += done[r] as f64 / secs;
                    util[r] += cpu[r] / (self.setup.sim.allocation * secs);
                }
            }
            let table = WrrTable::from_weights(compute_wrr_weights(&qps, &util));
            for c in &mut self.clients {
                c.state.wrr = table.clone();
            }
        }
        if self.running() {
            self.push(self.now + self.setup.sim.wrr_period_us, EventKind::WrrRecompute);
        }
    }
}

/// Next inter-arrival gap for one client, in microseconds.
fn gap<R: Rng + ?Sized>(rng: &mut R, cfg: &WorkloadConfig, rate_per_s: f64) -> Micros {
    match cfg.arrivals {
        ArrivalProcess::Poisson => {
            let secs = Exp::new(rate_per_s).expect("positive rate").sample(rng);
            (secs * MICROS_PER_SEC as f64).round() as Micros
        }
        ArrivalProcess::Deterministic => (MICROS_PER_SEC as f64 / rate_per_s).round() as Micros,
    }
}

/// Convenience wrapper: build and run one simulation.
pub fn simulate(setup: SimSetup) -> Result<SimOutput> {
    Simulation::new(setup)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Step;

    fn small_setup(policy: PolicyKind, load: f64, seed: u64) -> SimSetup {
        let workload = WorkloadConfig {
            n_clients: 10,
            n_servers: 10,
            step_duration_s: 6.0,
            warmup_s: 1.0,
            ..WorkloadConfig::default()
        };
        let step = Step {
            duration_us: 6 * MICROS_PER_SEC,
            warmup_us: MICROS_PER_SEC,
            policy,
            load,
            r_probe: None,
            r_remove: None,
            q_rif: None,
            lambda: None,
        };
        let prequal = PrequalConfig {
            n_replicas: 10,
            max_pool_size: 4,
            ..PrequalConfig::default()
        };
        SimSetup {
            sim: SimConfig::default(),
            workload,
            prequal,
            signals: SignalsConfig::default(),
            linear: LinearParams::default(),
            steps: vec![step],
            seed,
        }
    }

    #[test]
    fn every_policy_runs_and_drains() {
        for p in PolicyKind::ALL {
            let out = simulate(small_setup(p, 0.7, 1)).unwrap();
            let s = &out.steps[0];
            assert!(s.arrivals > 100, "{p}: {}", s.arrivals);
            assert_eq!(s.completed + s.errors, s.arrivals, "{p}");
            assert_eq!(s.cpu_per_second[0].len(), 5, "{p}");
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = simulate(small_setup(PolicyKind::Prequal, 0.9, 4)).unwrap();
        let b = simulate(small_setup(PolicyKind::Prequal, 0.9, 4)).unwrap();
        assert_eq!(a.events_processed, b.events_processed);
        assert_eq!(a.steps[0].latency, b.steps[0].latency);
        assert_eq!(a.steps[0].cpu_per_second, b.steps[0].cpu_per_second);
    }

    #[test]
    fn hopeless_work_times_out_at_the_deadline() {
        let mut setup = small_setup(PolicyKind::Random, 2.0, 2);
        // Saturated machines hold every replica at its 0.1-core allocation,
        // so one core-second of work needs 10 s.
        setup.sim.antagonist.base_min = 0.95;
        setup.sim.antagonist.base_max = 0.95;
        setup.sim.antagonist.burst_prob = 0.0;
        setup.workload.work_mean = 1.0;
        setup.workload.work_sd = Some(1e-3);
        let out = simulate(setup).unwrap();
        let s = &out.steps[0];
        assert!(s.errors > 0);
        assert_eq!(s.completed, 0);
        assert!((s.latency.quantile(0.5).unwrap() - 5e6).abs() / 5e6 < 0.025);
    }

    #[test]
    fn measured_cpu_tracks_offered_load() {
        let mut setup = small_setup(PolicyKind::Random, 0.8, 3);
        setup.workload.step_duration_s = 40.0;
        setup.steps[0].duration_us = 40 * MICROS_PER_SEC;
        setup.sim.probe_cpu_cost = 0.0;
        let out = simulate(setup.clone()).unwrap();
        let s = &out.steps[0];
        let total: f64 = s.cpu_per_second.iter().flatten().sum();
        let secs = s.cpu_per_second[0].len() as f64;
        let util = total / (secs * setup.sim.allocation * setup.workload.n_servers as f64);
        assert!((util - 0.8).abs() < 0.05 * 0.8, "util {util}");
    }
}
