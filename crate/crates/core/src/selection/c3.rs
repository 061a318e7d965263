//! C3-style replica scoring over the probe pool.
//!
//! The score is `(R - 1/mu) + q^3 / mu` with `q = 1 + os * n + q_bar`, where
//! `os` is the client's own outstanding count on the replica, `n` the number
//! of clients, `q_bar` a smoothed server-reported RIF, `R` a smoothed
//! client-observed response time and `1/mu` a smoothed server-reported
//! service time. All times are in microseconds.

use crate::probe_pool::PoolEntry;
use crate::types::ReplicaId;

pub const DEFAULT_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Ewma(Option<f64>);

impl Ewma {
    fn observe(&mut self, x: f64, alpha: f64) {
        self.0 = Some(match self.0 {
            None => x,
            Some(v) => v + alpha * (x - v),
        });
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ReplicaStats {
    response_time: Ewma,
    service_time: Ewma,
    server_rif: Ewma,
}

#[derive(Debug, Clone)]
pub struct C3State {
    smoothing: f64,
    n_clients: usize,
    replicas: Vec<ReplicaStats>,
}

impl C3State {
    pub fn new(n_replicas: usize, n_clients: usize, smoothing: f64) -> Self {
        assert!(
            smoothing > 0.0 && smoothing <= 1.0,
            "smoothing factor must lie in (0, 1]"
        );
        C3State {
            smoothing,
            n_clients,
            replicas: vec![ReplicaStats::default(); n_replicas],
        }
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// A response came back to this client after `rt_us`.
    pub fn observe_response(&mut self, replica: ReplicaId, rt_us: f64) {
        let a = self.smoothing;
        self.replicas[replica.index()].response_time.observe(rt_us, a);
    }

    /// A probe reported the server's RIF and latency estimate.
    pub fn observe_probe(&mut self, replica: ReplicaId, rif: u32, service_us: f64) {
        let a = self.smoothing;
        let s = &mut self.replicas[replica.index()];
        s.server_rif.observe(rif as f64, a);
        s.service_time.observe(service_us, a);
    }

    /// Smoothed (R, 1/mu, q_bar). R defaults to 1/mu until a response is seen.
    pub fn smoothed(&self, replica: ReplicaId) -> (f64, f64, f64) {
        let s = &self.replicas[replica.index()];
        let mu_inv = s.service_time.0.unwrap_or(0.0);
        let r = s.response_time.0.unwrap_or(mu_inv);
        (r, mu_inv, s.server_rif.0.unwrap_or(0.0))
    }

    pub fn score(&self, replica: ReplicaId, outstanding: u32) -> f64 {
        let (r, mu_inv, q_bar) = self.smoothed(replica);
        c3_score(r, mu_inv, q_bar, outstanding, self.n_clients)
    }

    pub fn select(&self, entries: &[PoolEntry], client_rif: &[u32]) -> Option<ReplicaId> {
        entries
            .iter()
            .map(|e| (self.score(e.replica(), client_rif[e.replica().index()]), e.replica()))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, r)| r)
    }
}

/// Estimated queue size `1 + os * n + q_bar`.
#[inline]
pub fn c3_queue_estimate(outstanding: u32, n_clients: usize, q_bar: f64) -> f64 {
    1.0 + outstanding as f64 * n_clients as f64 + q_bar
}

#[inline]
pub fn c3_score(r: f64, mu_inv: f64, q_bar: f64, outstanding: u32, n_clients: usize) -> f64 {
    let q_hat = c3_queue_estimate(outstanding, n_clients, q_bar);
    (r - mu_inv) + q_hat.powi(3) * mu_inv
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: f64 = 1000.0;

    #[test]
    fn score_examples() {
        assert_eq!(c3_score(100.0 * MS, 40.0 * MS, 0.0, 0, 10), 100.0 * MS);
        let psi = c3_score(200.0 * MS, 50.0 * MS, 4.0, 2, 10);
        assert_eq!(c3_queue_estimate(2, 10, 4.0), 25.0);
        assert_eq!(psi, 150.0 * MS + 15625.0 * 50.0 * MS);
        assert_eq!(c3_score(7.0, 7.0, 0.0, 0, 100), 7.0);
    }

    #[test]
    fn ewmas_start_at_first_observation() {
        let mut s = C3State::new(2, 10, 0.1);
        s.observe_probe(ReplicaId(1), 4, 1000.0);
        assert_eq!(s.smoothed(ReplicaId(1)), (1000.0, 1000.0, 4.0));
        s.observe_probe(ReplicaId(1), 14, 2000.0);
        s.observe_response(ReplicaId(1), 5000.0);
        let (r, mu, q) = s.smoothed(ReplicaId(1));
        assert_eq!(r, 5000.0);
        assert!((mu - 1100.0).abs() < 1e-9);
        assert!((q - 5.0).abs() < 1e-9);
    }
}
