//! Routing and scheduling policies.
//!
//! Three architectures share the engine:
//!
//! * Sub-queue (GB-PANDAS family): arrivals are routed to a per-(server,
//!   level) FIFO at arrival time; an idle server drains its own sub-queues
//!   fastest-level-first.
//! * Central (Max-Weight, c-mu): arrivals join a per-type FIFO; an idle
//!   server picks a type by a queue-length score.
//! * Single queue (FCFS): one shared FIFO, heads assigned to idle servers
//!   in ascending server index.
//!
//! Blind variants replace true rates with online estimates and mix in
//! decaying exploration; with estimates pinned to the truth and exploration
//! disabled they reproduce their non-blind counterparts decision for
//! decision (identical tie rules by construction).
//!
//! Tie rules, applied everywhere a score ties within 1e-12 relative:
//! routing prefers the faster (estimated) rate, then the smaller server
//! index; scheduling prefers the smaller level/type index.

use crate::error::Error;

/// Relative tolerance for score ties.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    GbPandas,
    BlindGbPandas,
    MaxWeight,
    BlindMaxWeight,
    CMu { exponent: f64 },
    BlindCMu { exponent: f64 },
    Fcfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    SubQueue,
    Central,
    SingleQueue,
}

impl PolicyKind {
    pub fn architecture(&self) -> Architecture {
        match self {
            PolicyKind::GbPandas | PolicyKind::BlindGbPandas => Architecture::SubQueue,
            PolicyKind::MaxWeight
            | PolicyKind::BlindMaxWeight
            | PolicyKind::CMu { .. }
            | PolicyKind::BlindCMu { .. } => Architecture::Central,
            PolicyKind::Fcfs => Architecture::SingleQueue,
        }
    }

    pub fn is_blind(&self) -> bool {
        matches!(
            self,
            PolicyKind::BlindGbPandas | PolicyKind::BlindMaxWeight | PolicyKind::BlindCMu { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::GbPandas => "gb-pandas",
            PolicyKind::BlindGbPandas => "blind-gb-pandas",
            PolicyKind::MaxWeight => "max-weight",
            PolicyKind::BlindMaxWeight => "blind-max-weight",
            PolicyKind::CMu { .. } => "c-mu",
            PolicyKind::BlindCMu { .. } => "blind-c-mu",
            PolicyKind::Fcfs => "fcfs",
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self {
            PolicyKind::CMu { exponent } | PolicyKind::BlindCMu { exponent } => {
                if !(exponent.is_finite() && *exponent > 1.0) {
                    return Err(Error::invalid_input(format!(
                        "c-mu cost exponent must exceed 1, got {exponent}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Where a routed task goes: server `m`, sub-queue `level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingDecision {
    pub server: usize,
    pub level: usize,
}

/// What an idle server serves next, in the vocabulary of its architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulingDecision {
    /// Stay idle (nothing eligible to serve).
    Idle,
    /// Pop the head of own sub-queue `level`.
    SubQueue(usize),
    /// Pop the head of the central queue of `task_type`.
    TypeQueue(usize),
    /// Pop the head of the shared FIFO.
    FcfsHead,
}

/// Weighted-workload routing: argmin over servers of W_m/μ_{i,m}.
/// Ties go to the larger rate, then the smaller server index. `workloads`
/// and `mu_row` are per server (true or estimated, consistently).
pub fn route_min_weighted_workload(workloads: &[f64], mu_row: &[f64]) -> usize {
    debug_assert_eq!(workloads.len(), mu_row.len());
    debug_assert!(!workloads.is_empty());
    let mut best = 0usize;
    for m in 1..workloads.len() {
        let score = workloads[m] / mu_row[m];
        let incumbent = workloads[best] / mu_row[best];
        let scale = score.abs().max(incumbent.abs()).max(1.0);
        if score < incumbent - TIE_EPS * scale {
            best = m;
        } else if score <= incumbent + TIE_EPS * scale && mu_row[m] > mu_row[best] + TIE_EPS {
            best = m;
        }
    }
    best
}

/// Priority scheduling for a sub-queue server: lowest non-empty level
/// (levels are ordered by descending rate, so this serves the fastest work).
pub fn priority_schedule(sub_queue_lens: &[usize]) -> SchedulingDecision {
    match sub_queue_lens.iter().position(|&l| l > 0) {
        Some(n) => SchedulingDecision::SubQueue(n),
        None => SchedulingDecision::Idle,
    }
}

/// Max-Weight scheduling for a central-queue server: argmax μ_{i,m}·Q_i over
/// non-empty queues; ties to the smaller type index.
pub fn max_weight_schedule(queue_lens: &[usize], mu_col: &[f64]) -> SchedulingDecision {
    argmax_score(queue_lens, |i| mu_col[i] * queue_lens[i] as f64)
}

/// c-mu scheduling: argmax μ_{i,m}·C_i'(Q_i) with C_i(q) = q^a, so the score
/// is μ·a·Q^(a-1); ties to the smaller type index. Requires a > 1.
pub fn cmu_schedule(queue_lens: &[usize], mu_col: &[f64], exponent: f64) -> SchedulingDecision {
    debug_assert!(exponent > 1.0);
    argmax_score(queue_lens, |i| {
        mu_col[i] * exponent * (queue_lens[i] as f64).powf(exponent - 1.0)
    })
}

fn argmax_score(queue_lens: &[usize], score: impl Fn(usize) -> f64) -> SchedulingDecision {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..queue_lens.len() {
        if queue_lens[i] == 0 {
            continue;
        }
        let s = score(i);
        match best {
            Some((_, bs)) => {
                let scale = s.abs().max(bs.abs()).max(1.0);
                if s > bs + TIE_EPS * scale {
                    best = Some((i, s));
                }
            }
            None => best = Some((i, s)),
        }
    }
    match best {
        Some((i, _)) => SchedulingDecision::TypeQueue(i),
        None => SchedulingDecision::Idle,
    }
}

/// FCFS: the shared head goes to the asking server, if any work exists.
pub fn fcfs_schedule(queue_len: usize) -> SchedulingDecision {
    if queue_len > 0 {
        SchedulingDecision::FcfsHead
    } else {
        SchedulingDecision::Idle
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_prefers_smaller_weighted_workload() {
        // W = (2, 3), μ = (1, 2): scores (2, 1.5) → server 1.
        assert_eq!(route_min_weighted_workload(&[2.0, 3.0], &[1.0, 2.0]), 1);
    }

    #[test]
    fn routing_tie_prefers_faster_server_then_index() {
        // Empty system: all scores 0, ties break to the larger rate.
        assert_eq!(route_min_weighted_workload(&[0.0, 0.0], &[1.0, 2.0]), 1);
        assert_eq!(route_min_weighted_workload(&[0.0, 0.0], &[2.0, 1.0]), 0);
        // Full tie (equal scores, equal rates): smallest index.
        assert_eq!(route_min_weighted_workload(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]), 0);
        // Proportional tie at non-zero workload: W/μ equal, faster wins.
        assert_eq!(route_min_weighted_workload(&[1.0, 2.0], &[1.0, 2.0]), 1);
    }

    #[test]
    fn priority_picks_lowest_nonempty_level() {
        assert_eq!(priority_schedule(&[0, 2, 1]), SchedulingDecision::SubQueue(1));
        assert_eq!(priority_schedule(&[3, 0, 0]), SchedulingDecision::SubQueue(0));
        assert_eq!(priority_schedule(&[0, 0, 0]), SchedulingDecision::Idle);
        assert_eq!(priority_schedule(&[]), SchedulingDecision::Idle);
    }

    #[test]
    fn max_weight_scores_rate_times_length() {
        // Q = (4, 3), μ = (0.5, 1): scores (2, 3) → type 1.
        assert_eq!(max_weight_schedule(&[4, 3], &[0.5, 1.0]), SchedulingDecision::TypeQueue(1));
        // Empty queues are excluded even with huge rates.
        assert_eq!(max_weight_schedule(&[0, 3], &[100.0, 0.1]), SchedulingDecision::TypeQueue(1));
        assert_eq!(max_weight_schedule(&[0, 0], &[1.0, 1.0]), SchedulingDecision::Idle);
        // Exact tie: smaller type index.
        assert_eq!(max_weight_schedule(&[2, 1], &[0.5, 1.0]), SchedulingDecision::TypeQueue(0));
    }

    #[test]
    fn cmu_scores_marginal_cost() {
        // Exponent 2: scores μ·2·Q = (4, 6) → type 1.
        assert_eq!(
            cmu_schedule(&[4, 3], &[0.5, 1.0], 2.0),
            SchedulingDecision::TypeQueue(1)
        );
        // Near-linear cost: equal rates reduce to longest-queue.
        assert_eq!(
            cmu_schedule(&[100, 1], &[1.0, 1.0], 1.01),
            SchedulingDecision::TypeQueue(0)
        );
        assert_eq!(cmu_schedule(&[0, 0], &[1.0, 1.0], 1.01), SchedulingDecision::Idle);
    }

    #[test]
    fn cmu_exponent_validation() {
        assert!(PolicyKind::CMu { exponent: 1.0 }.validate().is_err());
        assert!(PolicyKind::BlindCMu { exponent: 0.5 }.validate().is_err());
        assert!(PolicyKind::CMu { exponent: 1.01 }.validate().is_ok());
    }

    #[test]
    fn fcfs_takes_head_when_present() {
        assert_eq!(fcfs_schedule(3), SchedulingDecision::FcfsHead);
        assert_eq!(fcfs_schedule(0), SchedulingDecision::Idle);
    }

    #[test]
    fn architectures_are_fixed() {
        assert_eq!(PolicyKind::GbPandas.architecture(), Architecture::SubQueue);
        assert_eq!(PolicyKind::BlindGbPandas.architecture(), Architecture::SubQueue);
        assert_eq!(PolicyKind::MaxWeight.architecture(), Architecture::Central);
        assert_eq!(PolicyKind::BlindCMu { exponent: 1.01 }.architecture(), Architecture::Central);
        assert_eq!(PolicyKind::Fcfs.architecture(), Architecture::SingleQueue);
        assert!(PolicyKind::BlindGbPandas.is_blind());
        assert!(!PolicyKind::GbPandas.is_blind());
    }

    /// Brute-force re-implementations with explicit loops; the production
    /// functions must agree with these on random instances.
    mod brute {
        use super::super::SchedulingDecision;

        pub fn route(w: &[f64], mu: &[f64]) -> usize {
            let scores: Vec<f64> = (0..w.len()).map(|m| w[m] / mu[m]).collect();
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let candidates: Vec<usize> = (0..w.len())
                .filter(|&m| (scores[m] - min).abs() <= 1e-12 * scores[m].abs().max(min.abs()).max(1.0))
                .collect();
            let fastest = candidates.iter().map(|&m| mu[m]).fold(f64::MIN, f64::max);
            *candidates.iter().find(|&&m| (mu[m] - fastest).abs() <= 1e-12).unwrap()
        }

        pub fn max_weight(q: &[usize], mu: &[f64]) -> SchedulingDecision {
            let mut best: Option<usize> = None;
            for i in 0..q.len() {
                if q[i] == 0 {
                    continue;
                }
                let s = mu[i] * q[i] as f64;
                let better = match best {
                    Some(b) => {
                        let bs = mu[b] * q[b] as f64;
                        s > bs + 1e-12 * s.abs().max(bs.abs()).max(1.0)
                    }
                    None => true,
                };
                if better {
                    best = Some(i);
                }
            }
            best.map_or(SchedulingDecision::Idle, SchedulingDecision::TypeQueue)
        }
    }

    #[test]
    fn random_instances_match_brute_force() {
        // Small seeded generator; rates from a coarse grid so ties happen.
        let mut s = 0x243F6A8885A308D3u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        let rates = [0.25, 0.5, 1.0, 2.0];
        for _ in 0..5000 {
            let m = 1 + (next() % 5) as usize;
            let w: Vec<f64> = (0..m).map(|_| (next() % 8) as f64 * 0.5).collect();
            let mu: Vec<f64> = (0..m).map(|_| rates[(next() % 4) as usize]).collect();
            assert_eq!(route_min_weighted_workload(&w, &mu), brute::route(&w, &mu));
            let q: Vec<usize> = (0..m).map(|_| (next() % 6) as usize).collect();
            assert_eq!(max_weight_schedule(&q, &mu), brute::max_weight(&q, &mu));
        }
    }
}
