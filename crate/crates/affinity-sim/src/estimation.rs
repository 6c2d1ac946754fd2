//! Online service-rate estimation for blind policies.
//!
//! Each (server, level) cell keeps a running average of the observed service
//! *rates* 1/T over the completions it has seen: after the ñ-th observation,
//! α̂ = ((ñ-1)/ñ)·α̂ + 1/(ñ·T). The first observation discards the initial
//! value entirely. Note the fixed point is E[1/T], not 1/E[T]; for random
//! service times those differ, and tests compare against E[1/T].
//!
//! Exploration follows a decaying schedule p(t) = min(1, (t + t_offset - 1)^-c):
//! with probability p(t) a decision is taken uniformly at random, otherwise
//! the estimates are exploited greedily.

use rand::Rng;

use crate::error::Error;
use crate::model::{LocalityStructure, SystemState};

/// Decaying exploration probability p(t) = min(1, (t + t_offset - 1)^-c).
/// c is restricted to (0, 1] so that exploration happens infinitely often.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub c: f64,
    pub t_offset: u64,
}

impl ExplorationSchedule {
    pub fn new(c: f64, t_offset: u64) -> Result<Self, Error> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::invalid_input(format!("exploration exponent c must be in (0, 1], got {c}")));
        }
        Ok(Self { c, t_offset })
    }

    /// Exploration probability at slot `t` (slots are 1-based).
    pub fn probability(&self, t: u64) -> f64 {
        debug_assert!(t >= 1);
        let base = (t + self.t_offset - 1) as f64;
        base.powf(-self.c).min(1.0)
    }
}

/// Returns true when slot `t` should take an exploratory decision.
pub fn should_explore(sched: &ExplorationSchedule, t: u64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < sched.probability(t)
}

/// Per-(server, level) rate estimates with observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimates {
    values: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl RateEstimates {
    /// Random positive initialization, uniform on [low, high) per cell.
    pub fn init_uniform(
        loc: &LocalityStructure,
        low: f64,
        high: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, Error> {
        if !(low > 0.0 && low < high && high.is_finite()) {
            return Err(Error::invalid_input(format!(
                "estimate init range must satisfy 0 < low < high, got [{low}, {high})"
            )));
        }
        let values = (0..loc.num_servers())
            .map(|m| (0..loc.num_levels(m)).map(|_| rng.gen_range(low..high)).collect())
            .collect();
        let counts = (0..loc.num_servers()).map(|m| vec![0u64; loc.num_levels(m)]).collect();
        Ok(Self { values, counts })
    }

    /// Explicit initialization (scenario setups and tests). Counts start at 0
    /// unless given, in which case a cell's value behaves as if already
    /// observed that many times.
    pub fn with_values(values: Vec<Vec<f64>>, counts: Option<Vec<Vec<u64>>>) -> Result<Self, Error> {
        if values.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid_input("rate estimates must be positive and finite"));
        }
        let counts = match counts {
            Some(c) => {
                let shapes_match = c.len() == values.len()
                    && c.iter().zip(&values).all(|(a, b)| a.len() == b.len());
                if !shapes_match {
                    return Err(Error::invalid_input("estimate count shape mismatch"));
                }
                c
            }
            None => values.iter().map(|row| vec![0u64; row.len()]).collect(),
        };
        Ok(Self { values, counts })
    }

    /// Records a completed service of `t_obs` slots at cell (m, n).
    pub fn record_service(&mut self, m: usize, n: usize, t_obs: u64) -> Result<(), Error> {
        if t_obs == 0 {
            return Err(Error::invalid_input("observed service time must be at least 1 slot"));
        }
        let n_tilde = (self.counts[m][n] + 1) as f64;
        let prev = self.values[m][n];
        self.values[m][n] = (n_tilde - 1.0) / n_tilde * prev + 1.0 / (n_tilde * t_obs as f64);
        self.counts[m][n] += 1;
        Ok(())
    }

    /// Current estimate for cell (m, n).
    pub fn estimate(&self, m: usize, n: usize) -> f64 {
        self.values[m][n]
    }

    /// Observations recorded at cell (m, n).
    pub fn count(&self, m: usize, n: usize) -> u64 {
        self.counts[m][n]
    }

    /// Estimated rate of task type `i` on server `m` (true level map, estimated value).
    pub fn rate_for(&self, loc: &LocalityStructure, i: usize, m: usize) -> f64 {
        self.values[m][loc.level_of(i, m)]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Workload of server `m` under estimated rates: Σ_n |Q_m^n| / α̂_m^n.
pub fn estimated_workload(
    state: &SystemState,
    est: &RateEstimates,
    m: usize,
) -> f64 {
    state.sub_queues[m]
        .iter()
        .enumerate()
        .map(|(n, q)| q.len() as f64 / est.values[m][n])
        .sum()
}
