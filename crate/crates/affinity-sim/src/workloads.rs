//! Arrival processes and service-time distributions.
//!
//! Arrivals are per-type counts per slot: Poisson (optionally capped),
//! Bernoulli, or a deterministic pattern with exact long-run rate. Service
//! times are whole slots with bounded support [1, s_max]; each distribution
//! is parameterized by the cell rate α so that the (pre-discretization)
//! mean is 1/α. The log-normal discretization biases the achieved mean, so
//! `effective_rate` measures 1/E[T] by Monte Carlo for capacity comparisons.

use rand::Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};

use crate::error::Error;

pub const DEFAULT_S_MAX: u64 = 10_000;
pub const DEFAULT_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalKind {
    Poisson,
    Bernoulli,
    Deterministic,
}

/// Per-slot arrival counts for one task type.
#[derive(Debug, Clone)]
pub struct ArrivalProcess {
    kind: ArrivalKind,
    lambda: f64,
    /// Inclusive per-slot cap on the count, if any.
    cap: Option<u64>,
    poisson: Option<Poisson<f64>>,
}

impl ArrivalProcess {
    pub fn new(kind: ArrivalKind, lambda: f64, cap: Option<u64>) -> Result<Self, Error> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid_input(format!("arrival rate must be >= 0, got {lambda}")));
        }
        if kind == ArrivalKind::Bernoulli && lambda > 1.0 {
            return Err(Error::invalid_input(format!(
                "bernoulli arrivals need rate <= 1, got {lambda}"
            )));
        }
        if cap == Some(0) {
            return Err(Error::invalid_input("arrival cap must be positive"));
        }
        let poisson = if kind == ArrivalKind::Poisson && lambda > 0.0 {
            Some(Poisson::new(lambda).map_err(|e| Error::invalid_input(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { kind, lambda, cap, poisson })
    }

    /// Arrival count at slot `t` (1-based; only the deterministic pattern uses it).
    pub fn sample(&self, t: u64, rng: &mut impl Rng) -> u64 {
        let raw = match self.kind {
            ArrivalKind::Poisson => match &self.poisson {
                Some(p) => p.sample(rng) as u64,
                None => 0,
            },
            ArrivalKind::Bernoulli => u64::from(rng.gen::<f64>() < self.lambda),
            // Count crossings of the integer grid: exactly floor(λt) arrivals
            // over the first t slots.
            ArrivalKind::Deterministic => {
                let now = (self.lambda * t as f64).floor();
                let before = (self.lambda * (t - 1) as f64).floor();
                (now - before) as u64
            }
        };
        match self.cap {
            Some(c) => raw.min(c),
            None => raw,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceKind {
    Deterministic,
    Geometric,
    LogNormal { sigma: f64 },
}

/// Service-time sampler for one (server, level) cell with true rate α.
#[derive(Debug, Clone)]
pub struct ServiceProcess {
    kind: ServiceKind,
    alpha: f64,
    s_max: u64,
    geometric: Option<Geometric>,
    lognormal: Option<LogNormal<f64>>,
}

impl ServiceProcess {
    pub fn new(kind: ServiceKind, alpha: f64, s_max: u64) -> Result<Self, Error> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid_input(format!("service rate must be positive, got {alpha}")));
        }
        if s_max == 0 {
            return Err(Error::invalid_input("s_max must be positive"));
        }
        let mut geometric = None;
        let mut lognormal = None;
        match kind {
            ServiceKind::Deterministic => {
                let d = (1.0 / alpha).round().max(1.0);
                if d > s_max as f64 {
                    return Err(Error::invalid_input(format!(
                        "deterministic duration {d} exceeds s_max {s_max}"
                    )));
                }
            }
            ServiceKind::Geometric => {
                if alpha > 1.0 {
                    return Err(Error::invalid_input(format!(
                        "geometric services need rate <= 1, got {alpha}"
                    )));
                }
                geometric =
                    Some(Geometric::new(alpha).map_err(|e| Error::invalid_input(e.to_string()))?);
            }
            ServiceKind::LogNormal { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::invalid_input(format!(
                        "lognormal sigma must be positive, got {sigma}"
                    )));
                }
                // Location so that the continuous mean is exactly 1/α.
                let mu = (1.0 / alpha).ln() - sigma * sigma / 2.0;
                lognormal = Some(
                    LogNormal::new(mu, sigma).map_err(|e| Error::invalid_input(e.to_string()))?,
                );
            }
        }
        Ok(Self { kind, alpha, s_max, geometric, lognormal })
    }

    /// Whole-slot duration in [1, s_max].
    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match self.kind {
            ServiceKind::Deterministic => ((1.0 / self.alpha).round() as u64).max(1),
            // Geometric on {1, 2, ...} with success probability α, clamped.
            ServiceKind::Geometric => {
                (self.geometric.as_ref().unwrap().sample(rng) + 1).min(self.s_max)
            }
            ServiceKind::LogNormal { .. } => {
                let x = self.lognormal.as_ref().unwrap().sample(rng);
                (x.ceil().max(1.0) as u64).min(self.s_max)
            }
        }
    }

    /// Achieved rate 1/E[T] after discretization, measured by Monte Carlo.
    pub fn effective_rate(&self, samples: u64, rng: &mut impl Rng) -> f64 {
        assert!(samples > 0);
        let total: u64 = (0..samples).map(|_| self.sample(rng)).sum();
        samples as f64 / total as f64
    }
}
