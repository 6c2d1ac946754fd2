//! Scenario files: the TOML run configuration and built-in scenarios.
//!
//! A scenario is a rate matrix, an arrival mix (proportions plus a list of
//! total rates to sweep), a service-time family, engine settings, and the
//! policies to run. Every (policy, total rate) pair becomes one simulation
//! cell of `engine.replications` replications.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimation::{ExplorationSchedule, RateEstimates};
use crate::model::RateMatrix;
use crate::policies::PolicyKind;
use crate::sim::RunSpec;
use crate::workloads::{ArrivalKind, ServiceKind, DEFAULT_SIGMA, DEFAULT_S_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub matrix: MatrixSection,
    pub arrivals: ArrivalsSection,
    #[serde(default)]
    pub services: ServicesSection,
    pub engine: EngineSection,
    #[serde(default)]
    pub exploration: ExplorationSection,
    #[serde(default)]
    pub estimates: EstimatesSection,
    pub policies: Vec<PolicySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    /// rates[i][m]: service rate of type i on server m.
    pub rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalsSection {
    /// "poisson", "bernoulli", or "deterministic".
    #[serde(default = "default_arrival_kind")]
    pub kind: String,
    /// Per-type share of the total arrival rate; sums to one.
    pub proportions: Vec<f64>,
    /// Total arrival rates to sweep.
    pub lambdas: Vec<f64>,
    /// Optional per-type per-slot cap on the arrival count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServicesSection {
    /// "deterministic", "geometric", or "lognormal".
    pub kind: String,
    /// Shape parameter, lognormal only.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Hard upper bound on sampled durations, in slots.
    #[serde(default = "default_s_max")]
    pub s_max: u64,
}

impl Default for ServicesSection {
    fn default() -> Self {
        ServicesSection { kind: "geometric".into(), sigma: DEFAULT_SIGMA, s_max: DEFAULT_S_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub horizon: u64,
    pub warmup: u64,
    #[serde(default = "default_replications")]
    pub replications: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub invariant_checks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSection {
    /// Decay exponent of the exploration probability, in (0, 1].
    pub c: f64,
    /// Shifts the schedule so early slots explore less.
    #[serde(default = "default_t_offset")]
    pub t_offset: u64,
}

impl Default for ExplorationSection {
    fn default() -> Self {
        ExplorationSection { c: 0.5, t_offset: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesSection {
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for EstimatesSection {
    fn default() -> Self {
        EstimatesSection { init_low: 0.1, init_high: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// Policy name as printed in reports, e.g. "blind-gb-pandas".
    pub kind: String,
    /// Queue-length exponent, c-mu policies only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

fn default_arrival_kind() -> String {
    "poisson".into()
}
fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_s_max() -> u64 {
    DEFAULT_S_MAX
}
fn default_replications() -> u32 {
    5
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_t_offset() -> u64 {
    1
}

pub fn parse_policy(kind: &str, exponent: Option<f64>) -> Result<PolicyKind, Error> {
    let exp = exponent.unwrap_or(1.01);
    let policy = match kind {
        "gb-pandas" => PolicyKind::GbPandas,
        "blind-gb-pandas" => PolicyKind::BlindGbPandas,
        "max-weight" => PolicyKind::MaxWeight,
        "blind-max-weight" => PolicyKind::BlindMaxWeight,
        "c-mu" => PolicyKind::CMu { exponent: exp },
        "blind-c-mu" => PolicyKind::BlindCMu { exponent: exp },
        "fcfs" => PolicyKind::Fcfs,
        other => {
            return Err(Error::config(format!(
                "unknown policy '{other}' (expected gb-pandas, blind-gb-pandas, max-weight, \
                 blind-max-weight, c-mu, blind-c-mu, or fcfs)"
            )))
        }
    };
    policy.validate()?;
    Ok(policy)
}

fn parse_arrival_kind(kind: &str) -> Result<ArrivalKind, Error> {
    match kind {
        "poisson" => Ok(ArrivalKind::Poisson),
        "bernoulli" => Ok(ArrivalKind::Bernoulli),
        "deterministic" => Ok(ArrivalKind::Deterministic),
        other => Err(Error::config(format!(
            "unknown arrival kind '{other}' (expected poisson, bernoulli, or deterministic)"
        ))),
    }
}

fn parse_service_kind(kind: &str, sigma: f64) -> Result<ServiceKind, Error> {
    match kind {
        "deterministic" => Ok(ServiceKind::Deterministic),
        "geometric" => Ok(ServiceKind::Geometric),
        "lognormal" => Ok(ServiceKind::LogNormal { sigma }),
        other => Err(Error::config(format!(
            "unknown service kind '{other}' (expected deterministic, geometric, or lognormal)"
        ))),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::config(format!("bad scenario file: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let matrix = self.rate_matrix()?;
        let nt = matrix.num_types();
        if self.arrivals.proportions.len() != nt {
            return Err(Error::config("proportions length must match matrix rows"));
        }
        if self.arrivals.proportions.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::config("proportions must be non-negative"));
        }
        let sum: f64 = self.arrivals.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("proportions must sum to 1, got {sum}")));
        }
        if self.arrivals.lambdas.is_empty() {
            return Err(Error::config("at least one total arrival rate is required"));
        }
        if self.arrivals.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::config("arrival rates must be non-negative"));
        }
        parse_arrival_kind(&self.arrivals.kind)?;
        parse_service_kind(&self.services.kind, self.services.sigma)?;
        if self.services.s_max == 0 {
            return Err(Error::config("s_max must be at least 1"));
        }
        if self.engine.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.engine.horizon > 0 && self.engine.warmup >= self.engine.horizon {
            return Err(Error::config("warmup must be smaller than horizon"));
        }
        ExplorationSchedule::new(self.exploration.c, self.exploration.t_offset)?;
        if !(self.estimates.init_low > 0.0 && self.estimates.init_high > self.estimates.init_low) {
            return Err(Error::config("estimate init range needs 0 < init_low < init_high"));
        }
        if self.policies.is_empty() {
            return Err(Error::config("at least one policy is required"));
        }
        for p in &self.policies {
            parse_policy(&p.kind, p.exponent)?;
        }
        Ok(())
    }

    pub fn rate_matrix(&self) -> Result<RateMatrix, Error> {
        RateMatrix::new(self.matrix.rates.clone())
    }

    pub fn policy_kinds(&self) -> Result<Vec<PolicyKind>, Error> {
        self.policies.iter().map(|p| parse_policy(&p.kind, p.exponent)).collect()
    }

    /// Builds the engine spec for one (policy, total arrival rate) cell.
    pub fn run_spec(&self, policy: PolicyKind, lambda_total: f64) -> Result<RunSpec, Error> {
        let matrix = self.rate_matrix()?;
        let lambdas: Vec<f64> =
            self.arrivals.proportions.iter().map(|p| p * lambda_total).collect();
        Ok(RunSpec {
            matrix,
            lambdas,
            arrival_kind: parse_arrival_kind(&self.arrivals.kind)?,
            arrival_cap: self.arrivals.cap,
            service_kind: parse_service_kind(&self.services.kind, self.services.sigma)?,
            s_max: self.services.s_max,
            policy,
            exploration: Some(ExplorationSchedule::new(
                self.exploration.c,
                self.exploration.t_offset,
            )?),
            init_range: (self.estimates.init_low, self.estimates.init_high),
            init_estimates: None,
            horizon: self.engine.horizon,
            warmup: self.engine.warmup,
            invariant_checks: self.engine.invariant_checks,
        })
    }

    /// Three types on three servers where type 1 runs anywhere at full rate,
    /// type 2 needs server 3 for full rate, and type 3 only runs fast on
    /// server 3. Peak total throughput for the 40/20/40 mix is 2.5.
    pub fn reference() -> Self {
        Scenario {
            matrix: MatrixSection {
                rates: vec![
                    vec![1.0, 1.0, 1.0],
                    vec![0.5, 0.5, 1.0],
                    vec![0.25, 0.5, 1.0],
                ],
            },
            arrivals: ArrivalsSection {
                kind: "poisson".into(),
                proportions: vec![0.4, 0.2, 0.4],
                lambdas: vec![0.5, 1.0, 1.5, 2.0, 2.2, 2.4],
                cap: None,
            },
            services: ServicesSection {
                kind: "lognormal".into(),
                sigma: DEFAULT_SIGMA,
                s_max: DEFAULT_S_MAX,
            },
            engine: EngineSection {
                horizon: 200_000,
                warmup: 20_000,
                replications: 5,
                seed: 20_260_814,
                invariant_checks: true,
            },
            exploration: ExplorationSection::default(),
            estimates: EstimatesSection::default(),
            policies: vec![
                PolicySection { kind: "blind-gb-pandas".into(), exponent: None },
                PolicySection { kind: "gb-pandas".into(), exponent: None },
                PolicySection { kind: "blind-max-weight".into(), exponent: None },
                PolicySection { kind: "blind-c-mu".into(), exponent: Some(1.01) },
                PolicySection { kind: "fcfs".into(), exponent: None },
            ],
        }
    }
}

/// Two types, two servers, each type twice as fast on its own server
/// (rates 1 and 0.5). Estimates start inverted: the truly fast cell of each
/// server is believed slow (0.1) and the slow cell believed fast (1.0), so a
/// pure-exploitation blind policy routes every task to its slow server and
/// keeps confirming that belief. With exploration the fast cells eventually
/// get sampled, the first observation overwrites the bad prior, and routing
/// recovers. Deterministic arrivals and services keep the contrast sharp.
pub fn mislearning_spec(
    lambda_per_type: f64,
    horizon: u64,
    warmup: u64,
    explore: bool,
) -> RunSpec {
    let matrix = RateMatrix::new(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
    // Both servers have levels [1.0, 0.5]; believe the fast level slow.
    let inverted = RateEstimates::with_values(vec![vec![0.1, 1.0], vec![0.1, 1.0]], None).unwrap();
    RunSpec {
        matrix,
        lambdas: vec![lambda_per_type; 2],
        arrival_kind: ArrivalKind::Deterministic,
        arrival_cap: None,
        service_kind: ServiceKind::Deterministic,
        s_max: DEFAULT_S_MAX,
        policy: PolicyKind::BlindGbPandas,
        exploration: explore.then(|| ExplorationSchedule::new(0.5, 1).unwrap()),
        init_range: (0.1, 1.0),
        init_estimates: Some(inverted),
        horizon,
        warmup,
        invariant_checks: true,
    }
}
