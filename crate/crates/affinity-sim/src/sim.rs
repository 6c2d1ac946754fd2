//! Discrete-time simulation engine.
//!
//! Each slot runs five phases in a fixed order:
//!
//! 1. finalize services that ended in the previous slot: record completion,
//!    feed the observed duration to the rate estimator (blind policies),
//!    mark the server idle;
//! 2. draw arrivals per type and route each task (sub-queue architecture
//!    routes task by task with workloads updated in between; central and
//!    FCFS architectures just enqueue);
//! 3. give each idle server, in ascending server index, a scheduling
//!    decision; pop the chosen task and sample its whole-slot duration;
//! 4. advance busy servers by one slot; services reaching zero remaining
//!    complete at the end of the slot;
//! 5. emit the slot trace (consumed by the invariant monitor and metrics).
//!
//! A task routed in its arrival slot can start service in that same slot;
//! completion time is completion_slot - arrival_slot + 1, so a task served
//! immediately with a 1-slot duration scores 1.
//!
//! All randomness flows through one ChaCha stream per replication in fixed
//! phase order, so a (spec, seed) pair fully determines every trace.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::estimation::{
    estimated_workload, should_explore, ExplorationSchedule, RateEstimates,
};
use crate::model::{
    build_locality_structure, workload, InService, LocalityStructure, RateMatrix, SystemState,
    Task,
};
use crate::policies::{
    cmu_schedule, fcfs_schedule, max_weight_schedule, priority_schedule,
    route_min_weighted_workload, Architecture, PolicyKind, SchedulingDecision,
};
use crate::workloads::{ArrivalKind, ArrivalProcess, ServiceKind, ServiceProcess};

/// Numerical tolerance for the workload identities.
const CHECK_TOL: f64 = 1e-9;
/// Backlog is sampled roughly this many times per run.
const BACKLOG_SAMPLES: u64 = 2000;

/// Everything needed to run one (policy, lambda) cell.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub matrix: RateMatrix,
    /// Absolute per-type arrival rates.
    pub lambdas: Vec<f64>,
    pub arrival_kind: ArrivalKind,
    pub arrival_cap: Option<u64>,
    pub service_kind: ServiceKind,
    pub s_max: u64,
    pub policy: PolicyKind,
    /// Blind policies only; `None` disables exploration (pure exploitation).
    pub exploration: Option<ExplorationSchedule>,
    /// Uniform init range for blind estimates.
    pub init_range: (f64, f64),
    /// Preset estimates override the uniform init (adversarial setups, tests).
    pub init_estimates: Option<RateEstimates>,
    pub horizon: u64,
    pub warmup: u64,
    pub invariant_checks: bool,
}

impl RunSpec {
    fn validate(&self) -> Result<(), Error> {
        if self.lambdas.len() != self.matrix.num_types() {
            return Err(Error::invalid_input("lambda vector length must match task type count"));
        }
        if self.horizon > 0 && self.warmup >= self.horizon {
            return Err(Error::invalid_input("warmup must be smaller than horizon"));
        }
        self.policy.validate()
    }
}

/// Deterministic per-replication seed derived from the master seed.
pub fn split_seed(master: u64, replication: u64) -> u64 {
    let mut z = master.wrapping_add(replication.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One failed runtime check.
#[derive(Debug, Clone)]
pub struct Violation {
    pub slot: u64,
    pub check: &'static str,
    pub detail: String,
}

/// Per-slot record of what moved, with state snapshots for the monitor.
#[derive(Debug, Clone, Default)]
pub struct SlotTrace {
    pub slot: u64,
    pub arrivals_by_type: Vec<u64>,
    /// Sub-queue architecture: tasks of type i routed to server m this slot.
    pub routed_type_server: Vec<Vec<u64>>,
    /// Tasks routed into sub-queue (m, n) this slot.
    pub routed_cell: Vec<Vec<u64>>,
    /// 1 when server m popped sub-queue n into service this slot.
    pub served_cell: Vec<Vec<u64>>,
    /// Unused service: max(0, S - A - Q) on each server's last sub-queue.
    pub unused: Vec<f64>,
    pub sub_lens_before: Vec<Vec<usize>>,
    pub sub_lens_after: Vec<Vec<usize>>,
    /// Central architecture: per-type queue lengths and pops.
    pub central_lens_before: Vec<usize>,
    pub central_lens_after: Vec<usize>,
    pub scheduled_by_type: Vec<u64>,
    /// FCFS architecture.
    pub fcfs_len_before: usize,
    pub fcfs_len_after: usize,
    pub fcfs_assigned: u64,
    pub psi_before: Vec<u64>,
    pub idle_before: Vec<bool>,
    pub workload_before: Vec<f64>,
    pub workload_after: Vec<f64>,
}

/// Metrics for one replication.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub policy: String,
    pub lambda_total: f64,
    pub replication: u32,
    pub seed: u64,
    pub arrived: u64,
    pub completed: u64,
    /// Mean of completion_slot - arrival_slot + 1 over post-warmup completions.
    pub mean_completion_time: Option<f64>,
    /// Least-squares slope (tasks/slot) of the backlog over the last half of
    /// the sampled trajectory.
    pub backlog_slope: f64,
    pub invariant_violations: u64,
    /// First few violations, for reporting.
    pub violations: Vec<Violation>,
    /// Final per-(server, level) estimates, blind policies only.
    pub final_estimates: Option<RateEstimates>,
}

/// Deliberate corruption hooks for testing the monitor (negative controls).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Injects a phantom task into a sub-queue (or central/FCFS queue) at the
    /// given slot without recording an arrival, breaking queue bookkeeping.
    PhantomTask { slot: u64 },
}

pub struct Engine {
    spec: RunSpec,
    loc: LocalityStructure,
    /// services[m][n]: sampler for sub-queue (m, n).
    services: Vec<Vec<ServiceProcess>>,
    arrivals: Vec<ArrivalProcess>,
    estimates: Option<RateEstimates>,
    pub state: SystemState,
    rng: ChaCha8Rng,
    fault: Option<FaultInjection>,
    // Accumulators.
    arrived: u64,
    arrived_by_type: Vec<u64>,
    completed: u64,
    completed_by_type: Vec<u64>,
    completion_sum: f64,
    completion_count: u64,
    backlog: Vec<(u64, u64)>,
    sample_every: u64,
    violations: Vec<Violation>,
}

impl Engine {
    pub fn new(spec: RunSpec, seed: u64) -> Result<Self, Error> {
        spec.validate()?;
        let loc = build_locality_structure(&spec.matrix);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut services = Vec::with_capacity(loc.num_servers());
        for m in 0..loc.num_servers() {
            let row: Result<Vec<_>, _> = (0..loc.num_levels(m))
                .map(|n| ServiceProcess::new(spec.service_kind, loc.level_rate(m, n), spec.s_max))
                .collect();
            services.push(row?);
        }
        let arrivals: Result<Vec<_>, _> = spec
            .lambdas
            .iter()
            .map(|&l| ArrivalProcess::new(spec.arrival_kind, l, spec.arrival_cap))
            .collect();
        let arrivals = arrivals?;

        let estimates = if spec.policy.is_blind() {
            Some(match &spec.init_estimates {
                Some(e) => e.clone(),
                None => {
                    RateEstimates::init_uniform(&loc, spec.init_range.0, spec.init_range.1, &mut rng)?
                }
            })
        } else {
            None
        };

        let state = SystemState::empty(&loc);
        let nt = spec.matrix.num_types();
        let sample_every = (spec.horizon / BACKLOG_SAMPLES).max(1);
        Ok(Engine {
            spec,
            loc,
            services,
            arrivals,
            estimates,
            state,
            rng,
            fault: None,
            arrived: 0,
            arrived_by_type: vec![0; nt],
            completed: 0,
            completed_by_type: vec![0; nt],
            completion_sum: 0.0,
            completion_count: 0,
            backlog: Vec::new(),
            sample_every,
            violations: Vec::new(),
        })
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn locality(&self) -> &LocalityStructure {
        &self.loc
    }

    pub fn estimates(&self) -> Option<&RateEstimates> {
        self.estimates.as_ref()
    }

    /// Phase 1: turn services that hit zero remaining last slot into
    /// completions. `t` is the slot about to run; completion_slot is t - 1.
    fn finalize_completions(&mut self, t: u64) {
        for m in 0..self.state.servers.len() {
            let done = matches!(&self.state.servers[m].in_service, Some(s) if s.remaining == 0);
            if !done {
                continue;
            }
            let s = self.state.servers[m].in_service.take().unwrap();
            let completion_slot = t - 1;
            let ctime = (completion_slot - s.task.arrival_slot + 1) as f64;
            self.completed += 1;
            self.completed_by_type[s.task.task_type] += 1;
            if completion_slot > self.spec.warmup {
                self.completion_sum += ctime;
                self.completion_count += 1;
            }
            if let Some(est) = &mut self.estimates {
                let n = self.loc.level_of(s.task.task_type, m);
                // total >= 1 always; record_service cannot fail here.
                est.record_service(m, n, s.total).expect("positive duration");
            }
            self.state.servers[m].eta = None;
            self.state.servers[m].psi = 0;
        }
    }

    /// Runs one slot and returns its trace. The caller drives the clock.
    pub fn step(&mut self) -> SlotTrace {
        self.state.clock += 1;
        let t = self.state.clock;
        let arch = self.spec.policy.architecture();
        let ms = self.state.servers.len();
        let nt = self.spec.matrix.num_types();

        self.finalize_completions(t);

        // Snapshot the start-of-slot state (after completions finalize).
        let mut trace = SlotTrace {
            slot: t,
            psi_before: self.state.servers.iter().map(|s| s.psi).collect(),
            idle_before: self.state.servers.iter().map(|s| s.is_idle()).collect(),
            ..Default::default()
        };
        if arch == Architecture::SubQueue {
            trace.sub_lens_before = (0..ms).map(|m| self.state.sub_queue_lens(m)).collect();
            trace.workload_before = (0..ms).map(|m| workload(&self.state, &self.loc, m)).collect();
            trace.routed_type_server = vec![vec![0; ms]; nt];
            trace.routed_cell = (0..ms).map(|m| vec![0; self.loc.num_levels(m)]).collect();
            trace.served_cell = (0..ms).map(|m| vec![0; self.loc.num_levels(m)]).collect();
        } else if arch == Architecture::Central {
            trace.central_lens_before = self.state.central_queues.iter().map(|q| q.len()).collect();
            trace.scheduled_by_type = vec![0; nt];
        } else {
            trace.fcfs_len_before = self.state.fcfs_queue.len();
        }

        // Phase 2: arrivals, routed task by task in type order.
        trace.arrivals_by_type = vec![0; nt];
        for i in 0..nt {
            let count = self.arrivals[i].sample(t, &mut self.rng);
            trace.arrivals_by_type[i] = count;
            self.arrived += count;
            self.arrived_by_type[i] += count;
            for _ in 0..count {
                let task = Task { task_type: i, arrival_slot: t };
                match arch {
                    Architecture::SubQueue => {
                        let m = self.route_subqueue(i, t);
                        let n = self.loc.level_of(i, m);
                        self.state.sub_queues[m][n].push_back(task);
                        trace.routed_type_server[i][m] += 1;
                        trace.routed_cell[m][n] += 1;
                    }
                    Architecture::Central => self.state.central_queues[i].push_back(task),
                    Architecture::SingleQueue => self.state.fcfs_queue.push_back(task),
                }
            }
        }

        // Deliberate corruption for monitor negative-control tests.
        if let Some(FaultInjection::PhantomTask { slot }) = self.fault {
            if slot == t {
                let task = Task { task_type: 0, arrival_slot: t };
                match arch {
                    Architecture::SubQueue => {
                        let n = self.loc.level_of(0, 0);
                        self.state.sub_queues[0][n].push_back(task);
                    }
                    Architecture::Central => self.state.central_queues[0].push_back(task),
                    Architecture::SingleQueue => self.state.fcfs_queue.push_back(task),
                }
            }
        }

        // Phase 3: scheduling decisions for idle servers, ascending index.
        for m in 0..ms {
            if !self.state.servers[m].is_idle() {
                continue;
            }
            match self.schedule_decision(m, t) {
                SchedulingDecision::Idle => {}
                SchedulingDecision::SubQueue(n) => {
                    let task = self.state.sub_queues[m][n].pop_front().expect("non-empty");
                    trace.served_cell[m][n] = 1;
                    self.start_service(m, task, n);
                }
                SchedulingDecision::TypeQueue(i) => {
                    let task = self.state.central_queues[i].pop_front().expect("non-empty");
                    trace.scheduled_by_type[i] += 1;
                    let n = self.loc.level_of(i, m);
                    self.start_service(m, task, n);
                }
                SchedulingDecision::FcfsHead => {
                    let task = self.state.fcfs_queue.pop_front().expect("non-empty");
                    trace.fcfs_assigned += 1;
                    let n = self.loc.level_of(task.task_type, m);
                    self.start_service(m, task, n);
                }
            }
        }

        // Phase 4: advance busy servers; zero remaining completes at slot end.
        for s in &mut self.state.servers {
            if let Some(sv) = &mut s.in_service {
                s.psi += 1;
                sv.remaining -= 1;
            }
        }

        // Phase 5: end-of-slot snapshots and derived trace quantities.
        if arch == Architecture::SubQueue {
            trace.sub_lens_after = (0..ms).map(|m| self.state.sub_queue_lens(m)).collect();
            trace.workload_after = (0..ms).map(|m| workload(&self.state, &self.loc, m)).collect();
            trace.unused = (0..ms)
                .map(|m| {
                    let last = self.loc.num_levels(m) - 1;
                    let s = trace.served_cell[m][last] as f64;
                    let a = trace.routed_cell[m][last] as f64;
                    let q = trace.sub_lens_before[m][last] as f64;
                    (s - a - q).max(0.0)
                })
                .collect();
        } else if arch == Architecture::Central {
            trace.central_lens_after = self.state.central_queues.iter().map(|q| q.len()).collect();
        } else {
            trace.fcfs_len_after = self.state.fcfs_queue.len();
        }

        if self.spec.invariant_checks {
            let mut v = check_invariants(&trace, &self.loc, arch);
            if t % self.sample_every == 0 {
                v.extend(self.check_conservation(t));
            }
            self.violations.extend(v);
        }
        if t % self.sample_every == 0 {
            // Saturating: fault injection can complete more than arrived.
            self.backlog.push((t, self.arrived.saturating_sub(self.completed)));
        }
        trace
    }

    /// Routing for the sub-queue architecture (phase 2), one task of type i.
    fn route_subqueue(&mut self, i: usize, t: u64) -> usize {
        let ms = self.state.servers.len();
        if let (Some(est), Some(sched)) = (&self.estimates, &self.spec.exploration) {
            if should_explore(sched, t, &mut self.rng) {
                return self.rng.gen_range(0..ms);
            }
            let w: Vec<f64> = (0..ms).map(|m| estimated_workload(&self.state, est, m)).collect();
            let mu: Vec<f64> = (0..ms).map(|m| est.rate_for(&self.loc, i, m)).collect();
            return route_min_weighted_workload(&w, &mu);
        }
        if let Some(est) = &self.estimates {
            // Blind without exploration: pure exploitation of the estimates.
            let w: Vec<f64> = (0..ms).map(|m| estimated_workload(&self.state, est, m)).collect();
            let mu: Vec<f64> = (0..ms).map(|m| est.rate_for(&self.loc, i, m)).collect();
            return route_min_weighted_workload(&w, &mu);
        }
        let w: Vec<f64> = (0..ms).map(|m| workload(&self.state, &self.loc, m)).collect();
        let mu: Vec<f64> = (0..ms).map(|m| self.spec.matrix.rate(i, m)).collect();
        route_min_weighted_workload(&w, &mu)
    }

    /// Scheduling decision for idle server m (phase 3).
    fn schedule_decision(&mut self, m: usize, t: u64) -> SchedulingDecision {
        let nt = self.spec.matrix.num_types();
        match self.spec.policy {
            PolicyKind::GbPandas => priority_schedule(&self.state.sub_queue_lens(m)),
            PolicyKind::BlindGbPandas => {
                let lens = self.state.sub_queue_lens(m);
                let nonempty = lens.iter().filter(|&&l| l > 0).count();
                if nonempty == 0 {
                    return SchedulingDecision::Idle;
                }
                if let Some(sched) = &self.spec.exploration {
                    if should_explore(sched, t, &mut self.rng) {
                        let k = self.rng.gen_range(0..nonempty);
                        let n = (0..lens.len()).filter(|&n| lens[n] > 0).nth(k).unwrap();
                        return SchedulingDecision::SubQueue(n);
                    }
                }
                priority_schedule(&lens)
            }
            PolicyKind::MaxWeight | PolicyKind::CMu { .. } => {
                let lens: Vec<usize> = self.state.central_queues.iter().map(|q| q.len()).collect();
                let mu: Vec<f64> = (0..nt).map(|i| self.spec.matrix.rate(i, m)).collect();
                match self.spec.policy {
                    PolicyKind::MaxWeight => max_weight_schedule(&lens, &mu),
                    PolicyKind::CMu { exponent } => cmu_schedule(&lens, &mu, exponent),
                    _ => unreachable!(),
                }
            }
            PolicyKind::BlindMaxWeight | PolicyKind::BlindCMu { .. } => {
                let lens: Vec<usize> = self.state.central_queues.iter().map(|q| q.len()).collect();
                let nonempty = lens.iter().filter(|&&l| l > 0).count();
                if nonempty == 0 {
                    return SchedulingDecision::Idle;
                }
                if let Some(sched) = &self.spec.exploration {
                    if should_explore(sched, t, &mut self.rng) {
                        let k = self.rng.gen_range(0..nonempty);
                        let i = (0..nt).filter(|&i| lens[i] > 0).nth(k).unwrap();
                        return SchedulingDecision::TypeQueue(i);
                    }
                }
                let est = self.estimates.as_ref().expect("blind policy has estimates");
                let mu: Vec<f64> = (0..nt).map(|i| est.rate_for(&self.loc, i, m)).collect();
                match self.spec.policy {
                    PolicyKind::BlindMaxWeight => max_weight_schedule(&lens, &mu),
                    PolicyKind::BlindCMu { exponent } => cmu_schedule(&lens, &mu, exponent),
                    _ => unreachable!(),
                }
            }
            PolicyKind::Fcfs => fcfs_schedule(self.state.fcfs_queue.len()),
        }
    }

    fn start_service(&mut self, m: usize, task: Task, level: usize) {
        let total = self.services[m][level].sample(&mut self.rng);
        self.state.servers[m].eta = Some(level);
        self.state.servers[m].in_service =
            Some(InService { task, source: level, remaining: total, total });
    }

    /// Recounts the state and compares with the arrival/completion counters.
    fn check_conservation(&self, t: u64) -> Vec<Violation> {
        let mut v = Vec::new();
        for i in 0..self.spec.matrix.num_types() {
            let in_system = self.state.tasks_of_type(i) as i64;
            let expect = self.arrived_by_type[i] as i64 - self.completed_by_type[i] as i64;
            if in_system != expect {
                v.push(Violation {
                    slot: t,
                    check: "conservation",
                    detail: format!("type {i}: counted {in_system}, expected {expect}"),
                });
            }
        }
        v
    }

    /// Runs to the horizon (stopping early if the monitor fires) and reports.
    pub fn run(mut self) -> MetricsReport {
        let horizon = self.spec.horizon;
        for _ in 0..horizon {
            self.step();
            if !self.violations.is_empty() {
                break;
            }
        }
        if self.violations.is_empty() && horizon > 0 {
            // Services that completed in the last slot finalize after the loop.
            self.finalize_completions(horizon + 1);
        }
        let lambda_total: f64 = self.spec.lambdas.iter().sum();
        MetricsReport {
            policy: self.spec.policy.name().to_string(),
            lambda_total,
            replication: 0,
            seed: 0,
            arrived: self.arrived,
            completed: self.completed,
            mean_completion_time: (self.completion_count > 0)
                .then(|| self.completion_sum / self.completion_count as f64),
            backlog_slope: backlog_slope(&self.backlog),
            invariant_violations: self.violations.len() as u64,
            violations: self.violations.iter().take(16).cloned().collect(),
            final_estimates: self.estimates,
        }
    }
}

/// Least-squares slope (tasks per slot) over the last half of the samples.
pub fn backlog_slope(samples: &[(u64, u64)]) -> f64 {
    let tail = &samples[samples.len() / 2..];
    if tail.len() < 2 {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|&(t, _)| t as f64).sum::<f64>() / n;
    let my = tail.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for &(t, y) in tail {
        let dx = t as f64 - mx;
        cov += dx * (y as f64 - my);
        var += dx * dx;
    }
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}

/// Per-slot runtime checks. For the sub-queue architecture this verifies:
/// queue bookkeeping (length after = before + routed - served), the routing
/// aggregation (cell counts match per-type counts through the level map),
/// the workload recursion W(t+1) = W(t) + A - S + U with pseudo quantities
/// in service-time units, the orthogonality of unused service and workload
/// (a server can only waste service when its workload is zero), and the
/// idle/psi consistency. Central and FCFS architectures get the matching
/// queue bookkeeping and idle/psi checks.
pub fn check_invariants(
    trace: &SlotTrace,
    loc: &LocalityStructure,
    arch: Architecture,
) -> Vec<Violation> {
    let mut v = Vec::new();
    let t = trace.slot;

    for (m, (&psi, &idle)) in trace.psi_before.iter().zip(&trace.idle_before).enumerate() {
        if idle != (psi == 0) {
            v.push(Violation {
                slot: t,
                check: "psi-idle",
                detail: format!("server {}: idle={idle} but psi={psi}", m + 1),
            });
        }
    }

    match arch {
        Architecture::SubQueue => {
            for m in 0..loc.num_servers() {
                for n in 0..loc.num_levels(m) {
                    let before = trace.sub_lens_before[m][n] as i64;
                    let after = trace.sub_lens_after[m][n] as i64;
                    let routed = trace.routed_cell[m][n] as i64;
                    let served = trace.served_cell[m][n] as i64;
                    if after != before + routed - served {
                        v.push(Violation {
                            slot: t,
                            check: "queue-dynamics",
                            detail: format!(
                                "cell ({}, {}): {before} + {routed} - {served} != {after}",
                                m + 1,
                                n + 1
                            ),
                        });
                    }
                    let agg: u64 =
                        loc.members(m, n).iter().map(|&i| trace.routed_type_server[i][m]).sum();
                    if agg != trace.routed_cell[m][n] {
                        v.push(Violation {
                            slot: t,
                            check: "routing-aggregation",
                            detail: format!(
                                "cell ({}, {}): per-type sum {agg} != cell count {}",
                                m + 1,
                                n + 1,
                                trace.routed_cell[m][n]
                            ),
                        });
                    }
                }
                // Recompute workloads from the length snapshots; do not trust
                // the engine's own workload fields beyond cross-checking them.
                let w_before: f64 = (0..loc.num_levels(m))
                    .map(|n| trace.sub_lens_before[m][n] as f64 / loc.level_rate(m, n))
                    .sum();
                let w_after: f64 = (0..loc.num_levels(m))
                    .map(|n| trace.sub_lens_after[m][n] as f64 / loc.level_rate(m, n))
                    .sum();
                for (have, want, name) in [
                    (trace.workload_before[m], w_before, "workload-snapshot-before"),
                    (trace.workload_after[m], w_after, "workload-snapshot-after"),
                ] {
                    if (have - want).abs() > CHECK_TOL {
                        v.push(Violation {
                            slot: t,
                            check: name,
                            detail: format!("server {}: {have} != {want}", m + 1),
                        });
                    }
                }
                let pseudo_a: f64 = (0..loc.num_levels(m))
                    .map(|n| trace.routed_cell[m][n] as f64 / loc.level_rate(m, n))
                    .sum();
                let pseudo_s: f64 = (0..loc.num_levels(m))
                    .map(|n| trace.served_cell[m][n] as f64 / loc.level_rate(m, n))
                    .sum();
                let last = loc.num_levels(m) - 1;
                let pseudo_u = trace.unused[m] / loc.level_rate(m, last);
                let rhs = w_before + pseudo_a - pseudo_s + pseudo_u;
                if (w_after - rhs).abs() > CHECK_TOL {
                    v.push(Violation {
                        slot: t,
                        check: "workload-recursion",
                        detail: format!("server {}: W'={w_after} vs {rhs}", m + 1),
                    });
                }
                if (w_before * pseudo_u).abs() > CHECK_TOL {
                    v.push(Violation {
                        slot: t,
                        check: "unused-orthogonality",
                        detail: format!(
                            "server {}: W={w_before} with unused {pseudo_u}",
                            m + 1
                        ),
                    });
                }
            }
        }
        Architecture::Central => {
            for i in 0..trace.central_lens_before.len() {
                let before = trace.central_lens_before[i] as i64;
                let after = trace.central_lens_after[i] as i64;
                let arr = trace.arrivals_by_type[i] as i64;
                let sched = trace.scheduled_by_type[i] as i64;
                if after != before + arr - sched {
                    v.push(Violation {
                        slot: t,
                        check: "queue-dynamics",
                        detail: format!("type {}: {before} + {arr} - {sched} != {after}", i + 1),
                    });
                }
            }
        }
        Architecture::SingleQueue => {
            let before = trace.fcfs_len_before as i64;
            let after = trace.fcfs_len_after as i64;
            let arr: i64 = trace.arrivals_by_type.iter().sum::<u64>() as i64;
            let assigned = trace.fcfs_assigned as i64;
            if after != before + arr - assigned {
                v.push(Violation {
                    slot: t,
                    check: "queue-dynamics",
                    detail: format!("fcfs: {before} + {arr} - {assigned} != {after}"),
                });
            }
        }
    }
    v
}

/// Runs `replications` independent replications, at most `max_threads` at a
/// time, with per-replication seeds split from the master seed. Reports come
/// back indexed by replication, so the output is order-deterministic.
pub fn run_replications(
    spec: &RunSpec,
    master_seed: u64,
    replications: u32,
    max_threads: usize,
) -> Result<Vec<MetricsReport>, Error> {
    run_replications_with(spec, master_seed, replications, max_threads, None)
}

/// As `run_replications`, optionally corrupting every replication with the
/// given fault (monitor negative controls).
pub fn run_replications_with(
    spec: &RunSpec,
    master_seed: u64,
    replications: u32,
    max_threads: usize,
    fault: Option<FaultInjection>,
) -> Result<Vec<MetricsReport>, Error> {
    spec.validate()?;
    let n = replications as usize;
    let results: Mutex<Vec<Option<MetricsReport>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let workers = max_threads.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= n {
                    break;
                }
                let seed = split_seed(master_seed, r as u64);
                // new() already validated by the caller; per-thread failures
                // would indicate identical spec errors, caught above.
                let mut engine = Engine::new(spec.clone(), seed).expect("validated spec");
                if let Some(f) = fault {
                    engine = engine.with_fault(f);
                }
                let mut report = engine.run();
                report.replication = r as u32 + 1;
                report.seed = seed;
                results.lock().unwrap()[r] = Some(report);
            });
        }
    });
    Ok(results.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect())
}

/// Mean and sample standard deviation over replications of a per-replication
/// statistic (completion time means, slopes).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(
        rates: Vec<Vec<f64>>,
        lambdas: Vec<f64>,
        arrival_kind: ArrivalKind,
        service_kind: ServiceKind,
        policy: PolicyKind,
        horizon: u64,
    ) -> RunSpec {
        RunSpec {
            matrix: RateMatrix::new(rates).unwrap(),
            lambdas,
            arrival_kind,
            arrival_cap: None,
            service_kind,
            s_max: crate::workloads::DEFAULT_S_MAX,
            policy,
            exploration: None,
            init_range: (0.1, 1.0),
            init_estimates: None,
            horizon,
            warmup: 0,
            invariant_checks: true,
        }
    }

    #[test]
    fn empty_system_is_a_fixed_point() {
        let s = spec(
            vec![vec![1.0]],
            vec![0.0],
            ArrivalKind::Poisson,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            100,
        );
        let report = Engine::new(s, 7).unwrap().run();
        assert_eq!(report.arrived, 0);
        assert_eq!(report.completed, 0);
        assert_eq!(report.mean_completion_time, None);
        assert_eq!(report.backlog_slope, 0.0);
        assert_eq!(report.invariant_violations, 0);
    }

    #[test]
    fn zero_horizon_is_an_empty_run() {
        let mut s = spec(
            vec![vec![1.0]],
            vec![0.5],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::GbPandas,
            0,
        );
        s.warmup = 0;
        let report = Engine::new(s, 7).unwrap().run();
        assert_eq!(report.arrived, 0);
        assert_eq!(report.mean_completion_time, None);
    }

    // One server at rate 1, one deterministic arrival per slot: every task is
    // routed, served, and completed within its arrival slot, so each scores
    // completion time 1 under the same-slot service convention.
    #[test]
    fn unit_service_completes_in_its_arrival_slot() {
        let s = spec(
            vec![vec![1.0]],
            vec![1.0],
            ArrivalKind::Deterministic,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            10,
        );
        let report = Engine::new(s, 1).unwrap().run();
        assert_eq!(report.arrived, 10);
        assert_eq!(report.completed, 10);
        assert_eq!(report.mean_completion_time, Some(1.0));
        assert_eq!(report.invariant_violations, 0);
    }

    #[test]
    fn warmup_excludes_early_completions_from_the_mean() {
        let mut s = spec(
            vec![vec![1.0]],
            vec![1.0],
            ArrivalKind::Deterministic,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            10,
        );
        s.warmup = 5;
        let report = Engine::new(s, 1).unwrap().run();
        assert_eq!(report.completed, 10);
        assert_eq!(report.mean_completion_time, Some(1.0));
    }

    // Two types, two servers, each type twice as fast on its own server.
    // The weighted-workload route sends every task to its fast server; both
    // sub-queues drain within the slot. Hand-checked slot by slot.
    #[test]
    fn matched_types_route_to_their_fast_servers() {
        let s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![1.0, 1.0],
            ArrivalKind::Deterministic,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            50,
        );
        let mut engine = Engine::new(s.clone(), 3).unwrap();
        let t1 = engine.step();
        assert_eq!(t1.arrivals_by_type, vec![1, 1]);
        assert_eq!(t1.routed_type_server[0], vec![1, 0]);
        assert_eq!(t1.routed_type_server[1], vec![0, 1]);
        assert_eq!(t1.routed_cell[0][0], 1);
        assert_eq!(t1.routed_cell[1][0], 1);
        assert_eq!(t1.served_cell[0][0], 1);
        assert_eq!(t1.served_cell[1][0], 1);
        assert_eq!(t1.workload_before, vec![0.0, 0.0]);
        assert_eq!(t1.workload_after, vec![0.0, 0.0]);
        let t2 = engine.step();
        assert_eq!(t2.idle_before, vec![true, true]);
        assert_eq!(t2.psi_before, vec![0, 0]);

        let report = Engine::new(s, 3).unwrap().run();
        assert_eq!(report.arrived, 100);
        assert_eq!(report.completed, 100);
        assert_eq!(report.mean_completion_time, Some(1.0));
        assert_eq!(report.backlog_slope, 0.0);
        assert_eq!(report.invariant_violations, 0);
    }

    // Rate 1/4 means a 4-slot deterministic service: the server must stay on
    // the same task for four slots (no preemption), completing at the end of
    // slot 4.
    #[test]
    fn service_is_non_preemptive_across_slots() {
        let s = spec(
            vec![vec![0.25]],
            vec![1.0],
            ArrivalKind::Deterministic,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            4,
        );
        let mut engine = Engine::new(s.clone(), 1).unwrap();
        let t1 = engine.step();
        assert_eq!(t1.served_cell[0][0], 1);
        assert!(!engine.state.servers[0].is_idle());
        assert_eq!(engine.state.servers[0].psi, 1);
        for expected_psi in [2, 3, 4] {
            let tr = engine.step();
            assert_eq!(tr.served_cell[0][0], 0, "slot {} must not reassign", tr.slot);
            assert_eq!(engine.state.servers[0].psi, expected_psi);
            assert_eq!(engine.state.servers[0].eta, Some(0));
        }
        assert_eq!(engine.state.servers[0].in_service.unwrap().remaining, 0);

        let report = Engine::new(s, 1).unwrap().run();
        assert_eq!(report.arrived, 4);
        assert_eq!(report.completed, 1);
        assert_eq!(report.mean_completion_time, Some(4.0));
        assert_eq!(report.invariant_violations, 0);
    }

    // Two deterministic arrivals per slot against unit service: backlog grows
    // by exactly one task per slot, so the fitted slope is exactly 1.
    #[test]
    fn overload_shows_unit_backlog_growth() {
        let s = spec(
            vec![vec![1.0]],
            vec![2.0],
            ArrivalKind::Deterministic,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            2_000,
        );
        let report = Engine::new(s, 1).unwrap().run();
        assert!((report.backlog_slope - 1.0).abs() < 1e-9, "slope {}", report.backlog_slope);
        assert_eq!(report.invariant_violations, 0);
    }

    #[test]
    fn identical_seed_reproduces_the_report() {
        let s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.6, 0.6],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::BlindGbPandas,
            3_000,
        );
        let mut s = s;
        s.exploration = Some(ExplorationSchedule::new(0.5, 1).unwrap());
        let a = Engine::new(s.clone(), 42).unwrap().run();
        let b = Engine::new(s.clone(), 42).unwrap().run();
        assert_eq!(a.arrived, b.arrived);
        assert_eq!(a.completed, b.completed);
        assert_eq!(a.mean_completion_time, b.mean_completion_time);
        assert_eq!(a.backlog_slope, b.backlog_slope);
        let c = Engine::new(s, 43).unwrap().run();
        assert_ne!(a.arrived, c.arrived);
    }

    // With estimates pinned to the true rates and exploration off, the blind
    // policy reproduces the standard one decision for decision: same seeds,
    // same arrival stream, same trajectories.
    #[test]
    fn truth_pinned_blind_matches_standard_policy() {
        let rates = vec![vec![1.0, 0.5], vec![0.125, 0.25]];
        let b = RateMatrix::new(rates.clone()).unwrap();
        let loc = build_locality_structure(&b);
        let truth: Vec<Vec<f64>> = (0..loc.num_servers())
            .map(|m| (0..loc.num_levels(m)).map(|n| loc.level_rate(m, n)).collect())
            .collect();

        let standard = spec(
            rates.clone(),
            vec![0.4, 0.1],
            ArrivalKind::Poisson,
            ServiceKind::Deterministic,
            PolicyKind::GbPandas,
            5_000,
        );
        let mut blind = spec(
            rates,
            vec![0.4, 0.1],
            ArrivalKind::Poisson,
            ServiceKind::Deterministic,
            PolicyKind::BlindGbPandas,
            5_000,
        );
        blind.init_estimates = Some(RateEstimates::with_values(truth, None).unwrap());

        let a = Engine::new(standard, 11).unwrap().run();
        let c = Engine::new(blind, 11).unwrap().run();
        assert_eq!(a.arrived, c.arrived);
        assert_eq!(a.completed, c.completed);
        assert_eq!(a.mean_completion_time, c.mean_completion_time);
        assert_eq!(a.backlog_slope, c.backlog_slope);
        assert_eq!(a.invariant_violations, 0);
        assert_eq!(c.invariant_violations, 0);
    }

    #[test]
    fn central_and_fcfs_architectures_run_checked() {
        for policy in [
            PolicyKind::MaxWeight,
            PolicyKind::CMu { exponent: 1.01 },
            PolicyKind::BlindMaxWeight,
            PolicyKind::BlindCMu { exponent: 1.01 },
            PolicyKind::Fcfs,
        ] {
            let mut s = spec(
                vec![vec![1.0, 0.5], vec![0.5, 1.0]],
                vec![0.5, 0.5],
                ArrivalKind::Poisson,
                ServiceKind::Geometric,
                policy,
                2_000,
            );
            if policy.is_blind() {
                s.exploration = Some(ExplorationSchedule::new(0.5, 1).unwrap());
            }
            let report = Engine::new(s, 9).unwrap().run();
            assert_eq!(report.invariant_violations, 0, "{}", policy.name());
            assert!(report.completed > 0, "{}", policy.name());
        }
    }

    #[test]
    fn estimates_converge_on_deterministic_durations() {
        let mut s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.5, 0.5],
            ArrivalKind::Poisson,
            ServiceKind::Deterministic,
            PolicyKind::BlindGbPandas,
            4_000,
        );
        s.exploration = Some(ExplorationSchedule::new(0.5, 1).unwrap());
        let report = Engine::new(s, 5).unwrap().run();
        let est = report.final_estimates.unwrap();
        for m in 0..2 {
            for n in 0..2 {
                if est.count(m, n) > 0 {
                    let alpha = if n == 0 { 1.0 } else { 0.5 };
                    assert!(
                        (est.estimate(m, n) - alpha).abs() < 1e-12,
                        "cell ({m}, {n}): {} vs {alpha}",
                        est.estimate(m, n)
                    );
                }
            }
        }
    }

    #[test]
    fn phantom_task_trips_the_monitor() {
        let s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.5, 0.5],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::GbPandas,
            2_000,
        );
        let report = Engine::new(s, 9)
            .unwrap()
            .with_fault(FaultInjection::PhantomTask { slot: 50 })
            .run();
        assert!(report.invariant_violations > 0);
        assert_eq!(report.violations[0].slot, 50);
        assert_eq!(report.violations[0].check, "queue-dynamics");
    }

    #[test]
    fn phantom_task_passes_silently_without_checks() {
        let mut s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.5, 0.5],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::GbPandas,
            200,
        );
        s.invariant_checks = false;
        let report = Engine::new(s, 9)
            .unwrap()
            .with_fault(FaultInjection::PhantomTask { slot: 50 })
            .run();
        assert_eq!(report.invariant_violations, 0);
    }

    #[test]
    fn replications_use_split_seeds_and_keep_order() {
        let s = spec(
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![0.5, 0.5],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::GbPandas,
            500,
        );
        let reports = run_replications(&s, 99, 3, 2).unwrap();
        assert_eq!(reports.len(), 3);
        for (r, rep) in reports.iter().enumerate() {
            assert_eq!(rep.replication as usize, r + 1);
            assert_eq!(rep.seed, split_seed(99, r as u64));
        }
        let again = run_replications(&s, 99, 3, 1).unwrap();
        for (a, b) in reports.iter().zip(&again) {
            assert_eq!(a.arrived, b.arrived);
            assert_eq!(a.mean_completion_time, b.mean_completion_time);
        }
        assert_ne!(reports[0].arrived, reports[1].arrived);
    }

    #[test]
    fn split_seed_is_stable_and_spreads() {
        assert_eq!(split_seed(1, 0), split_seed(1, 0));
        assert_ne!(split_seed(1, 0), split_seed(1, 1));
        assert_ne!(split_seed(1, 0), split_seed(2, 0));
    }

    #[test]
    fn slope_fits_the_sampled_tail() {
        let flat: Vec<(u64, u64)> = (1..=10).map(|t| (t, 5)).collect();
        assert_eq!(backlog_slope(&flat), 0.0);
        let linear: Vec<(u64, u64)> = (1..=10).map(|t| (t, 2 * t)).collect();
        assert!((backlog_slope(&linear) - 2.0).abs() < 1e-12);
        assert_eq!(backlog_slope(&[(1, 3)]), 0.0);
        assert_eq!(backlog_slope(&[]), 0.0);
    }

    #[test]
    fn mean_and_std_of_known_sample() {
        let (m, s) = mean_and_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        let (m1, s1) = mean_and_std(&[4.0]);
        assert_eq!((m1, s1), (4.0, 0.0));
        assert!(mean_and_std(&[]).0.is_nan());
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut s = spec(
            vec![vec![1.0]],
            vec![1.0, 1.0],
            ArrivalKind::Poisson,
            ServiceKind::Geometric,
            PolicyKind::GbPandas,
            100,
        );
        assert!(Engine::new(s.clone(), 1).is_err());
        s.lambdas = vec![1.0];
        s.warmup = 100;
        assert!(Engine::new(s, 1).is_err());
    }
}
