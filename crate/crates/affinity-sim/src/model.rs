//! Core system model: rate matrix, locality structure, tasks, and the
//! discrete-time system state shared by every policy architecture.
//!
//! A system has `num_types` task types and `num_servers` servers. Entry
//! `(i, m)` of the rate matrix is the service rate of a type-`i` task on
//! server `m`; its mean service time is the reciprocal. Server `m` groups
//! the task types by exact rate equality into locality levels ordered by
//! descending rate; level 0 is the fastest. Sub-queue `(m, n)` holds the
//! queued tasks of level `n` at server `m`.
//!
//! All indices are 0-based internally; reports and CSV output are 1-based.

use std::collections::VecDeque;

use crate::error::Error;

/// Service rates per (type, server). Rows are task types.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    rates: Vec<Vec<f64>>,
}

impl RateMatrix {
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self, Error> {
        if rates.is_empty() || rates[0].is_empty() {
            return Err(Error::invalid_input("rate matrix must be non-empty"));
        }
        let m = rates[0].len();
        for row in &rates {
            if row.len() != m {
                return Err(Error::invalid_input("rate matrix rows must have equal length"));
            }
            for &r in row {
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::invalid_input(format!(
                        "service rates must be positive and finite, got {r}"
                    )));
                }
            }
        }
        Ok(Self { rates })
    }

    pub fn num_types(&self) -> usize {
        self.rates.len()
    }

    pub fn num_servers(&self) -> usize {
        self.rates[0].len()
    }

    /// Service rate of task type `i` on server `m`.
    pub fn rate(&self, i: usize, m: usize) -> f64 {
        self.rates[i][m]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rates
    }
}

/// Locality levels per server, derived from exact rate equality.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityStructure {
    /// Distinct rates per server, strictly descending; `levels[m][n]` is
    /// the true rate of sub-queue `(m, n)`.
    levels: Vec<Vec<f64>>,
    /// `level_of[i][m]` is the level index of type `i` on server `m`.
    level_of: Vec<Vec<usize>>,
    /// `members[m][n]` lists the task types at level `(m, n)`, ascending.
    members: Vec<Vec<Vec<usize>>>,
}

impl LocalityStructure {
    /// Number of levels at server `m`.
    pub fn num_levels(&self, m: usize) -> usize {
        self.levels[m].len()
    }

    pub fn num_servers(&self) -> usize {
        self.levels.len()
    }

    pub fn num_types(&self) -> usize {
        self.level_of.len()
    }

    /// True rate of sub-queue `(m, n)`.
    pub fn level_rate(&self, m: usize, n: usize) -> f64 {
        self.levels[m][n]
    }

    pub fn level_of(&self, i: usize, m: usize) -> usize {
        self.level_of[i][m]
    }

    /// Task types whose rate on server `m` equals the level-`n` rate.
    pub fn members(&self, m: usize, n: usize) -> &[usize] {
        &self.members[m][n]
    }
}

/// Groups each server's column by exact rate equality, descending.
pub fn build_locality_structure(b: &RateMatrix) -> LocalityStructure {
    let nt = b.num_types();
    let ms = b.num_servers();
    let mut levels = Vec::with_capacity(ms);
    let mut members = Vec::with_capacity(ms);
    let mut level_of = vec![vec![0usize; ms]; nt];
    for m in 0..ms {
        let mut distinct: Vec<f64> = (0..nt).map(|i| b.rate(i, m)).collect();
        distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
        distinct.dedup();
        let mut sets = vec![Vec::new(); distinct.len()];
        for i in 0..nt {
            let n = distinct.iter().position(|&a| a == b.rate(i, m)).unwrap();
            level_of[i][m] = n;
            sets[n].push(i);
        }
        levels.push(distinct);
        members.push(sets);
    }
    LocalityStructure { levels, level_of, members }
}

/// A task carries its type and arrival slot; completion is recorded by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub task_type: usize,
    pub arrival_slot: u64,
}

/// A task occupying a server, with its sampled total duration.
#[derive(Debug, Clone, Copy)]
pub struct InService {
    pub task: Task,
    /// Level (sub-queue architecture) or task type (central/FCFS) it was taken from.
    pub source: usize,
    pub remaining: u64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// `None` while idle; otherwise the level or type being served.
    pub eta: Option<usize>,
    /// Slots allocated to the in-service task as of the start of the slot.
    pub psi: u64,
    pub in_service: Option<InService>,
}

impl ServerState {
    fn idle() -> Self {
        ServerState { eta: None, psi: 0, in_service: None }
    }

    pub fn is_idle(&self) -> bool {
        self.in_service.is_none()
    }
}

/// Queue containers for all three policy architectures; a run uses one of them.
#[derive(Debug, Clone)]
pub struct SystemState {
    /// Slot counter, starting at 1 for the first simulated slot.
    pub clock: u64,
    /// `sub_queues[m][n]`: FIFO per (server, level).
    pub sub_queues: Vec<Vec<VecDeque<Task>>>,
    /// `central_queues[i]`: FIFO per task type.
    pub central_queues: Vec<VecDeque<Task>>,
    /// Single FIFO shared by all servers.
    pub fcfs_queue: VecDeque<Task>,
    pub servers: Vec<ServerState>,
}

impl SystemState {
    pub fn empty(loc: &LocalityStructure) -> Self {
        let sub_queues = (0..loc.num_servers())
            .map(|m| (0..loc.num_levels(m)).map(|_| VecDeque::new()).collect())
            .collect();
        SystemState {
            clock: 0,
            sub_queues,
            central_queues: (0..loc.num_types()).map(|_| VecDeque::new()).collect(),
            fcfs_queue: VecDeque::new(),
            servers: (0..loc.num_servers()).map(|_| ServerState::idle()).collect(),
        }
    }

    /// Queued tasks at server `m` (sub-queue architecture), excluding in-service.
    pub fn sub_queue_lens(&self, m: usize) -> Vec<usize> {
        self.sub_queues[m].iter().map(|q| q.len()).collect()
    }

    /// Total tasks in the system: queued plus in service.
    pub fn tasks_in_system(&self) -> usize {
        let queued: usize = self.sub_queues.iter().flatten().map(|q| q.len()).sum::<usize>()
            + self.central_queues.iter().map(|q| q.len()).sum::<usize>()
            + self.fcfs_queue.len();
        let busy = self.servers.iter().filter(|s| !s.is_idle()).count();
        queued + busy
    }

    /// Tasks of one type anywhere in the system.
    pub fn tasks_of_type(&self, i: usize) -> usize {
        let queued: usize = self
            .sub_queues
            .iter()
            .flatten()
            .map(|q| q.iter().filter(|t| t.task_type == i).count())
            .sum::<usize>()
            + self.central_queues[i].len()
            + self.fcfs_queue.iter().filter(|t| t.task_type == i).count();
        let busy = self
            .servers
            .iter()
            .filter_map(|s| s.in_service.as_ref())
            .filter(|s| s.task.task_type == i)
            .count();
        queued + busy
    }
}

/// Workload of server `m`: queued tasks weighted by their mean service time,
/// summed over sub-queues. In-service tasks are excluded.
pub fn workload(state: &SystemState, loc: &LocalityStructure, m: usize) -> f64 {
    state.sub_queues[m]
        .iter()
        .enumerate()
        .map(|(n, q)| q.len() as f64 / loc.level_rate(m, n))
        .sum()
}
