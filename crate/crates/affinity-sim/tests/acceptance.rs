//! Acceptance gate: one test per shipping criterion.
//!
//! Each test asserts its criterion at the stated tolerance and ends with a
//! single `criterion N ...: PASS` line (visible with `--nocapture`); a
//! failing criterion panics with the measured numbers in the message.
//! The heavy 2*10^5-slot batches are simulated once in a shared fixture and
//! read by criteria 2, 3 and 4.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use affinity_sim::capacity::max_scalar_throughput;
use affinity_sim::estimation::RateEstimates;
use affinity_sim::model::build_locality_structure;
use affinity_sim::policies::{
    cmu_schedule, fcfs_schedule, max_weight_schedule, priority_schedule,
    route_min_weighted_workload, PolicyKind, SchedulingDecision,
};
use affinity_sim::report::{estimates_to_csv, results_to_csv};
use affinity_sim::scenario::{mislearning_spec, Scenario};
use affinity_sim::sim::{mean_and_std, run_replications, MetricsReport};

fn threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Replication batches at the heavy-traffic operating points. The three
/// blind policies run under both service families the stability criteria
/// allow: deterministic for the slope checks (cleanest), geometric for the
/// completion-time comparison (replication spread is honest there).
struct Heavy {
    /// Blind trio, deterministic services, total rate 2.4 (inside capacity).
    det24: Vec<(String, Vec<MetricsReport>)>,
    det24_elapsed: Duration,
    /// Blind trio, deterministic services, total rate 2.6 (beyond capacity).
    det26: Vec<(String, Vec<MetricsReport>)>,
    /// Blind trio, geometric services, total rate 2.4.
    geo24: Vec<(String, Vec<MetricsReport>)>,
    /// FCFS, geometric services, total rate 2.4.
    fcfs24: Vec<MetricsReport>,
}

static HEAVY: OnceLock<Heavy> = OnceLock::new();

fn heavy() -> &'static Heavy {
    HEAVY.get_or_init(|| {
        let mut det = Scenario::reference();
        det.services.kind = "deterministic".into();
        let mut geo = Scenario::reference();
        geo.services.kind = "geometric".into();
        let seed = det.engine.seed;
        let reps = det.engine.replications;
        let trio = [
            PolicyKind::BlindGbPandas,
            PolicyKind::BlindMaxWeight,
            PolicyKind::BlindCMu { exponent: 1.01 },
        ];
        let batch = |scn: &Scenario, policy: PolicyKind, lambda: f64| {
            let spec = scn.run_spec(policy, lambda).unwrap();
            let reports = run_replications(&spec, seed, reps, threads()).unwrap();
            (policy.name().to_string(), reports)
        };

        let t0 = Instant::now();
        let det24 = trio.iter().map(|&p| batch(&det, p, 2.4)).collect();
        let det24_elapsed = t0.elapsed();
        let det26 = trio.iter().map(|&p| batch(&det, p, 2.6)).collect();
        let geo24 = trio.iter().map(|&p| batch(&geo, p, 2.4)).collect();
        let fcfs24 = batch(&geo, PolicyKind::Fcfs, 2.4).1;
        Heavy { det24, det24_elapsed, det26, geo24, fcfs24 }
    })
}

fn mean_completion(reports: &[MetricsReport]) -> Vec<f64> {
    reports.iter().map(|r| r.mean_completion_time.expect("completions recorded")).collect()
}

#[test]
fn criterion_1_capacity_peak_rate() {
    let scn = Scenario::reference();
    let b = scn.rate_matrix().unwrap();
    let t0 = Instant::now();
    let peak = max_scalar_throughput(&b, &scn.arrivals.proportions, 1e-7).unwrap();
    let elapsed = t0.elapsed();
    assert!(
        (peak - 2.5).abs() <= 1e-5,
        "peak total rate {peak} is not 2.5 within 1e-5"
    );
    assert!(elapsed < Duration::from_secs(1), "capacity solve took {elapsed:?}, budget 1s");
    println!("criterion 1 (capacity peak rate): PASS peak={peak:.7} in {elapsed:?}");
}

#[test]
fn criterion_2_stability_inside_capacity() {
    let h = heavy();
    for (name, reports) in &h.det24 {
        for r in reports {
            assert_eq!(
                r.invariant_violations, 0,
                "{name} rep {} at 2.4: {} invariant violations",
                r.replication, r.invariant_violations
            );
            assert!(
                r.backlog_slope.abs() < 1e-3,
                "{name} rep {} at 2.4: backlog slope {} exceeds 1e-3",
                r.replication, r.backlog_slope
            );
        }
    }
    assert!(
        h.det24_elapsed < Duration::from_secs(120),
        "2.4 batch took {:?}, budget 120s",
        h.det24_elapsed
    );
    println!(
        "criterion 2 (stability inside capacity): PASS 3 policies x 5 reps, \
         max |slope| {:.2e}, 0 violations, {:?}",
        h.det24
            .iter()
            .flat_map(|(_, rs)| rs.iter().map(|r| r.backlog_slope.abs()))
            .fold(0.0f64, f64::max),
        h.det24_elapsed
    );
}

#[test]
fn criterion_3_instability_beyond_capacity() {
    let h = heavy();
    for (name, reports) in &h.det26 {
        for r in reports {
            assert!(
                r.backlog_slope > 0.01,
                "{name} rep {} at 2.6: backlog slope {} is not > 0.01",
                r.replication, r.backlog_slope
            );
        }
    }
    println!(
        "criterion 3 (instability beyond capacity): PASS min slope {:.4}",
        h.det26
            .iter()
            .flat_map(|(_, rs)| rs.iter().map(|r| r.backlog_slope))
            .fold(f64::INFINITY, f64::min)
    );
}

#[test]
fn criterion_4_heavy_traffic_ordering() {
    let h = heavy();
    let stats: Vec<(String, f64, f64)> = h
        .geo24
        .iter()
        .map(|(name, reports)| {
            let (m, s) = mean_and_std(&mean_completion(reports));
            (name.clone(), m, s)
        })
        .collect();
    let table = stats
        .iter()
        .map(|(n, m, s)| format!("{n} {m:.4}+/-{s:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let find = |name: &str| stats.iter().find(|(n, _, _)| n == name).unwrap();
    let (_, gbp, gbp_sd) = find("blind-gb-pandas");
    let (_, mw, mw_sd) = find("blind-max-weight");
    let (_, cmu, cmu_sd) = find("blind-c-mu");

    let min_fcfs_slope =
        h.fcfs24.iter().map(|r| r.backlog_slope).fold(f64::INFINITY, f64::min);
    assert!(
        min_fcfs_slope > 1e-2,
        "fcfs at 2.4: min backlog slope {min_fcfs_slope} is not > 1e-2"
    );
    assert!(
        gbp + 2.0 * gbp_sd < mw - 2.0 * mw_sd,
        "blind-gb-pandas is not below blind-max-weight with separated \
         2-sigma intervals at 2.4: {table}"
    );
    assert!(
        gbp + 2.0 * gbp_sd < cmu - 2.0 * cmu_sd,
        "blind-gb-pandas is not below blind-c-mu with separated 2-sigma \
         intervals at 2.4: {table}"
    );
    println!("criterion 4 (heavy-traffic ordering): PASS {table}, fcfs slope {min_fcfs_slope:.3}");
}

#[test]
fn criterion_5_mislearning_counterexample() {
    let t0 = Instant::now();
    let run = |lambda: f64, explore: bool| {
        let spec = mislearning_spec(lambda, 20_000, 2_000, explore);
        run_replications(&spec, 1, 3, threads()).unwrap()
    };
    let stuck_04 = run(0.4, false);
    let free_04 = run(0.4, true);
    let stuck_07 = run(0.7, false);
    let free_07 = run(0.7, true);
    let elapsed = t0.elapsed();

    let (stuck_mean, _) = mean_and_std(&mean_completion(&stuck_04));
    let (free_mean, _) = mean_and_std(&mean_completion(&free_04));
    let ratio = stuck_mean / free_mean;
    assert!(
        (1.8..=2.2).contains(&ratio),
        "mislearned/recovered completion-time ratio {ratio:.4} outside [1.8, 2.2] \
         (stuck {stuck_mean:.4}, recovered {free_mean:.4})"
    );
    let min_stuck_slope =
        stuck_07.iter().map(|r| r.backlog_slope).fold(f64::INFINITY, f64::min);
    assert!(
        min_stuck_slope > 1e-3,
        "no-exploration arm at 0.7 per type should diverge; min slope {min_stuck_slope}"
    );
    let max_free_slope =
        free_07.iter().map(|r| r.backlog_slope.abs()).fold(0.0f64, f64::max);
    assert!(
        max_free_slope < 1e-3,
        "exploration arm at 0.7 per type should be stable; max |slope| {max_free_slope}"
    );
    assert!(elapsed < Duration::from_secs(30), "counterexample took {elapsed:?}, budget 30s");
    println!(
        "criterion 5 (mislearning counterexample): PASS ratio {ratio:.4}, \
         stuck slope {min_stuck_slope:.4}, recovered slope {max_free_slope:.1e}, {elapsed:?}"
    );
}

/// Mean of 1/T for geometric(p) durations, by truncated series (summed
/// smallest-first), cross-checked against the closed form -p*ln(p)/(1-p).
fn geometric_mean_reciprocal(p: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    let mut terms = Vec::with_capacity(10_000);
    let mut tail = p;
    for k in 1..=10_000u64 {
        terms.push(tail / k as f64);
        tail *= 1.0 - p;
    }
    let series: f64 = terms.iter().rev().sum();
    let closed = -p * p.ln() / (1.0 - p);
    assert!(
        (series - closed).abs() <= 1e-12,
        "series {series} and closed form {closed} disagree at p={p}"
    );
    closed
}

#[test]
fn criterion_6_estimator_accuracy() {
    // Frozen oracle values for the three rates in the reference matrix.
    for (p, expect) in [(1.0, 1.0), (0.5, 0.693147180559945), (0.25, 0.462098120373297)] {
        assert!(
            (geometric_mean_reciprocal(p) - expect).abs() <= 1e-12,
            "oracle mismatch at p={p}"
        );
    }

    // Exact closed form of the update rule: after k observations the
    // estimate equals the plain average of the observed rates 1/T.
    let mut est = RateEstimates::with_values(vec![vec![0.42]], None).unwrap();
    let mut sum = 0.0;
    for j in 1..=1_000u64 {
        let t_obs = (j % 9) + 1;
        est.record_service(0, 0, t_obs).unwrap();
        sum += 1.0 / t_obs as f64;
        let direct = sum / j as f64;
        assert!(
            (est.estimate(0, 0) - direct).abs() <= 1e-12,
            "running mean diverged from direct mean at observation {j}"
        );
    }

    // Well-visited cells of a long blind run sit within 5% of the oracle.
    let mut scn = Scenario::reference();
    scn.services.kind = "geometric".into();
    let spec = scn.run_spec(PolicyKind::BlindGbPandas, 2.0).unwrap();
    let reports = run_replications(&spec, scn.engine.seed, 1, threads()).unwrap();
    let est = reports[0].final_estimates.as_ref().expect("blind run keeps estimates");
    let loc = build_locality_structure(&spec.matrix);
    let mut visited = 0;
    for m in 0..loc.num_servers() {
        for n in 0..loc.num_levels(m) {
            if est.count(m, n) < 10_000 {
                continue;
            }
            visited += 1;
            let oracle = geometric_mean_reciprocal(loc.level_rate(m, n));
            let rel = (est.estimate(m, n) - oracle).abs() / oracle;
            assert!(
                rel <= 0.05,
                "server {m} level {n}: estimate {} vs oracle {oracle} \
                 (relative error {rel:.4}, {} observations)",
                est.estimate(m, n),
                est.count(m, n)
            );
        }
    }
    assert!(visited >= 3, "only {visited} cells reached 10^4 observations");
    println!("criterion 6 (estimator accuracy): PASS {visited} cells within 5% of E[1/T]");
}

/// Plain-loop re-implementations of every decision rule, kept deliberately
/// independent of the library code. Tie handling follows the documented
/// rules: routing ties prefer the larger rate then the smaller index;
/// scheduling ties prefer the smaller type index.
mod brute {
    use super::SchedulingDecision;

    const EPS: f64 = 1e-12;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= EPS * a.abs().max(b.abs()).max(1.0)
    }

    pub fn route(w: &[f64], mu: &[f64]) -> usize {
        let score = |m: usize| w[m] / mu[m];
        let mut min = f64::INFINITY;
        for m in 0..w.len() {
            if score(m) < min {
                min = score(m);
            }
        }
        let mut best = usize::MAX;
        let mut best_mu = f64::MIN;
        for m in 0..w.len() {
            if close(score(m), min) && mu[m] > best_mu + EPS {
                best = m;
                best_mu = mu[m];
            }
        }
        best
    }

    pub fn priority(lens: &[usize]) -> SchedulingDecision {
        for (n, &l) in lens.iter().enumerate() {
            if l > 0 {
                return SchedulingDecision::SubQueue(n);
            }
        }
        SchedulingDecision::Idle
    }

    fn argmax(lens: &[usize], scores: &[f64]) -> SchedulingDecision {
        let mut best: Option<usize> = None;
        for i in 0..lens.len() {
            if lens[i] == 0 {
                continue;
            }
            match best {
                Some(b) if !(scores[i] > scores[b] + EPS * scores[i].abs().max(scores[b].abs()).max(1.0)) => {}
                _ => best = Some(i),
            }
        }
        best.map_or(SchedulingDecision::Idle, SchedulingDecision::TypeQueue)
    }

    pub fn max_weight(lens: &[usize], mu: &[f64]) -> SchedulingDecision {
        let scores: Vec<f64> = (0..lens.len()).map(|i| mu[i] * lens[i] as f64).collect();
        argmax(lens, &scores)
    }

    pub fn cmu(lens: &[usize], mu: &[f64], a: f64) -> SchedulingDecision {
        let scores: Vec<f64> =
            (0..lens.len()).map(|i| mu[i] * a * (lens[i] as f64).powf(a - 1.0)).collect();
        argmax(lens, &scores)
    }

    pub fn fcfs(len: usize) -> SchedulingDecision {
        if len > 0 {
            SchedulingDecision::FcfsHead
        } else {
            SchedulingDecision::Idle
        }
    }
}

#[test]
fn criterion_7_decision_oracle_equivalence() {
    // Self-contained xorshift so the instance stream is frozen.
    let mut s = 0x9E3779B97F4A7C15u64;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    };
    let rates = [0.25, 0.5, 1.0, 2.0];
    let exponents = [1.01, 1.5, 2.0];
    let mut decisions = 0u64;
    for _ in 0..1_000 {
        let servers = 1 + (next() % 5) as usize;
        let types = 1 + (next() % 5) as usize;

        // Routing instance: workloads on a coarse grid so ties occur.
        let w: Vec<f64> = (0..servers).map(|_| (next() % 8) as f64 * 0.5).collect();
        let mu_row: Vec<f64> = (0..servers).map(|_| rates[(next() % 4) as usize]).collect();
        assert_eq!(
            route_min_weighted_workload(&w, &mu_row),
            brute::route(&w, &mu_row),
            "routing mismatch on w={w:?} mu={mu_row:?}"
        );

        // Scheduling instances on one server's column.
        let lens: Vec<usize> = (0..types).map(|_| (next() % 6) as usize).collect();
        let mu_col: Vec<f64> = (0..types).map(|_| rates[(next() % 4) as usize]).collect();
        let a = exponents[(next() % 3) as usize];
        assert_eq!(priority_schedule(&lens), brute::priority(&lens), "priority mismatch on {lens:?}");
        assert_eq!(
            max_weight_schedule(&lens, &mu_col),
            brute::max_weight(&lens, &mu_col),
            "max-weight mismatch on q={lens:?} mu={mu_col:?}"
        );
        assert_eq!(
            cmu_schedule(&lens, &mu_col, a),
            brute::cmu(&lens, &mu_col, a),
            "c-mu mismatch on q={lens:?} mu={mu_col:?} a={a}"
        );
        assert_eq!(fcfs_schedule(lens[0]), brute::fcfs(lens[0]));
        decisions += 5;
    }
    println!("criterion 7 (decision oracle equivalence): PASS {decisions} decisions, 0 mismatches");
}

#[test]
fn criterion_8_runtime_identities() {
    let mut scn = Scenario::reference();
    scn.services.kind = "geometric".into();
    let mut spec = scn.run_spec(PolicyKind::BlindGbPandas, 2.0).unwrap();
    spec.horizon = 100_000;
    spec.warmup = 10_000;
    spec.invariant_checks = true;
    let reports = run_replications(&spec, 7, 1, threads()).unwrap();
    let r = &reports[0];
    assert!(r.completed > 0, "run completed no tasks");
    assert_eq!(
        r.invariant_violations, 0,
        "per-slot identities violated {} times; first: {:?}",
        r.invariant_violations,
        r.violations.first()
    );
    println!(
        "criterion 8 (runtime identities): PASS 10^5 checked slots, {} completions, 0 violations",
        r.completed
    );
}

#[test]
fn criterion_9_csv_determinism() {
    let mut scn = Scenario::reference();
    scn.services.kind = "geometric".into();
    let mut spec = scn.run_spec(PolicyKind::BlindGbPandas, 2.0).unwrap();
    spec.horizon = 20_000;
    spec.warmup = 2_000;
    let loc = build_locality_structure(&spec.matrix);
    let once = run_replications(&spec, 99, 2, threads()).unwrap();
    let twice = run_replications(&spec, 99, 2, threads()).unwrap();
    assert_eq!(
        results_to_csv(&once),
        results_to_csv(&twice),
        "results CSV differs between identical runs"
    );
    assert_eq!(
        estimates_to_csv(&once, &loc),
        estimates_to_csv(&twice, &loc),
        "estimates CSV differs between identical runs"
    );
    println!(
        "criterion 9 (csv determinism): PASS {} result bytes byte-identical",
        results_to_csv(&once).len()
    );
}
