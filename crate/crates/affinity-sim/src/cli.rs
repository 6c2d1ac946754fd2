//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 an engine
//! invariant fired, 4 internal inconsistency (a self check failed for a
//! reason other than the monitor).
//!
//! Environment:
//! - `AFFINITY_SIM_THREADS` caps the replication worker threads;
//! - `AFFINITY_SIM_INJECT_FAULT=1` corrupts a queue update at slot 1000 of
//!   every run, a negative control proving the monitor catches real bugs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::capacity::{feasible_decomposition, max_scalar_throughput};
use crate::error::Error;
use crate::estimation::RateEstimates;
use crate::model::{build_locality_structure, RateMatrix};
use crate::policies::PolicyKind;
use crate::report::{estimates_to_csv, parse_results_csv, results_to_csv, summarize};
use crate::scenario::{mislearning_spec, Scenario};
use crate::sim::{
    mean_and_std, run_replications_with, Engine, FaultInjection, MetricsReport, RunSpec,
};
use crate::workloads::{ArrivalKind, ServiceKind};

#[derive(Parser)]
#[command(
    name = "affinity-sim",
    version,
    about = "Discrete-time affinity-scheduling simulator with learned service rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured policy sweep and write CSV results
    #[command(alias = "sweep")]
    Run(RunArgs),
    /// Report feasibility of the configured rates and the peak total rate
    Capacity(ConfigOnlyArgs),
    /// Contrast exploration on/off under an adversarial initial belief
    Counterexample(CounterexampleArgs),
    /// Render a results CSV to a self-contained SVG
    Plot(PlotArgs),
    /// Self checks: solver, engine bookkeeping, determinism, monitor
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML); defaults to the built-in reference scenario
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv and estimates.csv
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Skip the per-slot invariant monitor
    #[arg(long)]
    no_invariants: bool,
}

#[derive(Args)]
struct ConfigOnlyArgs {
    /// Scenario file (TOML); defaults to the built-in reference scenario
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CounterexampleArgs {
    /// Output directory for counterexample.csv
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    horizon: u64,
    #[arg(long, default_value_t = 2_000)]
    warmup: u64,
    #[arg(long, default_value_t = 3)]
    replications: u32,
}

#[derive(Args)]
struct PlotArgs {
    /// A results.csv produced by the run subcommand
    #[arg(long)]
    input: PathBuf,
    /// Output SVG path
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("AFFINITY_SIM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn injected_fault() -> Option<FaultInjection> {
    (std::env::var("AFFINITY_SIM_INJECT_FAULT").as_deref() == Ok("1"))
        .then_some(FaultInjection::PhantomTask { slot: 1000 })
}

fn load_scenario(config: &Option<PathBuf>) -> Result<Scenario, Error> {
    match config {
        Some(path) => Scenario::load(path),
        None => Ok(Scenario::reference()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Internal(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, contents)
        .map_err(|e| Error::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Capacity(args) => cmd_capacity(args),
        Command::Counterexample(args) => cmd_counterexample(args),
        Command::Plot(args) => cmd_plot(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::Config(_) => 2,
                Error::InvariantViolation { .. } => 3,
                Error::Internal(_) => 4,
            }
        }
    }
}

fn first_violation(reports: &[MetricsReport]) -> Option<Error> {
    reports
        .iter()
        .flat_map(|r| r.violations.iter())
        .next()
        .map(|v| Error::InvariantViolation { slot: v.slot, detail: format!("{}: {}", v.check, v.detail) })
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut scenario = load_scenario(&args.config)?;
    if let Some(seed) = args.seed {
        scenario.engine.seed = seed;
    }
    if args.no_invariants {
        scenario.engine.invariant_checks = false;
    }
    scenario.validate()?;

    let threads = worker_threads();
    let fault = injected_fault();
    let loc = build_locality_structure(&scenario.rate_matrix()?);
    let started = Instant::now();

    // All cells share the master seed: replication r sees the same arrival
    // randomness under every policy, which sharpens policy comparisons.
    let mut reports = Vec::new();
    for policy in scenario.policy_kinds()? {
        for &lambda in &scenario.arrivals.lambdas {
            let spec = scenario.run_spec(policy, lambda)?;
            let cell = run_replications_with(
                &spec,
                scenario.engine.seed,
                scenario.engine.replications,
                threads,
                fault,
            )?;
            reports.extend(cell);
        }
    }

    write_file(&args.out.join("results.csv"), &results_to_csv(&reports))?;
    write_file(&args.out.join("estimates.csv"), &estimates_to_csv(&reports, &loc))?;
    print!("{}", summarize(&reports));
    println!(
        "{} runs in {:.1}s; results in {}",
        reports.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    match first_violation(&reports) {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn cmd_capacity(args: ConfigOnlyArgs) -> Result<(), Error> {
    let scenario = load_scenario(&args.config)?;
    scenario.validate()?;
    let b = scenario.rate_matrix()?;
    let mix = &scenario.arrivals.proportions;

    let peak = max_scalar_throughput(&b, mix, 1e-5)?;
    println!("peak total arrival rate for the configured mix: {peak:.6}");
    for &lambda in &scenario.arrivals.lambdas {
        let rates: Vec<f64> = mix.iter().map(|p| p * lambda).collect();
        match feasible_decomposition(&b, &rates, 1e-9)? {
            Some(d) => {
                let worst =
                    d.per_server_load(&b).into_iter().fold(f64::NEG_INFINITY, f64::max);
                println!(
                    "lambda {lambda}: feasible (max server load {worst:.6}, slack {:.6})",
                    d.delta
                );
            }
            None => println!("lambda {lambda}: infeasible"),
        }
    }
    Ok(())
}

fn cmd_counterexample(args: CounterexampleArgs) -> Result<(), Error> {
    let threads = worker_threads();
    let fault = injected_fault();
    let mut reports = Vec::new();
    let mut cell_means: Vec<(String, f64, f64, f64)> = Vec::new();

    for (label, explore) in
        [("blind-gb-pandas-exploit", false), ("blind-gb-pandas-explore", true)]
    {
        for lambda_per_type in [0.4, 0.7] {
            let spec = mislearning_spec(lambda_per_type, args.horizon, args.warmup, explore);
            let mut cell =
                run_replications_with(&spec, args.seed, args.replications, threads, fault)?;
            for r in &mut cell {
                r.policy = label.to_string();
            }
            let means: Vec<f64> = cell.iter().filter_map(|r| r.mean_completion_time).collect();
            let slopes: Vec<f64> = cell.iter().map(|r| r.backlog_slope).collect();
            cell_means.push((
                label.to_string(),
                lambda_per_type,
                mean_and_std(&means).0,
                mean_and_std(&slopes).0,
            ));
            reports.extend(cell);
        }
    }

    let mean_of = |label: &str, lambda: f64| {
        cell_means
            .iter()
            .find(|(l, lam, _, _)| l == label && *lam == lambda)
            .map(|&(_, _, mean, slope)| (mean, slope))
            .unwrap()
    };
    let (stuck_mean, _) = mean_of("blind-gb-pandas-exploit", 0.4);
    let (free_mean, _) = mean_of("blind-gb-pandas-explore", 0.4);
    let (_, stuck_slope) = mean_of("blind-gb-pandas-exploit", 0.7);
    let (_, free_slope) = mean_of("blind-gb-pandas-explore", 0.7);

    println!("adversarial prior, per-type rate 0.4 (both servers loaded at 0.8 when misrouted):");
    println!("  exploration off: mean completion {stuck_mean:.4}");
    println!("  exploration on:  mean completion {free_mean:.4}");
    println!("  ratio: {:.4}", stuck_mean / free_mean);
    println!("per-type rate 0.7 (misrouting overloads both servers):");
    println!("  exploration off: backlog slope {stuck_slope:.6}");
    println!("  exploration on:  backlog slope {free_slope:.6}");

    write_file(&args.out.join("counterexample.csv"), &results_to_csv(&reports))?;
    println!("details in {}", args.out.join("counterexample.csv").display());
    match first_violation(&reports) {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn cmd_plot(args: PlotArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", args.input.display())))?;
    let rows = parse_results_csv(&text)?;
    let svg = crate::svg::render_plot(&rows)?;
    write_file(&args.out, &svg)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

struct Check {
    name: &'static str,
    result: Result<(), String>,
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Error> {
    let fault = injected_fault();
    let mut checks: Vec<Check> = Vec::new();
    let scenario = Scenario::reference();
    let b = scenario.rate_matrix()?;
    let mix = scenario.arrivals.proportions.clone();

    let peak = max_scalar_throughput(&b, &mix, 1e-5)?;
    checks.push(Check {
        name: "peak-throughput",
        result: if (peak - 2.5).abs() <= 1e-4 {
            Ok(())
        } else {
            Err(format!("expected 2.5, got {peak}"))
        },
    });

    let rates: Vec<f64> = mix.iter().map(|p| p * 2.4).collect();
    let witness = feasible_decomposition(&b, &rates, 1e-9)?;
    checks.push(Check {
        name: "feasibility-witness",
        result: match witness {
            None => Err("2.4 should be feasible".to_string()),
            Some(d) => {
                let mut err = Ok(());
                for (i, &rate) in rates.iter().enumerate() {
                    let row: f64 = d.lambda_im[i].iter().sum();
                    if (row - rate).abs() > 1e-6 {
                        err = Err(format!("type {i} split sums to {row}, wants {rate}"));
                    }
                }
                for (m, load) in d.per_server_load(&b).into_iter().enumerate() {
                    if load > 1.0 {
                        err = Err(format!("server {m} load {load} exceeds 1"));
                    }
                }
                err
            }
        },
    });

    // The checked run carries the injected fault when the negative-control
    // environment variable is set; the monitor must then fire (exit 3).
    let spec = scenario.run_spec(PolicyKind::BlindGbPandas, 2.0)?;
    let spec = RunSpec { horizon: 5_000, warmup: 500, invariant_checks: true, ..spec };
    let mut engine = Engine::new(spec, args.seed)?;
    if let Some(f) = fault {
        engine = engine.with_fault(f);
    }
    let report = engine.run();
    if report.invariant_violations > 0 {
        for c in &checks {
            print_check(c);
        }
        print_check(&Check {
            name: "checked-run",
            result: Err(format!("{} violations", report.invariant_violations)),
        });
        let v = &report.violations[0];
        return Err(Error::InvariantViolation {
            slot: v.slot,
            detail: format!("{}: {}", v.check, v.detail),
        });
    }
    checks.push(Check { name: "checked-run", result: Ok(()) });

    // The monitor itself must catch a deliberately corrupted run.
    let spec = scenario.run_spec(PolicyKind::GbPandas, 2.0)?;
    let spec = RunSpec { horizon: 200, warmup: 10, invariant_checks: true, ..spec };
    let corrupted = Engine::new(spec, args.seed)?
        .with_fault(FaultInjection::PhantomTask { slot: 50 })
        .run();
    checks.push(Check {
        name: "monitor-detects-corruption",
        result: if corrupted.invariant_violations > 0 {
            Ok(())
        } else {
            Err("monitor missed an injected phantom task".to_string())
        },
    });

    // Blind routing with estimates pinned to the truth and exploration off
    // must reproduce the standard policy exactly.
    let pinned = {
        let matrix = RateMatrix::new(vec![vec![1.0, 0.5], vec![0.125, 0.25]]).unwrap();
        let loc = build_locality_structure(&matrix);
        let truth: Vec<Vec<f64>> = (0..loc.num_servers())
            .map(|m| (0..loc.num_levels(m)).map(|n| loc.level_rate(m, n)).collect())
            .collect();
        let base = RunSpec {
            matrix,
            lambdas: vec![0.4, 0.1],
            arrival_kind: ArrivalKind::Poisson,
            arrival_cap: None,
            service_kind: ServiceKind::Deterministic,
            s_max: crate::workloads::DEFAULT_S_MAX,
            policy: PolicyKind::GbPandas,
            exploration: None,
            init_range: (0.1, 1.0),
            init_estimates: None,
            horizon: 3_000,
            warmup: 300,
            invariant_checks: true,
        };
        let blind = RunSpec {
            policy: PolicyKind::BlindGbPandas,
            init_estimates: Some(RateEstimates::with_values(truth, None).unwrap()),
            ..base.clone()
        };
        let a = Engine::new(base, args.seed)?.run();
        let c = Engine::new(blind, args.seed)?.run();
        a.completed == c.completed
            && a.mean_completion_time == c.mean_completion_time
            && a.backlog_slope == c.backlog_slope
    };
    checks.push(Check {
        name: "pinned-truth-equivalence",
        result: if pinned { Ok(()) } else { Err("trajectories differ".to_string()) },
    });

    let est_ok = {
        let matrix = RateMatrix::new(vec![vec![1.0]]).unwrap();
        let loc = build_locality_structure(&matrix);
        let mut est = RateEstimates::with_values(vec![vec![0.42]], None).unwrap();
        for t in [4u64, 2, 1, 1] {
            est.record_service(0, 0, t).unwrap();
        }
        let _ = loc;
        (est.estimate(0, 0) - 0.6875).abs() < 1e-12
    };
    checks.push(Check {
        name: "estimator-running-mean",
        result: if est_ok { Ok(()) } else { Err("running mean drifted".to_string()) },
    });

    let det_ok = {
        let spec = scenario.run_spec(PolicyKind::BlindGbPandas, 1.0)?;
        let spec = RunSpec { horizon: 2_000, warmup: 200, ..spec };
        let a = run_replications_with(&spec, args.seed, 2, 2, None)?;
        let b2 = run_replications_with(&spec, args.seed, 2, 1, None)?;
        results_to_csv(&a) == results_to_csv(&b2)
    };
    checks.push(Check {
        name: "csv-determinism",
        result: if det_ok { Ok(()) } else { Err("same seed produced different bytes".to_string()) },
    });

    let mut failed = false;
    for c in &checks {
        print_check(c);
        failed |= c.result.is_err();
    }
    if failed {
        Err(Error::Internal("self checks failed".to_string()))
    } else {
        Ok(())
    }
}

fn print_check(c: &Check) {
    match &c.result {
        Ok(()) => println!("ok   {}", c.name),
        Err(why) => println!("FAIL {}: {why}", c.name),
    }
}
