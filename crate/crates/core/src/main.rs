//! Command-line front end: generate benchmark instances, solve problem
//! files, run the comparison harness, and check problem/metric health.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use fastdual::block_model::ProblemInstance;
use fastdual::dmpc::{
    bench, condense, generate, AlgorithmConfig, BenchOptions, GeneratorConfig, write_bench_csv,
};
use fastdual::error::{Error, Result};
use fastdual::io::{read_generator_config, read_problem_file, write_problem_file};
use fastdual::metrics::{
    distributed_init, exact_metric, scalar_metric, verify_feasible, Metric, MetricChooser,
    ScalarNorm,
};
use fastdual::simnet::{
    render_trace, run_distributed, RoundKind, SimConfig, TraceRecord,
};
use fastdual::solvers::{parallel_fast_dual_gradient, SolveOptions, SolveReport};

#[derive(Parser)]
#[command(
    name = "fastdual",
    about = "Generalized fast dual gradient solvers for block-separable problems",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random benchmark instance and write its problem file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a problem file with one algorithm/metric configuration.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        /// One of: distributed, parallel, scalar2, scalar1.
        #[arg(long)]
        algorithm: String,
        #[arg(long, default_value_t = 100_000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Write the communication trace (tab-separated) to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the comparison harness and write the CSV table.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a problem file: row rank plus metric feasibility.
    Check {
        #[arg(long)]
        problem: PathBuf,
    },
}

#[derive(Deserialize)]
struct BenchConfigFile {
    generator: GeneratorConfig,
    #[serde(default = "default_instances")]
    instances: usize,
    #[serde(default = "default_ics")]
    initial_conditions: usize,
    #[serde(default = "default_max_iter")]
    max_iter: usize,
    #[serde(default = "default_tol")]
    tol: f64,
    /// Subset of: parallel, distributed, scalar2, scalar1.
    #[serde(default)]
    algorithms: Vec<String>,
}

fn default_instances() -> usize {
    1
}
fn default_ics() -> usize {
    1
}
fn default_max_iter() -> usize {
    200_000
}
fn default_tol() -> f64 {
    1e-4
}

fn parse_algorithm(name: &str) -> Result<AlgorithmConfig> {
    match name {
        "parallel" => Ok(AlgorithmConfig::ParallelExact),
        "distributed" => Ok(AlgorithmConfig::DistributedSdp),
        "scalar2" => Ok(AlgorithmConfig::DistributedScalar2),
        "scalar1" => Ok(AlgorithmConfig::DistributedScalar1),
        other => Err(Error::Invalid(format!(
            "unknown algorithm '{other}' (expected distributed|parallel|scalar2|scalar1)"
        ))),
    }
}

fn cmd_generate(config: &PathBuf, out: &PathBuf) -> Result<()> {
    let cfg = read_generator_config(config)?;
    let dynamics = generate(&cfg)?;
    let problem = condense(&dynamics)?;
    write_problem_file(&problem, out)?;
    println!(
        "generated instance: {} subsystems, {} variables, {} equality rows, {} coupled rows",
        problem.subsystem_count(),
        problem.partition.total_n(),
        problem.partition.total_m(),
        problem.partition.total_p()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn print_report(label: &str, report: &SolveReport) {
    println!(
        "{label}: {} after {} iterations ({:.1} ms)",
        if report.converged { "converged" } else { "max-iter" },
        report.iterations,
        report.wall_time_ms
    );
    println!(
        "rounds: local={} global={} messages={} payload_scalars={}",
        report.counters.local_rounds,
        report.counters.global_rounds,
        report.counters.messages,
        report.counters.payload_scalars
    );
}

fn cmd_solve(
    problem_path: &PathBuf,
    algorithm: &str,
    max_iter: usize,
    tol: f64,
    trace: Option<&PathBuf>,
) -> Result<()> {
    let problem = read_problem_file(problem_path)?;
    let config = parse_algorithm(algorithm)?;
    let opts = SolveOptions {
        max_iter,
        tol_primal_infeas: tol,
        ..Default::default()
    };
    let sim_config = SimConfig {
        trace: trace.is_some(),
        ..Default::default()
    };
    let (report, trace_records): (SolveReport, Vec<TraceRecord>) = match config {
        AlgorithmConfig::ParallelExact => {
            let metric = exact_metric(&problem)?;
            let report = parallel_fast_dual_gradient(&problem, &metric, None, &opts)?;
            let records = synth_parallel_trace(&problem, report.iterations);
            (report, records)
        }
        _ => {
            let metric = match config {
                AlgorithmConfig::DistributedSdp => {
                    let chooser = MetricChooser::whitened_sdp();
                    distributed_init(&problem, &chooser)?.metric
                }
                AlgorithmConfig::DistributedScalar2 => scalar_metric(&problem, ScalarNorm::TwoNorm)?,
                AlgorithmConfig::DistributedScalar1 => scalar_metric(&problem, ScalarNorm::OneNorm)?,
                AlgorithmConfig::ParallelExact => unreachable!(),
            };
            let run = run_distributed(&problem, &metric, None, &opts, &sim_config)?;
            (run.report, run.trace)
        }
    };
    print_report(algorithm, &report);
    let objective: f64 = (0..problem.subsystem_count())
        .map(|i| {
            let primal = problem.partition.primal_layout();
            let xi: nalgebra::DVector<f64> = primal.view(&report.x, i).into();
            problem.costs[i].quadratic_value(&xi)
        })
        .sum();
    println!("primal objective: {objective:.9e}");
    if let Some(path) = trace {
        std::fs::write(path, render_trace(&trace_records))?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

/// Analytic hub-exchange trace of the parallel algorithm: per iteration one
/// scatter round (hub to every node) and one gather round (every node to
/// the hub). The hub is labeled with index `M`.
fn synth_parallel_trace(problem: &ProblemInstance, iterations: usize) -> Vec<TraceRecord> {
    let count = problem.subsystem_count();
    let hub = count;
    let mut records = Vec::new();
    for k in 0..iterations as u64 {
        for i in 0..count {
            let scatter: usize = problem.neighbors.m[i]
                .iter()
                .map(|&j| problem.partition.m_sizes[j])
                .sum();
            records.push(TraceRecord {
                round: 2 * k,
                kind: RoundKind::Global,
                sender: hub,
                receiver: i,
                scalars: scatter,
            });
            records.push(TraceRecord {
                round: 2 * k + 1,
                kind: RoundKind::Global,
                sender: i,
                receiver: hub,
                scalars: problem.partition.n_sizes[i],
            });
        }
    }
    records
}

fn cmd_bench(config_path: &PathBuf, out: &PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg: BenchConfigFile = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.generator.validate()?;
    let configs = if cfg.algorithms.is_empty() {
        AlgorithmConfig::all()
    } else {
        cfg.algorithms
            .iter()
            .map(|a| parse_algorithm(a))
            .collect::<Result<Vec<_>>>()?
    };
    let mut instances = Vec::with_capacity(cfg.instances);
    for k in 0..cfg.instances {
        let mut gen_cfg = cfg.generator.clone();
        gen_cfg.seed = cfg.generator.seed.wrapping_add(k as u64);
        instances.push(generate(&gen_cfg)?);
    }
    let opts = BenchOptions {
        initial_conditions: cfg.initial_conditions,
        solve: SolveOptions {
            max_iter: cfg.max_iter,
            tol_primal_infeas: cfg.tol,
            ..Default::default()
        },
        configs,
    };
    let rows = bench(&instances, &opts)?;
    let file = std::fs::File::create(out)?;
    write_bench_csv(&rows, file)?;
    for row in &rows {
        println!(
            "{} / {}: avg_iters={:.1} avg_local={:.1} avg_global={:.1} avg_ms={:.1}",
            row.algorithm, row.metric, row.avg_iters, row.avg_local_rounds, row.avg_global_rounds,
            row.avg_time_ms
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_check(problem_path: &PathBuf) -> Result<()> {
    let problem = read_problem_file(problem_path)?;
    println!(
        "problem: {} subsystems, {} variables, {} equality rows, {} coupled rows",
        problem.subsystem_count(),
        problem.partition.total_n(),
        problem.partition.total_m(),
        problem.partition.total_p()
    );
    match problem.validate_rank(1e-10) {
        Ok(()) => println!("rank check: ok (full row rank)"),
        Err(Error::RankDeficient { rows }) => {
            println!("rank check: FAILED, dependent rows (0-based): {rows:?}");
            return Err(Error::RankDeficient { rows });
        }
        Err(e) => return Err(e),
    }
    let chooser = MetricChooser::closed_form();
    let init = distributed_init(&problem, &chooser)?;
    let rep = verify_feasible(&init.metric, &problem, 1e-8)?;
    println!(
        "block-diagonal metric: {} (min eig of L - Gram = {:.3e})",
        if rep.feasible { "feasible" } else { "INFEASIBLE" },
        rep.min_eig
    );
    if !problem.has_coupled_terms() {
        let exact = exact_metric(&problem)?;
        let rep = verify_feasible(&exact, &problem, 1e-8)?;
        println!(
            "exact metric: {} (min eig = {:.3e})",
            if rep.feasible { "feasible" } else { "INFEASIBLE" },
            rep.min_eig
        );
    }
    let two: Metric = scalar_metric(&problem, ScalarNorm::TwoNorm)?;
    let one = scalar_metric(&problem, ScalarNorm::OneNorm)?;
    if let (Metric::Scalar { alpha: a2, .. }, Metric::Scalar { alpha: a1, .. }) = (&two, &one) {
        println!("scalar metrics: two-norm {a2:.6e}, one-norm {a1:.6e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Generate { config, out } => cmd_generate(config, out),
        Cmd::Solve {
            problem,
            algorithm,
            max_iter,
            tol,
            trace,
        } => cmd_solve(problem, algorithm, *max_iter, *tol, trace.as_ref()),
        Cmd::Bench { config, out } => cmd_bench(config, out),
        Cmd::Check { problem } => cmd_check(problem),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
