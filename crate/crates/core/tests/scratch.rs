use fastdual::dmpc::{condense, generate, GeneratorConfig};
use fastdual::metrics::{
    distributed_init, scalar_metric, verify_feasible, MetricChooser, ScalarNorm,
};
use fastdual::simnet::{run_distributed, SimConfig};
use fastdual::solvers::SolveOptions;

#[test]
fn chunk_granularity_experiment() {
    let mut cfg = GeneratorConfig::desk_default();
    cfg.subsystem_count = 6;
    cfg.horizon = 6;
    cfg.state_dim_range = [2, 3];
    cfg.seed = 11;
    let dynamics = generate(&cfg).unwrap();
    let problem = condense(&dynamics).unwrap();
    let opts = SolveOptions {
        max_iter: 300_000,
        tol_primal_infeas: 1e-4,
        ..Default::default()
    };

    let m_sizes = problem.partition.m_sizes.clone();
    for (label, chooser) in [
        (
            "per-step",
            MetricChooser::sdp().with_lambda_chunks(dynamics.iter().map(|d| d.n_x).collect()),
        ),
        ("full-member", MetricChooser::sdp().with_lambda_chunks(m_sizes.clone())),
        ("whitened", MetricChooser::whitened_sdp()),
        ("closed-form", MetricChooser::closed_form()),
    ] {
        let t0 = std::time::Instant::now();
        let init = distributed_init(&problem, &chooser).unwrap();
        let init_ms = t0.elapsed().as_secs_f64() * 1e3;
        let rep = verify_feasible(&init.metric, &problem, 1e-8).unwrap();
        let run = run_distributed(&problem, &init.metric, None, &opts, &SimConfig::default()).unwrap();
        println!(
            "{label:12} iters={:6} init_ms={init_ms:8.1} feasible={} min_eig={:.2e}",
            run.report.iterations, rep.feasible, rep.min_eig
        );
    }
    for norm in [ScalarNorm::TwoNorm, ScalarNorm::OneNorm] {
        let metric = scalar_metric(&problem, norm).unwrap();
        let run = run_distributed(&problem, &metric, None, &opts, &SimConfig::default()).unwrap();
        println!("{norm:?} iters={}", run.report.iterations);
    }
}
