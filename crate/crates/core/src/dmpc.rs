//! Distributed MPC front end: condense coupled linear MPC problems into the
//! solver's block form, generate random benchmark instances, and run the
//! algorithm comparison harness.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_model::{
    BlockPartition, Bounds, CostMatrix, CoupledCost, LocalCost, ProblemInstance, SparseBlockMatrix,
};
use crate::error::{Error, Result};
use crate::metrics::{distributed_init, exact_metric, scalar_metric, MetricChooser, ScalarNorm};
use crate::simnet::{run_distributed, SimConfig};
use crate::solvers::{parallel_fast_dual_gradient, SolveOptions, SolveReport};

/// Dynamics, constraints, and costs of one subsystem over the horizon.
///
/// `x_i(t+1) = sum_j Phi_ij x_j(t) + Gamma_ij u_j(t)`, with diagonal stage
/// costs and box state/input sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemDynamics {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    /// `Phi_ij` blocks, sorted by `j`; includes the diagonal.
    pub phi: Vec<(usize, DMatrix<f64>)>,
    /// `Gamma_ij` blocks, sorted by `j`.
    pub gamma: Vec<(usize, DMatrix<f64>)>,
    pub x0: DVector<f64>,
    pub state_bounds: Bounds,
    pub input_bounds: Bounds,
    /// Diagonals of `Q_i`, `R_i`, and the terminal weight.
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub q_f: DVector<f64>,
}

impl SubsystemDynamics {
    /// Stacked variable count: states over `0..=N` plus inputs over `0..N`.
    pub fn stacked_vars(&self) -> usize {
        (self.horizon + 1) * self.n_x + self.horizon * self.n_u
    }

    /// Equality row count: the initial condition plus one dynamics row per
    /// step.
    pub fn equality_rows(&self) -> usize {
        (self.horizon + 1) * self.n_x
    }

    /// Column offset of `x(t)` within the stacked variable.
    pub fn x_offset(&self, t: usize) -> usize {
        t * self.n_x
    }

    /// Column offset of `u(t)` within the stacked variable.
    pub fn u_offset(&self, t: usize) -> usize {
        (self.horizon + 1) * self.n_x + t * self.n_u
    }
}

fn dyn_neighbors(dynamics: &[SubsystemDynamics], i: usize) -> Vec<usize> {
    let mut set: Vec<usize> = dynamics[i].phi.iter().map(|(j, _)| *j).collect();
    for (j, _) in &dynamics[i].gamma {
        if !set.contains(j) {
            set.push(*j);
        }
    }
    set.sort_unstable();
    set
}

/// Condense the stacked-horizon MPC problem into the solver's block form:
/// per block `i`, `H_i = blkdiag(Q,...,Q, Q_f, R,...,R)`, zero linear term,
/// box constraints from the state/input sets, and equality rows encoding
/// `x_i(0) = x0_i` plus the dynamics at every step.
pub fn condense(dynamics: &[SubsystemDynamics]) -> Result<ProblemInstance> {
    condense_coupled(dynamics, &[])
}

/// A coupled term across subsystems, expressed on the stacked variables.
#[derive(Debug, Clone)]
pub enum CouplingSpec {
    /// `lower <= sum_j B_j y_j <= upper`, owned by (its dual rows assigned
    /// to) one subsystem. Unbounded sides carry infinite bounds.
    Inequality {
        owner: usize,
        blocks: Vec<(usize, DMatrix<f64>)>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// `sum_k w_k |(sum_j B_j y_j)_k|` added to the objective.
    OneNorm {
        owner: usize,
        blocks: Vec<(usize, DMatrix<f64>)>,
        weight: DVector<f64>,
    },
}

impl CouplingSpec {
    fn owner(&self) -> usize {
        match self {
            CouplingSpec::Inequality { owner, .. } | CouplingSpec::OneNorm { owner, .. } => *owner,
        }
    }

    fn rows(&self) -> usize {
        match self {
            CouplingSpec::Inequality { lower, .. } => lower.len(),
            CouplingSpec::OneNorm { weight, .. } => weight.len(),
        }
    }

    fn blocks(&self) -> &[(usize, DMatrix<f64>)] {
        match self {
            CouplingSpec::Inequality { blocks, .. } | CouplingSpec::OneNorm { blocks, .. } => blocks,
        }
    }
}

/// Condense with coupled inequality or 1-norm terms. At most one coupling
/// may be owned by each subsystem.
pub fn condense_coupled(
    dynamics: &[SubsystemDynamics],
    couplings: &[CouplingSpec],
) -> Result<ProblemInstance> {
    let count = dynamics.len();
    if count == 0 {
        return Err(Error::Invalid("no subsystems".into()));
    }
    let horizon = dynamics[0].horizon;
    if dynamics.iter().any(|d| d.horizon != horizon) {
        return Err(Error::Invalid("subsystems disagree on the horizon".into()));
    }
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }

    let n_sizes: Vec<usize> = dynamics.iter().map(|d| d.stacked_vars()).collect();
    let m_sizes: Vec<usize> = dynamics.iter().map(|d| d.equality_rows()).collect();
    let mut p_sizes = vec![0usize; count];
    for c in couplings {
        if c.owner() >= count {
            return Err(Error::Invalid(format!("coupling owner {} out of range", c.owner())));
        }
        if p_sizes[c.owner()] != 0 {
            return Err(Error::Invalid(format!(
                "subsystem {} owns more than one coupling",
                c.owner()
            )));
        }
        p_sizes[c.owner()] = c.rows();
    }
    let partition = BlockPartition::new(n_sizes.clone(), m_sizes.clone(), p_sizes.clone())?;

    let mut a = SparseBlockMatrix::new(m_sizes.clone(), n_sizes.clone());
    let mut b_vec = DVector::zeros(m_sizes.iter().sum());
    let mut b_off = 0;
    for (i, d) in dynamics.iter().enumerate() {
        if d.x0.len() != d.n_x {
            return Err(Error::DimensionMismatch {
                context: format!("initial state of subsystem {i}"),
                expected: d.n_x,
                found: d.x0.len(),
            });
        }
        // Diagonal block: x(0) rows, then x(t) - Phi_ii x(t-1) - Gamma_ii u(t-1).
        let neighbors = dyn_neighbors(dynamics, i);
        for &j in &neighbors {
            let phi = d.phi.iter().find(|(jj, _)| *jj == j).map(|(_, m)| m);
            let gamma = d.gamma.iter().find(|(jj, _)| *jj == j).map(|(_, m)| m);
            if let Some(p) = phi {
                if p.nrows() != d.n_x || p.ncols() != dynamics[j].n_x {
                    return Err(Error::DimensionMismatch {
                        context: format!("Phi block ({i},{j})"),
                        expected: d.n_x * dynamics[j].n_x,
                        found: p.nrows() * p.ncols(),
                    });
                }
            }
            if let Some(g) = gamma {
                if g.nrows() != d.n_x || g.ncols() != dynamics[j].n_u {
                    return Err(Error::DimensionMismatch {
                        context: format!("Gamma block ({i},{j})"),
                        expected: d.n_x * dynamics[j].n_u,
                        found: g.nrows() * g.ncols(),
                    });
                }
            }
            let mut blk = DMatrix::zeros(d.equality_rows(), dynamics[j].stacked_vars());
            if j == i {
                for t in 0..=horizon {
                    for k in 0..d.n_x {
                        blk[(t * d.n_x + k, d.x_offset(t) + k)] = 1.0;
                    }
                }
            }
            for t in 1..=horizon {
                if let Some(p) = phi {
                    let mut view = blk.view_mut(
                        (t * d.n_x, dynamics[j].x_offset(t - 1)),
                        (d.n_x, dynamics[j].n_x),
                    );
                    view -= p;
                }
                if let Some(g) = gamma {
                    let mut view = blk.view_mut(
                        (t * d.n_x, dynamics[j].u_offset(t - 1)),
                        (d.n_x, dynamics[j].n_u),
                    );
                    view -= g;
                }
            }
            a.insert_block(i, j, blk)?;
        }
        b_vec.rows_mut(b_off, d.n_x).copy_from(&d.x0);
        b_off += d.equality_rows();
    }

    let b_mat = if couplings.is_empty() {
        None
    } else {
        let mut b = SparseBlockMatrix::new(p_sizes.clone(), n_sizes.clone());
        for c in couplings {
            for (j, blk) in c.blocks() {
                if blk.nrows() != c.rows() || blk.ncols() != n_sizes[*j] {
                    return Err(Error::DimensionMismatch {
                        context: format!("coupling block ({}, {j})", c.owner()),
                        expected: c.rows() * n_sizes[*j],
                        found: blk.nrows() * blk.ncols(),
                    });
                }
                b.insert_block(c.owner(), *j, blk.clone())?;
            }
        }
        Some(b)
    };

    let mut costs = Vec::with_capacity(count);
    for (i, d) in dynamics.iter().enumerate() {
        let n_i = d.stacked_vars();
        let mut h = DVector::zeros(n_i);
        let mut lower = DVector::zeros(n_i);
        let mut upper = DVector::zeros(n_i);
        for t in 0..=horizon {
            let w = if t == horizon { &d.q_f } else { &d.q };
            for k in 0..d.n_x {
                h[d.x_offset(t) + k] = w[k];
                lower[d.x_offset(t) + k] = d.state_bounds.lower[k];
                upper[d.x_offset(t) + k] = d.state_bounds.upper[k];
            }
        }
        for t in 0..horizon {
            for k in 0..d.n_u {
                h[d.u_offset(t) + k] = d.r[k];
                lower[d.u_offset(t) + k] = d.input_bounds.lower[k];
                upper[d.u_offset(t) + k] = d.input_bounds.upper[k];
            }
        }
        let coupled = match couplings.iter().find(|c| c.owner() == i) {
            Some(CouplingSpec::Inequality { lower, upper, .. }) => Some(CoupledCost::Box(
                Bounds::new(lower.clone(), upper.clone())?,
            )),
            Some(CouplingSpec::OneNorm { weight, .. }) => {
                Some(CoupledCost::OneNorm(weight.clone()))
            }
            None => None,
        };
        costs.push(LocalCost {
            hessian: CostMatrix::Diagonal(h),
            linear: DVector::zeros(n_i),
            bounds: Some(Bounds::new(lower, upper)?),
            coupled,
        });
    }

    ProblemInstance::new(partition, costs, a, b_mat, b_vec)
}

/// Right-hand side of the condensed equalities for fresh initial states.
pub fn initial_state_rhs(dynamics: &[SubsystemDynamics]) -> DVector<f64> {
    let total: usize = dynamics.iter().map(|d| d.equality_rows()).sum();
    let mut b = DVector::zeros(total);
    let mut off = 0;
    for d in dynamics {
        b.rows_mut(off, d.n_x).copy_from(&d.x0);
        off += d.equality_rows();
    }
    b
}

/// Benchmark instance generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub subsystem_count: usize,
    /// Inclusive state dimension range.
    pub state_dim_range: [usize; 2],
    /// Inclusive input dimension range.
    pub input_dim_range: [usize; 2],
    pub horizon: usize,
    /// Target spectral radius of the interconnected state matrix.
    pub spectral_radius: f64,
    pub dynamics_entry_range: [f64; 2],
    pub input_entry_range: [f64; 2],
    /// States and inputs share these bound ranges.
    pub bound_upper_range: [f64; 2],
    pub bound_lower_range: [f64; 2],
    pub cost_diag_range: [f64; 2],
    /// Target average neighbor count of the interaction graph.
    pub average_degree: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Desk-scale defaults: 20 subsystems, 2-4 states, 1-2 inputs each,
    /// horizon 10, spectral radius 1.15.
    pub fn desk_default() -> Self {
        Self {
            subsystem_count: 20,
            state_dim_range: [2, 4],
            input_dim_range: [1, 2],
            horizon: 10,
            spectral_radius: 1.15,
            dynamics_entry_range: [-0.7, 1.3],
            input_entry_range: [-1.0, 1.0],
            bound_upper_range: [0.4, 1.0],
            bound_lower_range: [-1.0, -0.4],
            cost_diag_range: [1.0, 1e6],
            average_degree: 2.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsystem_count == 0 || self.horizon == 0 {
            return Err(Error::Invalid("empty generator config".into()));
        }
        if self.state_dim_range[0] == 0 || self.state_dim_range[0] > self.state_dim_range[1] {
            return Err(Error::Invalid("bad state dimension range".into()));
        }
        if self.input_dim_range[0] > self.input_dim_range[1] {
            return Err(Error::Invalid("bad input dimension range".into()));
        }
        if !(self.spectral_radius > 0.0) {
            return Err(Error::Invalid("spectral radius target must be positive".into()));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn sample_dim(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.gen_range(range[0]..=range[1])
}

/// Generate a random interconnected benchmark instance.
///
/// The interaction graph is a random spanning tree plus random extra edges
/// until the configured average degree is met. Dynamics entries are sampled
/// uniformly, then every state block is rescaled so the interconnected
/// state matrix hits the target spectral radius. Initial states are
/// sampled strictly inside the state boxes.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<SubsystemDynamics>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = config.subsystem_count;

    let n_x: Vec<usize> = (0..count).map(|_| sample_dim(&mut rng, config.state_dim_range)).collect();
    let n_u: Vec<usize> = (0..count).map(|_| sample_dim(&mut rng, config.input_dim_range)).collect();

    // Spanning tree plus extra edges.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); count];
    let mut edges = 0usize;
    for i in 1..count {
        let j = rng.gen_range(0..i);
        adj[i].push(j);
        adj[j].push(i);
        edges += 1;
    }
    let target_edges = ((config.average_degree * count as f64) / 2.0).round() as usize;
    let mut attempts = 0;
    while edges < target_edges && attempts < 50 * count {
        attempts += 1;
        let i = rng.gen_range(0..count);
        let j = rng.gen_range(0..count);
        if i != j && !adj[i].contains(&j) {
            adj[i].push(j);
            adj[j].push(i);
            edges += 1;
        }
    }
    for l in &mut adj {
        l.sort_unstable();
    }

    // Dynamics blocks over self plus graph neighbors.
    let mut phi: Vec<Vec<(usize, DMatrix<f64>)>> = Vec::with_capacity(count);
    let mut gamma: Vec<Vec<(usize, DMatrix<f64>)>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut nbrs = adj[i].clone();
        nbrs.push(i);
        nbrs.sort_unstable();
        let mut phi_i = Vec::with_capacity(nbrs.len());
        let mut gamma_i = Vec::with_capacity(nbrs.len());
        for &j in &nbrs {
            let p = DMatrix::from_fn(n_x[i], n_x[j], |_, _| {
                sample_range(&mut rng, config.dynamics_entry_range)
            });
            let g = DMatrix::from_fn(n_x[i], n_u[j], |_, _| {
                sample_range(&mut rng, config.input_entry_range)
            });
            phi_i.push((j, p));
            gamma_i.push((j, g));
        }
        phi.push(phi_i);
        gamma.push(gamma_i);
    }

    // Rescale the interconnected state matrix to the target spectral radius.
    let offsets: Vec<usize> = n_x
        .iter()
        .scan(0usize, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let total_x: usize = n_x.iter().sum();
    let mut global = DMatrix::zeros(total_x, total_x);
    for i in 0..count {
        for (j, p) in &phi[i] {
            global
                .view_mut((offsets[i], offsets[*j]), (n_x[i], n_x[*j]))
                .copy_from(p);
        }
    }
    let rho = global
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    if rho <= 0.0 {
        return Err(Error::Invalid(
            "interconnected state matrix is zero; cannot rescale".into(),
        ));
    }
    let scale = config.spectral_radius / rho;
    for phi_i in &mut phi {
        for (_, p) in phi_i.iter_mut() {
            *p *= scale;
        }
    }

    // Bounds, costs, and feasible initial states.
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let upper_s = DVector::from_fn(n_x[i], |_, _| sample_range(&mut rng, config.bound_upper_range));
        let lower_s = DVector::from_fn(n_x[i], |_, _| sample_range(&mut rng, config.bound_lower_range));
        let upper_u = DVector::from_fn(n_u[i], |_, _| sample_range(&mut rng, config.bound_upper_range));
        let lower_u = DVector::from_fn(n_u[i], |_, _| sample_range(&mut rng, config.bound_lower_range));
        let q = DVector::from_fn(n_x[i], |_, _| sample_range(&mut rng, config.cost_diag_range));
        let q_f = DVector::from_fn(n_x[i], |_, _| sample_range(&mut rng, config.cost_diag_range));
        let r = DVector::from_fn(n_u[i], |_, _| sample_range(&mut rng, config.cost_diag_range));
        let x0 = DVector::from_fn(n_x[i], |k, _| {
            let lo = lower_s[k];
            let hi = upper_s[k];
            lo + (hi - lo) * rng.gen_range(0.05..0.95)
        });
        out.push(SubsystemDynamics {
            n_x: n_x[i],
            n_u: n_u[i],
            horizon: config.horizon,
            phi: phi[i].clone(),
            gamma: gamma[i].clone(),
            x0,
            state_bounds: Bounds::new(lower_s, upper_s)?,
            input_bounds: Bounds::new(lower_u, upper_u)?,
            q,
            r,
            q_f,
        });
    }
    Ok(out)
}

/// Resample feasible initial states in place (uniform strictly inside the
/// state boxes), deterministic in `seed`.
pub fn resample_initial_states(dynamics: &mut [SubsystemDynamics], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in dynamics.iter_mut() {
        d.x0 = DVector::from_fn(d.n_x, |k, _| {
            let lo = d.state_bounds.lower[k];
            let hi = d.state_bounds.upper[k];
            lo + (hi - lo) * rng.gen_range(0.05..0.95)
        });
    }
}

/// Algorithm/metric configurations of the comparison harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmConfig {
    /// Parallel dual method with the exact sparse-factored metric.
    ParallelExact,
    /// Distributed dual method with the trace-minimizing block metric.
    DistributedSdp,
    /// Distributed dual method with the spectral-norm scalar metric.
    DistributedScalar2,
    /// Distributed dual method with the 1-norm scalar metric.
    DistributedScalar1,
}

impl AlgorithmConfig {
    pub fn labels(&self) -> (&'static str, &'static str) {
        match self {
            AlgorithmConfig::ParallelExact => ("parallel", "exact"),
            AlgorithmConfig::DistributedSdp => ("distributed", "block_sdp"),
            AlgorithmConfig::DistributedScalar2 => ("distributed", "scalar2"),
            AlgorithmConfig::DistributedScalar1 => ("distributed", "scalar1"),
        }
    }

    pub fn all() -> Vec<AlgorithmConfig> {
        vec![
            AlgorithmConfig::ParallelExact,
            AlgorithmConfig::DistributedSdp,
            AlgorithmConfig::DistributedScalar2,
            AlgorithmConfig::DistributedScalar1,
        ]
    }
}

/// One benchmark table row: a configuration on one instance, averaged over
/// the run's initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub algorithm: String,
    pub metric: String,
    #[serde(rename = "M")]
    pub subsystems: usize,
    pub vars: usize,
    pub constraints: usize,
    pub avg_local_rounds: f64,
    pub max_local_rounds: u64,
    pub avg_global_rounds: f64,
    pub max_global_rounds: u64,
    pub avg_iters: f64,
    pub avg_time_ms: f64,
}

/// Harness options. Runs that exhaust `solve.max_iter` are censored: their
/// rows keep the at-cap iteration counts rather than being dropped.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub initial_conditions: usize,
    pub solve: SolveOptions,
    pub configs: Vec<AlgorithmConfig>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            initial_conditions: 1,
            solve: SolveOptions {
                max_iter: 200_000,
                tol_primal_infeas: 1e-4,
                ..Default::default()
            },
            configs: AlgorithmConfig::all(),
        }
    }
}

/// Run the comparison harness: per configuration, per instance, solve from
/// each sampled initial condition and aggregate rounds and iterations.
pub fn bench(instances: &[Vec<SubsystemDynamics>], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for config in &opts.configs {
        for (inst_idx, dynamics) in instances.iter().enumerate() {
            let row = bench_one(dynamics, *config, inst_idx as u64, opts)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn bench_one(
    dynamics: &[SubsystemDynamics],
    config: AlgorithmConfig,
    instance_seed: u64,
    opts: &BenchOptions,
) -> Result<BenchRow> {
    let base = condense(dynamics)?;
    let (algorithm, metric_label) = config.labels();

    // Offline metric selection, shared across initial conditions.
    enum Prepared {
        Parallel(crate::metrics::Metric),
        Distributed(crate::metrics::Metric),
    }
    let prepared = match config {
        AlgorithmConfig::ParallelExact => Prepared::Parallel(exact_metric(&base)?),
        AlgorithmConfig::DistributedSdp => {
            let chooser = MetricChooser::whitened_sdp();
            Prepared::Distributed(distributed_init(&base, &chooser)?.metric)
        }
        AlgorithmConfig::DistributedScalar2 => {
            Prepared::Distributed(scalar_metric(&base, ScalarNorm::TwoNorm)?)
        }
        AlgorithmConfig::DistributedScalar1 => {
            Prepared::Distributed(scalar_metric(&base, ScalarNorm::OneNorm)?)
        }
    };

    let mut sum_local = 0u64;
    let mut max_local = 0u64;
    let mut sum_global = 0u64;
    let mut max_global = 0u64;
    let mut sum_iters = 0u64;
    let mut sum_ms = 0.0f64;
    for ic in 0..opts.initial_conditions.max(1) {
        let mut problem = base.clone();
        if ic > 0 {
            let mut dyn_ic = dynamics.to_vec();
            resample_initial_states(&mut dyn_ic, instance_seed * 1000 + ic as u64);
            problem.b_vec = initial_state_rhs(&dyn_ic);
        }
        let report: SolveReport = match &prepared {
            Prepared::Parallel(metric) => {
                parallel_fast_dual_gradient(&problem, metric, None, &opts.solve)?
            }
            Prepared::Distributed(metric) => {
                run_distributed(&problem, metric, None, &opts.solve, &SimConfig::default())?.report
            }
        };
        sum_local += report.counters.local_rounds;
        max_local = max_local.max(report.counters.local_rounds);
        sum_global += report.counters.global_rounds;
        max_global = max_global.max(report.counters.global_rounds);
        sum_iters += report.iterations as u64;
        sum_ms += report.wall_time_ms;
    }
    let runs = opts.initial_conditions.max(1) as f64;
    Ok(BenchRow {
        algorithm: algorithm.to_string(),
        metric: metric_label.to_string(),
        subsystems: dynamics.len(),
        vars: base.partition.total_n(),
        constraints: base.partition.total_m() + base.partition.total_p(),
        avg_local_rounds: sum_local as f64 / runs,
        max_local_rounds: max_local,
        avg_global_rounds: sum_global as f64 / runs,
        max_global_rounds: max_global,
        avg_iters: sum_iters as f64 / runs,
        avg_time_ms: sum_ms / runs,
    })
}

/// Write benchmark rows as CSV with the fixed column schema.
pub fn write_bench_csv<W: Write>(rows: &[BenchRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read benchmark rows back from CSV.
pub fn read_bench_csv<R: Read>(reader: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrator(x0: f64) -> SubsystemDynamics {
        SubsystemDynamics {
            n_x: 1,
            n_u: 1,
            horizon: 1,
            phi: vec![(0, DMatrix::from_row_slice(1, 1, &[1.0]))],
            gamma: vec![(0, DMatrix::from_row_slice(1, 1, &[1.0]))],
            x0: DVector::from_element(1, x0),
            state_bounds: Bounds::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0))
                .unwrap(),
            input_bounds: Bounds::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0))
                .unwrap(),
            q: DVector::from_element(1, 1.0),
            r: DVector::from_element(1, 1.0),
            q_f: DVector::from_element(1, 1.0),
        }
    }

    #[test]
    fn scalar_integrator_condensation() {
        // x(t+1) = x(t) + u(t), N = 1, x0 = 0: variables (x0, x1, u0),
        // equalities x(0) = 0 and x(1) - x(0) - u(0) = 0.
        let p = condense(&[integrator(0.0)]).unwrap();
        assert_eq!(p.partition.n_sizes, vec![3]);
        assert_eq!(p.partition.m_sizes, vec![2]);
        let a = p.a.assemble_dense();
        let expect = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, 1.0, -1.0]);
        assert_eq!(a, expect);
        assert_eq!(p.b_vec.as_slice(), &[0.0, 0.0]);
        // H = diag(Q, Q_f, R) = I.
        match &p.costs[0].hessian {
            CostMatrix::Diagonal(d) => assert_eq!(d.as_slice(), &[1.0, 1.0, 1.0]),
            _ => panic!(),
        }
    }

    #[test]
    fn decoupled_pair_has_block_diagonal_a() {
        let p = condense(&[integrator(0.1), {
            let mut d = integrator(-0.2);
            d.phi = vec![(1, DMatrix::from_row_slice(1, 1, &[1.0]))];
            d.gamma = vec![(1, DMatrix::from_row_slice(1, 1, &[1.0]))];
            d
        }])
        .unwrap();
        assert_eq!(p.neighbors.n[0], vec![0]);
        assert_eq!(p.neighbors.n[1], vec![1]);
    }

    #[test]
    fn coupled_inequality_builds_one_sided_box() {
        // x_1(1) + x_2(1) <= 1 with free lower side.
        let d0 = integrator(0.0);
        let mut d1 = integrator(0.0);
        d1.phi = vec![(1, DMatrix::from_row_slice(1, 1, &[1.0]))];
        d1.gamma = vec![(1, DMatrix::from_row_slice(1, 1, &[1.0]))];
        let mut b0 = DMatrix::zeros(1, 3);
        b0[(0, 1)] = 1.0; // x_0(1)
        let mut b1 = DMatrix::zeros(1, 3);
        b1[(0, 1)] = 1.0; // x_1(1)
        let coupling = CouplingSpec::Inequality {
            owner: 0,
            blocks: vec![(0, b0), (1, b1)],
            lower: DVector::from_element(1, f64::NEG_INFINITY),
            upper: DVector::from_element(1, 1.0),
        };
        let p = condense_coupled(&[d0, d1], &[coupling]).unwrap();
        assert_eq!(p.partition.p_sizes, vec![1, 0]);
        let b = p.b_mat.as_ref().unwrap();
        assert_eq!(b.block(0, 0).unwrap()[(0, 1)], 1.0);
        assert_eq!(b.block(0, 1).unwrap()[(0, 1)], 1.0);
        match &p.costs[0].coupled {
            Some(CoupledCost::Box(bx)) => {
                assert!(bx.lower[0].is_infinite());
                assert_eq!(bx.upper[0], 1.0);
            }
            other => panic!("unexpected coupled term {other:?}"),
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let mut config = GeneratorConfig::desk_default();
        config.subsystem_count = 5;
        config.seed = 42;
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_single_subsystem_hits_target_radius() {
        let mut config = GeneratorConfig::desk_default();
        config.subsystem_count = 1;
        config.seed = 7;
        let dynamics = generate(&config).unwrap();
        let phi = &dynamics[0].phi[0].1;
        let rho = phi
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max);
        assert!((rho - 1.15).abs() < 1e-6, "rho {rho}");
    }

    #[test]
    fn desk_default_dimensions_in_expected_band() {
        let config = GeneratorConfig::desk_default();
        let dynamics = generate(&config).unwrap();
        let p = condense(&dynamics).unwrap();
        let vars = p.partition.total_n();
        assert!((640..=1280).contains(&vars), "vars {vars}");
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let rows = vec![BenchRow {
            algorithm: "distributed".into(),
            metric: "block_sdp".into(),
            subsystems: 20,
            vars: 960,
            constraints: 660,
            avg_local_rounds: 512.5,
            max_local_rounds: 1024,
            avg_global_rounds: 0.0,
            max_global_rounds: 0,
            avg_iters: 256.25,
            avg_time_ms: 12.345678,
        }];
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with(
            "algorithm,metric,M,vars,constraints,avg_local_rounds,max_local_rounds,avg_global_rounds,max_global_rounds,avg_iters,avg_time_ms"
        ));
        let back = read_bench_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }
}
