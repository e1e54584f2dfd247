//! Synchronous-round message-passing simulator.
//!
//! Executes the distributed dual solver and the distributed metric
//! initialization node by node under lockstep barriers, with communication
//! accounting, locality enforcement, an optional trace log, and
//! plug-and-play reconfiguration.
//!
//! Every node holds only neighborhood-local data. Between barriers, node
//! step functions are pure with respect to their inbox/outbox, so the
//! processing order inside a phase cannot affect results; the simulator
//! shuffles that order from the config seed to keep the guarantee honest.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block_model::{
    Bounds, CostMatrix, CoupledCost, LocalCost, ProblemInstance, SparseBlockMatrix,
};
use crate::error::{Error, Result};
use crate::metrics::{
    local_gram, sum_node_blocks, verify_choice, DistributedInit, LocalChoice, Metric,
    MetricChooser, SmallSpd,
};
use crate::prox::{dual_objective, inner_minimize, prox_conjugate_with_primal, InnerProblem};
use crate::solvers::{extrapolate, next_t, DualIterate, SolveOptions, SolveReport, StopVerdict};

/// Communication accounting. One local round is one barrier-separated
/// neighbor exchange; global rounds belong to the parallel algorithm's hub
/// exchanges. Self-messages are never counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundCounters {
    pub local_rounds: u64,
    pub global_rounds: u64,
    pub messages: u64,
    pub payload_scalars: u64,
}

impl RoundCounters {
    pub fn merged(self, other: RoundCounters) -> RoundCounters {
        RoundCounters {
            local_rounds: self.local_rounds + other.local_rounds,
            global_rounds: self.global_rounds + other.global_rounds,
            messages: self.messages + other.messages,
            payload_scalars: self.payload_scalars + other.payload_scalars,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Local,
    Global,
}

/// One message record of the trace log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub round: u64,
    pub kind: RoundKind,
    pub sender: usize,
    pub receiver: usize,
    pub scalars: usize,
}

/// Render trace records in the stable tab-separated format:
/// `round \t kind \t sender \t receiver \t scalars`, sorted by
/// (round, sender, receiver) for harness diffing.
pub fn render_trace(records: &[TraceRecord]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.round, r.sender, r.receiver));
    let mut out = String::new();
    for r in &sorted {
        let kind = match r.kind {
            RoundKind::Local => "local",
            RoundKind::Global => "global",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.round, kind, r.sender, r.receiver, r.scalars
        ));
    }
    out
}

/// Simulator configuration. Lockstep is the only barrier mode; fault
/// injection is reserved and must stay `None`. The seed only permutes the
/// in-phase processing order (results are schedule independent).
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub barrier: BarrierMode,
    pub fault_injection: FaultMode,
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierMode {
    Lockstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    None,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            barrier: BarrierMode::Lockstep,
            fault_injection: FaultMode::None,
            trace: false,
        }
    }
}

/// A simulated node: neighborhood-local data plus its iterate state.
#[derive(Debug, Clone)]
struct Node {
    id: usize,
    n_dim: usize,
    m_dim: usize,
    p_dim: usize,
    hessian: CostMatrix,
    linear: DVector<f64>,
    bounds: Option<Bounds>,
    coupled: Option<CoupledCost>,
    b: DVector<f64>,
    /// `A_ij` for structurally nonzero blocks of block row `i`, sorted.
    row_blocks_a: Vec<(usize, DMatrix<f64>)>,
    /// `A_ji` for structurally nonzero blocks of block column `i`, sorted.
    col_blocks_a: Vec<(usize, DMatrix<f64>)>,
    row_blocks_b: Vec<(usize, DMatrix<f64>)>,
    col_blocks_b: Vec<(usize, DMatrix<f64>)>,
    /// Union neighbor sets (communication pattern).
    n_set: Vec<usize>,
    m_set: Vec<usize>,
    l_lambda: SmallSpd,
    l_mu_diag: DVector<f64>,
    // Iterate state.
    z: DVector<f64>,
    v: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    lambda_prev: DVector<f64>,
    mu_prev: DVector<f64>,
    y: DVector<f64>,
    coupled_point: DVector<f64>,
    primal_residual: f64,
    coupling_residual: f64,
}

impl Node {
    /// Primal update from the gathered neighborhood duals (exchange 1).
    fn primal_update(&mut self, inbox: &BTreeMap<usize, (DVector<f64>, DVector<f64>)>) -> Result<()> {
        let mut offset = DVector::zeros(self.n_dim);
        for (j, blk) in &self.col_blocks_a {
            let zj = if *j == self.id { &self.z } else { &inbox[j].0 };
            offset.gemv_tr(1.0, blk, zj, 1.0);
        }
        if !self.col_blocks_b.is_empty() {
            let mut off_b = DVector::zeros(self.n_dim);
            for (j, blk) in &self.col_blocks_b {
                let vj = if *j == self.id { &self.v } else { &inbox[j].1 };
                off_b.gemv_tr(1.0, blk, vj, 1.0);
            }
            offset += off_b;
        }
        let ip = InnerProblem {
            hessian: &self.hessian,
            linear: &self.linear,
            bounds: self.bounds.as_ref(),
        };
        self.y = inner_minimize(&ip, &offset)?;
        Ok(())
    }

    /// Dual update from the gathered neighborhood primals (exchange 2).
    fn dual_update(&mut self, inbox: &BTreeMap<usize, DVector<f64>>) -> Result<()> {
        let mut ay = DVector::zeros(self.m_dim);
        for (j, blk) in &self.row_blocks_a {
            let yj = if *j == self.id { &self.y } else { &inbox[j] };
            ay.gemv(1.0, blk, yj, 1.0);
        }
        let r = ay - &self.b;
        self.primal_residual = r.amax();
        self.lambda = &self.z + self.l_lambda.solve(&r);

        if self.p_dim > 0 {
            let mut by = DVector::zeros(self.p_dim);
            for (j, blk) in &self.row_blocks_b {
                let yj = if *j == self.id { &self.y } else { &inbox[j] };
                by.gemv(1.0, blk, yj, 1.0);
            }
            let wi = &self.v + by.component_div(&self.l_mu_diag);
            let g = match &self.coupled {
                Some(CoupledCost::Box(b)) => crate::prox::SeparableFunction::BoxIndicator(b.clone()),
                Some(CoupledCost::OneNorm(w)) => crate::prox::SeparableFunction::OneNorm {
                    weight: w.clone(),
                },
                None => unreachable!("p_dim > 0 implies a coupled term"),
            };
            let li = Metric::Diagonal {
                d: self.l_mu_diag.clone(),
            };
            let (mui, si) = prox_conjugate_with_primal(&g, &li, &wi)?;
            self.coupling_residual = (&by - &si).amax();
            self.mu = mui;
            self.coupled_point = si;
        }
        Ok(())
    }

    fn momentum(&mut self, coeff: f64) {
        self.z = extrapolate(&self.lambda, &self.lambda_prev, coeff);
        self.v = extrapolate(&self.mu, &self.mu_prev, coeff);
        self.lambda_prev = self.lambda.clone();
        self.mu_prev = self.mu.clone();
    }
}

fn build_nodes(
    problem: &ProblemInstance,
    metric: &Metric,
    lambda0: &DVector<f64>,
    mu0: &DVector<f64>,
) -> Result<Vec<Node>> {
    let partition = &problem.partition;
    let (l_lambda, l_mu) = metric.split_lambda_mu(partition)?;
    let lambda_solvers = l_lambda.block_solvers(&partition.m_sizes)?;
    let mu_diag = match &l_mu {
        Metric::Diagonal { d } => d.clone(),
        Metric::Scalar { alpha, dim } => DVector::from_element(*dim, *alpha),
        _ => unreachable!("split always yields a diagonal mu metric"),
    };
    let ll = partition.lambda_layout();
    let ml = partition.mu_layout();
    let mut nodes = Vec::with_capacity(problem.subsystem_count());
    for (i, l_lam) in lambda_solvers.into_iter().enumerate() {
        let cost = &problem.costs[i];
        let li0: DVector<f64> = ll.view(lambda0, i).into();
        let mi0: DVector<f64> = ml.view(mu0, i).into();
        nodes.push(Node {
            id: i,
            n_dim: partition.n_sizes[i],
            m_dim: partition.m_sizes[i],
            p_dim: partition.p_sizes[i],
            hessian: cost.hessian.clone(),
            linear: cost.linear.clone(),
            bounds: cost.bounds.clone(),
            coupled: cost.coupled.clone(),
            b: problem.b_block(i).into_owned(),
            row_blocks_a: problem.a.row_blocks(i).map(|(j, b)| (j, b.clone())).collect(),
            col_blocks_a: problem.a.col_blocks(i).map(|(j, b)| (j, b.clone())).collect(),
            row_blocks_b: problem
                .b_mat
                .as_ref()
                .map(|b| b.row_blocks(i).map(|(j, m)| (j, m.clone())).collect())
                .unwrap_or_default(),
            col_blocks_b: problem
                .b_mat
                .as_ref()
                .map(|b| b.col_blocks(i).map(|(j, m)| (j, m.clone())).collect())
                .unwrap_or_default(),
            n_set: problem.neighbors.n[i].clone(),
            m_set: problem.neighbors.m[i].clone(),
            l_lambda: l_lam,
            l_mu_diag: ml.view(&mu_diag, i).into(),
            z: li0.clone(),
            v: mi0.clone(),
            lambda: li0.clone(),
            mu: mi0.clone(),
            lambda_prev: li0,
            mu_prev: mi0,
            y: DVector::zeros(partition.n_sizes[i]),
            coupled_point: DVector::zeros(partition.p_sizes[i]),
            primal_residual: 0.0,
            coupling_residual: 0.0,
        });
    }
    Ok(nodes)
}

/// Outcome of a simulated run: the solver report plus the trace log.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: SolveReport,
    pub trace: Vec<TraceRecord>,
}

/// Execute the distributed dual solver under lockstep barriers.
///
/// The metric must be block-diagonal with one block per dual block. The
/// iterate sequence is identical (bit for bit) to the centralized dual
/// solver handed the same metric. The report's counters cover this run
/// only; one iteration costs exactly two local rounds.
pub fn run_distributed(
    problem: &ProblemInstance,
    metric: &Metric,
    nu0: Option<(DVector<f64>, DVector<f64>)>,
    opts: &SolveOptions,
    config: &SimConfig,
) -> Result<SimRun> {
    opts.validate()?;
    if !matches!(metric, Metric::BlockDiagonal(_) | Metric::Diagonal { .. } | Metric::Scalar { .. }) {
        return Err(Error::Unsupported(
            "distributed execution needs a block-diagonal (or finer) metric".into(),
        ));
    }
    let start = Instant::now();
    let count = problem.subsystem_count();
    let m_total = problem.partition.total_m();
    let p_total = problem.partition.total_p();
    let (lambda0, mu0) = nu0.unwrap_or_else(|| (DVector::zeros(m_total), DVector::zeros(p_total)));
    let mut nodes = build_nodes(problem, metric, &lambda0, &mu0)?;
    let mut sim = SimState::new(count, config, problem);
    let order = sim.order.clone();

    let mut report = SolveReport {
        iterations: 0,
        converged: false,
        x: DVector::zeros(problem.partition.total_n()),
        lambda: lambda0,
        mu: mu0,
        residuals: Vec::new(),
        dual_objectives: Vec::new(),
        iterates: Vec::new(),
        counters: RoundCounters::default(),
        wall_time_ms: 0.0,
    };
    let mut t = 1.0f64;

    for k in 1..=opts.max_iter {
        // Exchange 1: duals along N_i, received along M_i.
        let mut dual_inboxes: Vec<BTreeMap<usize, (DVector<f64>, DVector<f64>)>> =
            vec![BTreeMap::new(); count];
        for &i in &order {
            let payload = (nodes[i].z.clone(), nodes[i].v.clone());
            let scalars = nodes[i].m_dim + nodes[i].p_dim;
            for &j in &nodes[i].n_set {
                if j == i {
                    continue;
                }
                sim.post_local(i, j, scalars, &mut report.counters)?;
                dual_inboxes[j].insert(i, payload.clone());
            }
        }
        sim.end_local_round(&mut report.counters);

        for &i in &order {
            nodes[i].primal_update(&dual_inboxes[i])?;
        }

        // Exchange 2: primals along M_i, received along N_i.
        let mut primal_inboxes: Vec<BTreeMap<usize, DVector<f64>>> = vec![BTreeMap::new(); count];
        for &i in &order {
            let scalars = nodes[i].n_dim;
            for &j in &nodes[i].m_set {
                if j == i {
                    continue;
                }
                sim.post_local(i, j, scalars, &mut report.counters)?;
                primal_inboxes[j].insert(i, nodes[i].y.clone());
            }
        }
        sim.end_local_round(&mut report.counters);

        for &i in &order {
            nodes[i].dual_update(&primal_inboxes[i])?;
        }

        // Convergence detection by the harness: max residual over nodes in
        // id order. Not counted as communication.
        let mut primal_residual = 0.0f64;
        let mut coupling_residual = 0.0f64;
        for node in &nodes {
            primal_residual = primal_residual.max(node.primal_residual);
            coupling_residual = coupling_residual.max(node.coupling_residual);
        }

        report.iterations = k;
        let state = assemble_state(problem, &nodes, t, k, primal_residual, coupling_residual);
        if opts.record_trajectory {
            report.residuals.push(primal_residual.max(coupling_residual));
            report
                .dual_objectives
                .push(dual_objective(problem, &state.lambda, &state.mu)?);
        }
        if opts.record_iterates {
            report.iterates.push(state.clone());
        }
        report.x = state.y.clone();
        report.lambda = state.lambda.clone();
        report.mu = state.mu.clone();

        let verdict = crate::solvers::stopping_check(&state, problem, opts);
        if verdict == StopVerdict::Converged {
            report.converged = true;
            break;
        }
        if verdict == StopVerdict::MaxIter {
            break;
        }

        let t_next = if opts.use_momentum { next_t(t) } else { 1.0 };
        let coeff = (t - 1.0) / t_next;
        for &i in &order {
            nodes[i].momentum(coeff);
        }
        t = t_next;
    }
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(SimRun {
        report,
        trace: sim.trace,
    })
}

fn assemble_state(
    problem: &ProblemInstance,
    nodes: &[Node],
    t: f64,
    k: usize,
    primal_residual: f64,
    coupling_residual: f64,
) -> DualIterate {
    let ll = problem.partition.lambda_layout();
    let ml = problem.partition.mu_layout();
    let pl = problem.partition.primal_layout();
    let mut lambda = DVector::zeros(ll.total());
    let mut mu = DVector::zeros(ml.total());
    let mut z = DVector::zeros(ll.total());
    let mut v = DVector::zeros(ml.total());
    let mut y = DVector::zeros(pl.total());
    let mut coupled = DVector::zeros(ml.total());
    for (i, node) in nodes.iter().enumerate() {
        lambda.rows_mut(ll.offset(i), node.m_dim).copy_from(&node.lambda);
        z.rows_mut(ll.offset(i), node.m_dim).copy_from(&node.z);
        mu.rows_mut(ml.offset(i), node.p_dim).copy_from(&node.mu);
        v.rows_mut(ml.offset(i), node.p_dim).copy_from(&node.v);
        y.rows_mut(pl.offset(i), node.n_dim).copy_from(&node.y);
        coupled
            .rows_mut(ml.offset(i), node.p_dim)
            .copy_from(&node.coupled_point);
    }
    DualIterate {
        lambda,
        mu,
        z,
        v,
        t,
        y,
        k,
        coupled_point: coupled,
        primal_residual,
        coupling_residual,
    }
}

/// Internal bookkeeping: message routing tables, counters, trace.
struct SimState {
    allowed: Vec<Vec<usize>>,
    order: Vec<usize>,
    trace_enabled: bool,
    trace: Vec<TraceRecord>,
    round: u64,
}

impl SimState {
    fn new(count: usize, config: &SimConfig, problem: &ProblemInstance) -> Self {
        // A node may message its row and column neighbors.
        let mut allowed = Vec::with_capacity(count);
        for i in 0..count {
            let mut s = problem.neighbors.n[i].clone();
            for &j in &problem.neighbors.m[i] {
                if !s.contains(&j) {
                    s.push(j);
                }
            }
            s.sort_unstable();
            allowed.push(s);
        }
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        order.shuffle(&mut rng);
        Self {
            allowed,
            order,
            trace_enabled: config.trace,
            trace: Vec::new(),
            round: 0,
        }
    }

    /// Validate and account one point-to-point message in the current
    /// local round. Self-messages are not posted.
    fn post_local(&mut self, from: usize, to: usize, scalars: usize, counters: &mut RoundCounters) -> Result<()> {
        if !self.allowed[from].contains(&to) {
            return Err(Error::ProtocolViolation { from, to });
        }
        counters.messages += 1;
        counters.payload_scalars += scalars as u64;
        if self.trace_enabled {
            self.trace.push(TraceRecord {
                round: self.round,
                kind: RoundKind::Local,
                sender: from,
                receiver: to,
                scalars,
            });
        }
        Ok(())
    }

    fn end_local_round(&mut self, counters: &mut RoundCounters) {
        counters.local_rounds += 1;
        self.round += 1;
    }
}

/// Distributed metric initialization executed with explicit messages:
/// every node chooses its neighborhood blocks, sends each member its
/// block in one local round, and sums what it receives. Matches the
/// non-simulated initialization bit for bit.
pub fn run_distributed_init(
    problem: &ProblemInstance,
    chooser: &MetricChooser,
    config: &SimConfig,
) -> Result<(DistributedInit, RoundCounters, Vec<TraceRecord>)> {
    let count = problem.subsystem_count();
    let mut sim = SimState::new(count, config, problem);
    let order = sim.order.clone();
    let mut counters = RoundCounters::default();

    let mut choices: Vec<Option<LocalChoice>> = vec![None; count];
    for &i in &order {
        let gram = local_gram(problem, i)?;
        let choice = chooser.choose(&gram, &problem.partition)?;
        verify_choice(&gram, &choice)?;
        choices[i] = Some(choice);
    }
    let choices: Vec<LocalChoice> = choices.into_iter().map(|c| c.unwrap()).collect();

    // One local round: node i sends L_{M_i, j} to each member j.
    let mut inboxes: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); count];
    for &i in &order {
        for (pos, &j) in choices[i].members.iter().enumerate() {
            if j == i {
                continue;
            }
            let block = &choices[i].blocks[pos];
            sim.post_local(i, j, block.nrows() * block.ncols(), &mut counters)?;
            inboxes[j].insert(i, block.clone());
        }
    }
    sim.end_local_round(&mut counters);

    // L_i = sum over row neighbors in sorted order.
    let mut node_blocks = Vec::with_capacity(count);
    for i in 0..count {
        let dim = problem.partition.dual_size(i);
        let mut sum = DMatrix::zeros(dim, dim);
        for &j in &problem.neighbors.n[i] {
            let blk = if j == i {
                choices[i].block_for(i).ok_or(Error::InfeasibleMetric {
                    node: i,
                    detail: "own choice misses the diagonal member".into(),
                })?
            } else {
                inboxes[i].get(&j).ok_or(Error::InfeasibleMetric {
                    node: j,
                    detail: format!("no block received from row neighbor {j}"),
                })?
            };
            sum += blk;
        }
        node_blocks.push(sum);
    }
    let metric = Metric::block_diagonal(node_blocks.clone())?;
    Ok((
        DistributedInit {
            choices,
            node_blocks,
            metric,
        },
        counters,
        sim.trace,
    ))
}

/// A reconfiguration request.
pub enum Reconfiguration {
    AddSubsystem(Box<SubsystemSpec>),
    RemoveSubsystem(usize),
}

/// Raw block-level description of a subsystem to add. The new subsystem is
/// appended at index `M` (the previous count); block indices in the
/// coupling lists refer to existing nodes or to `M` itself for diagonal
/// blocks.
pub struct SubsystemSpec {
    pub cost: LocalCost,
    pub n_dim: usize,
    pub m_dim: usize,
    pub p_dim: usize,
    pub b: DVector<f64>,
    /// `A_{new, j}` blocks.
    pub a_row: Vec<(usize, DMatrix<f64>)>,
    /// `A_{j, new}` blocks (j < M).
    pub a_col: Vec<(usize, DMatrix<f64>)>,
    pub b_row: Vec<(usize, DMatrix<f64>)>,
    pub b_col: Vec<(usize, DMatrix<f64>)>,
}

/// Persistent simulator: problem plus the distributed metric state, with
/// plug-and-play reconfiguration.
pub struct Simulator {
    problem: ProblemInstance,
    chooser: MetricChooser,
    config: SimConfig,
    init: DistributedInit,
    /// Per-node remaining feasibility margin: `blkdiag(choice_i) >= G_i + slack_i * I`.
    slack: Vec<f64>,
    total_counters: RoundCounters,
    init_trace: Vec<TraceRecord>,
}

impl Simulator {
    /// Build a simulator and run the simulated metric initialization.
    pub fn new(problem: ProblemInstance, chooser: MetricChooser, config: SimConfig) -> Result<Self> {
        let (init, counters, trace) = run_distributed_init(&problem, &chooser, &config)?;
        let slack = init.choices.iter().map(|c| c.eps).collect();
        Ok(Self {
            problem,
            chooser,
            config,
            init,
            slack,
            total_counters: counters,
            init_trace: trace,
        })
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.problem
    }

    pub fn metric(&self) -> &Metric {
        &self.init.metric
    }

    pub fn init(&self) -> &DistributedInit {
        &self.init
    }

    /// Counters accumulated over initialization, reconfigurations, and
    /// every solve run so far.
    pub fn total_counters(&self) -> RoundCounters {
        self.total_counters
    }

    pub fn init_trace(&self) -> &[TraceRecord] {
        &self.init_trace
    }

    /// Run the distributed solver with the current metric.
    pub fn solve(
        &mut self,
        nu0: Option<(DVector<f64>, DVector<f64>)>,
        opts: &SolveOptions,
    ) -> Result<SimRun> {
        let run = run_distributed(&self.problem, &self.init.metric, nu0, opts, &self.config)?;
        self.total_counters = self.total_counters.merged(run.report.counters);
        Ok(run)
    }

    /// Plug-and-play reconfiguration.
    ///
    /// Adding subsystem `i`: node `i` runs a fresh metric choice; each
    /// column neighbor `k in N_i \ {i}` keeps its existing blocks frozen
    /// (bit-identical) and extends its choice with one new block for `i`,
    /// sized by a Schur-complement bound against its remaining margin.
    /// Removing subsystem `i`: neighbors drop their block for `i`; nothing
    /// is re-chosen. Either way only nodes in `{i} u M_i u N_i` can see
    /// their metric change. The returned touched set is the conservative
    /// notification set: `{i}`, its neighbors, and for additions the
    /// neighbors' neighbors.
    ///
    /// The equality constraints are rank-validated before committing; on
    /// failure the simulator state is untouched.
    pub fn reconfigure(&mut self, change: Reconfiguration) -> Result<Vec<usize>> {
        match change {
            Reconfiguration::AddSubsystem(spec) => self.add_subsystem(*spec),
            Reconfiguration::RemoveSubsystem(i) => self.remove_subsystem(i),
        }
    }

    fn add_subsystem(&mut self, spec: SubsystemSpec) -> Result<Vec<usize>> {
        let old_count = self.problem.subsystem_count();
        let new = old_count;
        let partition = &self.problem.partition;

        let mut n_sizes = partition.n_sizes.clone();
        let mut m_sizes = partition.m_sizes.clone();
        let mut p_sizes = partition.p_sizes.clone();
        n_sizes.push(spec.n_dim);
        m_sizes.push(spec.m_dim);
        p_sizes.push(spec.p_dim);
        let new_partition = crate::block_model::BlockPartition::new(n_sizes.clone(), m_sizes.clone(), p_sizes.clone())?;

        let mut a = SparseBlockMatrix::new(m_sizes.clone(), n_sizes.clone());
        for (i, j, blk) in self.problem.a.iter_blocks() {
            a.insert_block(i, j, blk.clone())?;
        }
        for (j, blk) in &spec.a_row {
            a.insert_block(new, *j, blk.clone())?;
        }
        for (j, blk) in &spec.a_col {
            if *j >= old_count {
                return Err(Error::Invalid("column coupling references the new node; put the diagonal block in a_row".into()));
            }
            a.insert_block(*j, new, blk.clone())?;
        }
        let b_mat = match (&self.problem.b_mat, spec.p_dim > 0 || !spec.b_row.is_empty() || !spec.b_col.is_empty()) {
            (None, false) => None,
            (existing, _) => {
                let mut b = SparseBlockMatrix::new(p_sizes.clone(), n_sizes.clone());
                if let Some(old) = existing {
                    for (i, j, blk) in old.iter_blocks() {
                        b.insert_block(i, j, blk.clone())?;
                    }
                }
                for (j, blk) in &spec.b_row {
                    b.insert_block(new, *j, blk.clone())?;
                }
                for (j, blk) in &spec.b_col {
                    b.insert_block(*j, new, blk.clone())?;
                }
                Some(b)
            }
        };
        let mut costs = self.problem.costs.clone();
        costs.push(spec.cost);
        let mut b_vec = DVector::zeros(self.problem.b_vec.len() + spec.m_dim);
        b_vec.rows_mut(0, self.problem.b_vec.len()).copy_from(&self.problem.b_vec);
        b_vec
            .rows_mut(self.problem.b_vec.len(), spec.m_dim)
            .copy_from(&spec.b);

        let candidate = ProblemInstance::new(new_partition, costs, a, b_mat, b_vec)?;
        candidate.validate_rank(1e-10)?;

        // Fresh choice at the new node.
        let mut chooser = self.chooser.clone();
        if let Some(chunks) = &mut chooser.lambda_chunks {
            chunks.push(spec.m_dim.max(1));
        }
        let gram_new = local_gram(&candidate, new)?;
        let choice_new = chooser.choose(&gram_new, &candidate.partition)?;
        verify_choice(&gram_new, &choice_new)?;
        let slack_new = choice_new.eps;

        // Frozen extension at each column neighbor of the new node.
        let mut choices = self.init.choices.clone();
        let mut slack = self.slack.clone();
        let extend_set: Vec<usize> = candidate.neighbors.n[new]
            .iter()
            .copied()
            .filter(|&k| k != new)
            .collect();
        for &k in &extend_set {
            let gram_old = local_gram(&self.problem, k)?;
            let gram_ext = local_gram(&candidate, k)?;
            // The new node has the largest index, hence sits last in the
            // extended member list; the old leading principal block equals
            // the old Gram matrix.
            let old_dim = gram_old.g.nrows();
            let new_dim = candidate.partition.dual_size(new);
            debug_assert_eq!(gram_ext.g.nrows(), old_dim + new_dim);
            let x = gram_ext.g.view((0, old_dim), (old_dim, new_dim)).into_owned();
            let gamma = gram_ext.g.view((old_dim, old_dim), (new_dim, new_dim)).into_owned();
            let margin = 0.5 * slack[k];
            let mut w = choices[k].to_dense() - &gram_old.g;
            for r in 0..old_dim {
                w[(r, r)] -= margin;
            }
            let w_chol = w.cholesky().ok_or(Error::InfeasibleMetric {
                node: k,
                detail: "no remaining margin to extend the neighborhood metric".into(),
            })?;
            let t_mat = &gamma + x.transpose() * w_chol.solve(&x);
            // Structured dominator of t_mat over the new member's
            // sub-partition, so lambda/mu separability is preserved.
            let sub = chooser_member_partition(&chooser, new, spec.m_dim, spec.p_dim);
            let qs = sub.len() as f64;
            let mut l_new = DMatrix::zeros(new_dim, new_dim);
            let mut off = 0;
            for &d in &sub {
                let mut blk = t_mat.view((off, off), (d, d)).into_owned() * qs;
                for r in 0..d {
                    blk[(r, r)] += margin;
                }
                l_new.view_mut((off, off), (d, d)).copy_from(&blk);
                off += d;
            }
            choices[k].members.push(new);
            choices[k].blocks.push(l_new);
            slack[k] = margin;
        }
        choices.push(choice_new);
        slack.push(slack_new);

        let node_blocks = sum_node_blocks(&candidate, &choices)?;
        let metric = Metric::block_diagonal(node_blocks.clone())?;

        // Touched set: the new node, its neighbors, and their neighbors.
        let mut touched: Vec<usize> = vec![new];
        for &k in candidate.neighbors.n[new].iter().chain(candidate.neighbors.m[new].iter()) {
            touched.push(k);
            if k != new {
                touched.extend(candidate.neighbors.n[k].iter().copied());
                touched.extend(candidate.neighbors.m[k].iter().copied());
            }
        }
        touched.sort_unstable();
        touched.dedup();

        self.problem = candidate;
        self.chooser = chooser;
        self.init = DistributedInit {
            choices,
            node_blocks,
            metric,
        };
        self.slack = slack;
        // Reconfiguration exchange: one local round among the touched
        // neighborhood (the extension blocks travel to the new node and the
        // new node's blocks travel to its members).
        self.total_counters.local_rounds += 1;
        Ok(touched)
    }

    fn remove_subsystem(&mut self, target: usize) -> Result<Vec<usize>> {
        let old_count = self.problem.subsystem_count();
        if target >= old_count {
            return Err(Error::Invalid(format!("no subsystem {target}")));
        }
        if old_count == 1 {
            return Err(Error::Invalid("cannot remove the last subsystem".into()));
        }
        let partition = &self.problem.partition;
        let keep: Vec<usize> = (0..old_count).filter(|&i| i != target).collect();
        let reindex = |i: usize| if i > target { i - 1 } else { i };

        let n_sizes: Vec<usize> = keep.iter().map(|&i| partition.n_sizes[i]).collect();
        let m_sizes: Vec<usize> = keep.iter().map(|&i| partition.m_sizes[i]).collect();
        let p_sizes: Vec<usize> = keep.iter().map(|&i| partition.p_sizes[i]).collect();
        let new_partition = crate::block_model::BlockPartition::new(n_sizes.clone(), m_sizes.clone(), p_sizes.clone())?;

        let mut a = SparseBlockMatrix::new(m_sizes.clone(), n_sizes.clone());
        for (i, j, blk) in self.problem.a.iter_blocks() {
            if i != target && j != target {
                a.insert_block(reindex(i), reindex(j), blk.clone())?;
            }
        }
        let b_mat = match &self.problem.b_mat {
            None => None,
            Some(old) => {
                if p_sizes.iter().all(|&p| p == 0) {
                    None
                } else {
                    let mut b = SparseBlockMatrix::new(p_sizes.clone(), n_sizes.clone());
                    for (i, j, blk) in old.iter_blocks() {
                        if i != target && j != target {
                            b.insert_block(reindex(i), reindex(j), blk.clone())?;
                        }
                    }
                    Some(b)
                }
            }
        };
        let costs: Vec<LocalCost> = keep.iter().map(|&i| self.problem.costs[i].clone()).collect();
        let ll = partition.lambda_layout();
        let total_m: usize = m_sizes.iter().sum();
        let mut b_vec = DVector::zeros(total_m);
        let mut off = 0;
        for &i in &keep {
            b_vec
                .rows_mut(off, partition.m_sizes[i])
                .copy_from(&ll.view(&self.problem.b_vec, i));
            off += partition.m_sizes[i];
        }

        let candidate = ProblemInstance::new(new_partition, costs, a, b_mat, b_vec)?;
        candidate.validate_rank(1e-10)?;

        // Touched set in pre-change indices.
        let mut touched: Vec<usize> = vec![target];
        touched.extend(self.problem.neighbors.n[target].iter().copied());
        touched.extend(self.problem.neighbors.m[target].iter().copied());
        touched.sort_unstable();
        touched.dedup();

        // Drop the target's choice; drop its member block everywhere else.
        let mut choices = Vec::with_capacity(old_count - 1);
        let mut slack = Vec::with_capacity(old_count - 1);
        for &i in &keep {
            let mut c = self.init.choices[i].clone();
            if let Some(pos) = c.members.iter().position(|&m| m == target) {
                c.members.remove(pos);
                c.blocks.remove(pos);
            }
            c.node = reindex(i);
            for m in &mut c.members {
                *m = reindex(*m);
            }
            choices.push(c);
            slack.push(self.slack[i]);
        }
        if let Some(chunks) = &mut self.chooser.lambda_chunks {
            chunks.remove(target);
        }

        let node_blocks = sum_node_blocks(&candidate, &choices)?;
        let metric = Metric::block_diagonal(node_blocks.clone())?;

        self.problem = candidate;
        self.init = DistributedInit {
            choices,
            node_blocks,
            metric,
        };
        self.slack = slack;
        self.total_counters.local_rounds += 1;
        Ok(touched)
    }

    /// Locality oracle: may `from` message `to` under the current topology?
    pub fn route_allowed(&self, from: usize, to: usize) -> bool {
        from < self.problem.subsystem_count()
            && (self.problem.neighbors.n[from].contains(&to)
                || self.problem.neighbors.m[from].contains(&to))
    }
}

fn chooser_member_partition(chooser: &MetricChooser, j: usize, m_j: usize, p_j: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let chunk = chooser
        .lambda_chunks
        .as_ref()
        .map(|c| c[j].max(1))
        .unwrap_or(m_j.max(1));
    let mut left = m_j;
    while left > 0 {
        let c = chunk.min(left);
        sizes.push(c);
        left -= c;
    }
    sizes.extend(std::iter::repeat(1).take(p_j));
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_model::BlockPartition;

    fn decoupled_problem() -> ProblemInstance {
        let partition = BlockPartition::new(vec![1, 1], vec![1, 1], vec![0, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 1, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let costs = vec![
            LocalCost {
                hessian: CostMatrix::Diagonal(DVector::from_element(1, 2.0)),
                linear: DVector::zeros(1),
                bounds: None,
                coupled: None,
            },
            LocalCost {
                hessian: CostMatrix::Diagonal(DVector::from_element(1, 1.0)),
                linear: DVector::zeros(1),
                bounds: None,
                coupled: None,
            },
        ];
        ProblemInstance::new(partition, costs, a, None, DVector::from_vec(vec![1.0, 2.0])).unwrap()
    }

    #[test]
    fn one_iteration_costs_two_local_rounds() {
        let p = decoupled_problem();
        let init = crate::metrics::distributed_init(&p, &MetricChooser::closed_form()).unwrap();
        let opts = SolveOptions {
            max_iter: 1,
            ..Default::default()
        };
        let run = run_distributed(&p, &init.metric, None, &opts, &SimConfig::default()).unwrap();
        assert_eq!(run.report.counters.local_rounds, 2);
        assert_eq!(run.report.counters.global_rounds, 0);
    }

    #[test]
    fn decoupled_problem_sends_no_messages() {
        let p = decoupled_problem();
        let init = crate::metrics::distributed_init(&p, &MetricChooser::closed_form()).unwrap();
        let opts = SolveOptions {
            max_iter: 5,
            tol_primal_infeas: 1e-12,
            ..Default::default()
        };
        let run = run_distributed(&p, &init.metric, None, &opts, &SimConfig::default()).unwrap();
        assert_eq!(run.report.counters.messages, 0);
        assert_eq!(run.report.counters.payload_scalars, 0);
        assert!(run.report.converged);
        // Each block solves its own equality exactly: x_i = b_i.
        assert!((run.report.x[0] - 1.0).abs() < 1e-9);
        assert!((run.report.x[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn simulated_init_counts_one_round() {
        let p = decoupled_problem();
        let (init, counters, _) =
            run_distributed_init(&p, &MetricChooser::closed_form(), &SimConfig::default()).unwrap();
        assert_eq!(counters.local_rounds, 1);
        assert_eq!(counters.messages, 0); // decoupled: self-neighbors only
        let plain = crate::metrics::distributed_init(&p, &MetricChooser::closed_form()).unwrap();
        for (a, b) in init.node_blocks.iter().zip(plain.node_blocks.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_renders_sorted_and_stable() {
        let records = vec![
            TraceRecord { round: 1, kind: RoundKind::Local, sender: 2, receiver: 0, scalars: 3 },
            TraceRecord { round: 0, kind: RoundKind::Local, sender: 1, receiver: 2, scalars: 5 },
        ];
        let text = render_trace(&records);
        assert_eq!(text, "0\tlocal\t1\t2\t5\n1\tlocal\t2\t0\t3\n");
    }
}
