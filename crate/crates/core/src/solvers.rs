//! Fast gradient solvers: the generic generalized fast gradient method, its
//! dual instantiation for block-separable problems, and the parallel dual
//! variant backed by a sparse-factored metric.
//!
//! All block accumulations run in sorted neighbor order through the kernels
//! in [`crate::block_model`], so the centralized solvers and the simulated
//! distributed solver produce identical floating-point iterates.

use std::time::Instant;

use nalgebra::DVector;

use crate::block_model::ProblemInstance;
use crate::error::{Error, Result};
use crate::metrics::{Metric, SmallSpd};
use crate::prox::{
    dual_objective, inner_minimize, prox, prox_conjugate_with_primal, InnerProblem,
    SeparableFunction,
};
use crate::simnet::RoundCounters;

/// Momentum parameter recursion: `t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`.
pub fn next_t(t: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
}

/// Extrapolation step shared by every solver and the simulator nodes:
/// `cur + coeff * (cur - prev)`.
pub fn extrapolate(cur: &DVector<f64>, prev: &DVector<f64>, coeff: f64) -> DVector<f64> {
    cur + (cur - prev) * coeff
}

/// Solver options.
///
/// `tol_primal_infeas` bounds the sup-norm of the equality residual
/// `A y - b` and of the coupling residual; `tol_dual_progress` is the
/// fixed-point tolerance of the generic (non-dual) fast gradient method.
/// `use_momentum = false` forces `t^k = 1`, reducing the method to plain
/// generalized (dual) gradient ascent.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub tol_primal_infeas: f64,
    pub tol_dual_progress: f64,
    pub record_trajectory: bool,
    pub record_iterates: bool,
    pub use_momentum: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol_primal_infeas: 1e-8,
            tol_dual_progress: 1e-10,
            record_trajectory: false,
            record_iterates: false,
            use_momentum: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_primal_infeas > 0.0) || !(self.tol_dual_progress > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Dual algorithm state after iteration `k`.
#[derive(Debug, Clone)]
pub struct DualIterate {
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
    pub y: DVector<f64>,
    pub k: usize,
    /// Prox-consistent coupled point from the last mu-update; converges to
    /// `B x*`.
    pub coupled_point: DVector<f64>,
    /// `||A y^k - b||_inf`, stored by the update that produced `y^k`.
    pub primal_residual: f64,
    /// `||B y^k - coupled_point||_inf`; zero when no coupled terms exist.
    pub coupling_residual: f64,
}

/// Verdict of the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopVerdict {
    Continue,
    Converged,
    MaxIter,
}

/// Stopping rule: converged once both the equality residual and the
/// coupling residual are within `tol_primal_infeas` in sup-norm; `MaxIter`
/// once `k` reaches the budget.
pub fn stopping_check(
    state: &DualIterate,
    _problem: &ProblemInstance,
    opts: &SolveOptions,
) -> StopVerdict {
    if state.primal_residual <= opts.tol_primal_infeas
        && state.coupling_residual <= opts.tol_primal_infeas
    {
        return StopVerdict::Converged;
    }
    if state.k >= opts.max_iter {
        return StopVerdict::MaxIter;
    }
    StopVerdict::Continue
}

/// Per-run record.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Final primal iterate.
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    /// Per-iteration `max(primal residual, coupling residual)` when
    /// trajectory recording is on.
    pub residuals: Vec<f64>,
    /// Per-iteration dual objective `D(lambda^k, mu^k)` when trajectory
    /// recording is on.
    pub dual_objectives: Vec<f64>,
    /// Full iterate snapshots when `record_iterates` is on.
    pub iterates: Vec<DualIterate>,
    /// Communication accounting; filled by the simulator or, for the
    /// parallel algorithm, by its analytic hub-exchange count.
    pub counters: RoundCounters,
    pub wall_time_ms: f64,
}

impl SolveReport {
    fn new(x: DVector<f64>, lambda: DVector<f64>, mu: DVector<f64>) -> Self {
        Self {
            iterations: 0,
            converged: false,
            x,
            lambda,
            mu,
            residuals: Vec::new(),
            dual_objectives: Vec::new(),
            iterates: Vec::new(),
            counters: RoundCounters::default(),
            wall_time_ms: 0.0,
        }
    }
}

/// Generalized fast gradient method for `min ell(x) + psi(x)`.
///
/// `grad` must be the gradient of a convex `ell` satisfying the quadratic
/// upper bound induced by `l` (the caller's responsibility; the dual
/// instantiations verify it through the metric machinery). Stops when the
/// fixed-point residual `||x^k - y^k||_inf` falls below
/// `tol_dual_progress`.
pub fn fast_gradient<F>(
    mut grad: F,
    psi: &SeparableFunction,
    l: &Metric,
    x0: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<SolveReport>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    opts.validate()?;
    let start = Instant::now();
    let mut x_prev = x0.clone();
    let mut y = x0.clone();
    let mut t = 1.0f64;
    let mut report = SolveReport::new(x0.clone(), DVector::zeros(0), DVector::zeros(0));
    for k in 1..=opts.max_iter {
        let g = grad(&y);
        let x = prox(psi, l, &(&y - l.solve(&g)))?;
        let res = (&x - &y).amax();
        if opts.record_trajectory {
            report.residuals.push(res);
        }
        report.iterations = k;
        report.x = x.clone();
        if res <= opts.tol_dual_progress {
            report.converged = true;
            break;
        }
        let t_next = if opts.use_momentum { next_t(t) } else { 1.0 };
        let coeff = (t - 1.0) / t_next;
        y = extrapolate(&x, &x_prev, coeff);
        x_prev = x;
        t = t_next;
    }
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// How the lambda update inverts its metric.
enum LambdaSolver<'a> {
    /// One solver per dual block; block `i` updates independently.
    PerBlock(Vec<SmallSpd>),
    /// One global solve against the full metric (sparse-factored or dense).
    Global(&'a Metric),
}

/// Generalized fast dual gradient method.
///
/// `l_lambda` shapes the equality dual update; block-structured metrics
/// update per block, anything else (in particular the exact sparse-factored
/// metric) updates through one global solve. `l_mu` must be diagonal or
/// scalar and is required exactly when the problem has coupled terms.
pub fn fast_dual_gradient(
    problem: &ProblemInstance,
    l_lambda: &Metric,
    l_mu: Option<&Metric>,
    nu0: Option<(DVector<f64>, DVector<f64>)>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let m_sizes = &problem.partition.m_sizes;
    let lambda_solver = match l_lambda {
        Metric::SparseFactored(_) => LambdaSolver::Global(l_lambda),
        _ => LambdaSolver::PerBlock(l_lambda.block_solvers(m_sizes)?),
    };
    let mu_diag = match (problem.has_coupled_terms(), l_mu) {
        (true, Some(l)) => {
            if l.dim() != problem.partition.total_p() {
                return Err(Error::DimensionMismatch {
                    context: "mu metric".into(),
                    expected: problem.partition.total_p(),
                    found: l.dim(),
                });
            }
            Some(l.as_diagonal().map_err(|_| {
                Error::Unsupported("mu metric must be diagonal or scalar".into())
            })?)
        }
        (true, None) => {
            return Err(Error::Invalid(
                "problem has coupled terms but no mu metric was given".into(),
            ))
        }
        (false, _) => None,
    };
    run_dual_engine(problem, lambda_solver, mu_diag, nu0, opts, false)
}

/// Parallel generalized fast dual gradient method.
///
/// Requires every coupled term absent (`B = 0`); block primal updates are
/// independent and the dual update is one solve against the stored factor.
/// Hands back the analytic hub communication counts: two global rounds per
/// iteration (scatter duals, gather primals).
pub fn parallel_fast_dual_gradient(
    problem: &ProblemInstance,
    l: &Metric,
    lambda0: Option<DVector<f64>>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    if problem.has_coupled_terms() {
        return Err(Error::Unsupported(
            "parallel dual method requires all coupled terms absent".into(),
        ));
    }
    let nu0 = lambda0.map(|l0| (l0, DVector::zeros(0)));
    run_dual_engine(problem, LambdaSolver::Global(l), None, nu0, opts, true)
}

fn run_dual_engine(
    problem: &ProblemInstance,
    lambda_solver: LambdaSolver,
    mu_diag: Option<DVector<f64>>,
    nu0: Option<(DVector<f64>, DVector<f64>)>,
    opts: &SolveOptions,
    count_global_rounds: bool,
) -> Result<SolveReport> {
    opts.validate()?;
    let start = Instant::now();
    let count = problem.subsystem_count();
    let primal = problem.partition.primal_layout();
    let lambda_layout = problem.partition.lambda_layout();
    let mu_layout = problem.partition.mu_layout();
    let m_total = lambda_layout.total();
    let p_total = mu_layout.total();

    let (lambda0, mu0) = nu0.unwrap_or_else(|| (DVector::zeros(m_total), DVector::zeros(p_total)));
    if lambda0.len() != m_total || mu0.len() != p_total {
        return Err(Error::DimensionMismatch {
            context: "initial dual".into(),
            expected: m_total + p_total,
            found: lambda0.len() + mu0.len(),
        });
    }

    let mut lambda_prev = lambda0.clone();
    let mut mu_prev = mu0.clone();
    let mut z = lambda0.clone();
    let mut v = mu0.clone();
    let mut t = 1.0f64;

    let mut report = SolveReport::new(DVector::zeros(primal.total()), lambda0, mu0);
    let mut y = DVector::zeros(primal.total());
    let mut r = DVector::zeros(m_total);

    for k in 1..=opts.max_iter {
        // Primal updates, independent per block.
        for i in 0..count {
            let mut offset = problem.a.col_block_tr_mul(i, &z, &lambda_layout);
            if let Some(b) = &problem.b_mat {
                offset += b.col_block_tr_mul(i, &v, &mu_layout);
            }
            let ip = InnerProblem::from_cost(&problem.costs[i]);
            let yi = inner_minimize(&ip, &offset)?;
            y.rows_mut(primal.offset(i), primal.size(i)).copy_from(&yi);
        }

        // Equality residual, accumulated per block in sorted order.
        let mut primal_residual = 0.0f64;
        for i in 0..count {
            let ri = problem.a.row_block_mul(i, &y, &primal) - problem.b_block(i);
            primal_residual = primal_residual.max(ri.amax());
            r.rows_mut(lambda_layout.offset(i), lambda_layout.size(i)).copy_from(&ri);
        }

        // Lambda update.
        let lambda = match &lambda_solver {
            LambdaSolver::PerBlock(solvers) => {
                let mut lam = DVector::zeros(m_total);
                for i in 0..count {
                    let ri: DVector<f64> = lambda_layout.view(&r, i).into();
                    let zi: DVector<f64> = lambda_layout.view(&z, i).into();
                    let li = &zi + solvers[i].solve(&ri);
                    lam.rows_mut(lambda_layout.offset(i), lambda_layout.size(i)).copy_from(&li);
                }
                lam
            }
            LambdaSolver::Global(metric) => &z + metric.solve(&r),
        };

        // Mu update through the generalized Moreau decomposition.
        let mut coupling_residual = 0.0f64;
        let mut coupled_point = DVector::zeros(p_total);
        let mu = if let (Some(b), Some(dmu)) = (&problem.b_mat, &mu_diag) {
            let mut mu_next = DVector::zeros(p_total);
            for i in 0..count {
                let pi = mu_layout.size(i);
                if pi == 0 {
                    continue;
                }
                let by = b.row_block_mul(i, &y, &primal);
                let di: DVector<f64> = mu_layout.view(dmu, i).into();
                let vi: DVector<f64> = mu_layout.view(&v, i).into();
                let wi = &vi + by.component_div(&di);
                let g = coupled_function(problem, i)?;
                let li = Metric::Diagonal { d: di };
                let (mui, si) = prox_conjugate_with_primal(&g, &li, &wi)?;
                coupling_residual = coupling_residual.max((&by - &si).amax());
                mu_next.rows_mut(mu_layout.offset(i), pi).copy_from(&mui);
                coupled_point.rows_mut(mu_layout.offset(i), pi).copy_from(&si);
            }
            mu_next
        } else {
            DVector::zeros(p_total)
        };

        report.iterations = k;
        if count_global_rounds {
            report.counters.global_rounds += 2;
            report.counters.messages += 2 * count as u64;
            let scatter: usize = (0..count)
                .map(|i| {
                    problem.neighbors.m[i]
                        .iter()
                        .map(|&j| problem.partition.m_sizes[j])
                        .sum::<usize>()
                })
                .sum();
            report.counters.payload_scalars += (scatter + primal.total()) as u64;
        }

        if opts.record_trajectory {
            report.residuals.push(primal_residual.max(coupling_residual));
            report.dual_objectives.push(dual_objective(problem, &lambda, &mu)?);
        }

        let state = DualIterate {
            lambda: lambda.clone(),
            mu: mu.clone(),
            z: z.clone(),
            v: v.clone(),
            t,
            y: y.clone(),
            k,
            coupled_point,
            primal_residual,
            coupling_residual,
        };
        if opts.record_iterates {
            report.iterates.push(state.clone());
        }

        let verdict = stopping_check(&state, problem, opts);
        report.x = y.clone();
        report.lambda = lambda.clone();
        report.mu = mu.clone();
        if verdict == StopVerdict::Converged {
            report.converged = true;
            break;
        }
        if verdict == StopVerdict::MaxIter {
            break;
        }

        // Momentum.
        let t_next = if opts.use_momentum { next_t(t) } else { 1.0 };
        let coeff = (t - 1.0) / t_next;
        z = extrapolate(&lambda, &lambda_prev, coeff);
        v = extrapolate(&mu, &mu_prev, coeff);
        lambda_prev = lambda;
        mu_prev = mu;
        t = t_next;
    }
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Coupled term of subsystem `i` as a separable function.
pub(crate) fn coupled_function(problem: &ProblemInstance, i: usize) -> Result<SeparableFunction> {
    match &problem.costs[i].coupled {
        Some(crate::block_model::CoupledCost::Box(b)) => {
            Ok(SeparableFunction::BoxIndicator(b.clone()))
        }
        Some(crate::block_model::CoupledCost::OneNorm(w)) => Ok(SeparableFunction::OneNorm {
            weight: w.clone(),
        }),
        None => Err(Error::Invalid(format!(
            "subsystem {i} has coupled rows but no coupled term"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_model::{BlockPartition, CostMatrix, LocalCost, SparseBlockMatrix};
    use crate::metrics::{exact_metric, scalar_metric, ScalarNorm};
    use nalgebra::DMatrix;

    #[test]
    fn momentum_sequence_values() {
        let t1 = 1.0;
        let t2 = next_t(t1);
        assert!((t2 - (1.0 + 5.0f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!((t2 - 1.618034).abs() < 1e-6);
    }

    #[test]
    fn quadratic_with_exact_metric_converges_immediately() {
        // ell(x) = x^2/2, psi = 0, L = 1: first step lands on the minimizer.
        let psi = SeparableFunction::Zero { dim: 1 };
        let l = Metric::scalar(1.0, 1).unwrap();
        let opts = SolveOptions {
            tol_dual_progress: 1e-12,
            ..Default::default()
        };
        let report = fast_gradient(
            |x| x.clone(),
            &psi,
            &l,
            &DVector::from_element(1, 1.0),
            &opts,
        )
        .unwrap();
        assert!(report.converged);
        assert!(report.x[0].abs() < 1e-15);
        assert!(report.iterations <= 2);
    }

    #[test]
    fn badly_scaled_quadratic_needs_many_scalar_steps() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 100.0]));
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let psi = SeparableFunction::Zero { dim: 2 };
        let opts = SolveOptions {
            tol_dual_progress: 1e-11,
            max_iter: 100_000,
            ..Default::default()
        };

        let exact = Metric::diagonal(DVector::from_vec(vec![1.0, 100.0])).unwrap();
        let rep_exact =
            fast_gradient(|x| &h * x, &psi, &exact, &x0, &opts).unwrap();
        assert!(rep_exact.x.amax() < 1e-10);
        assert!(rep_exact.iterations <= 2, "exact metric solves in one step");

        let scalar = Metric::scalar(100.0, 2).unwrap();
        let rep_scalar = fast_gradient(|x| &h * x, &psi, &scalar, &x0, &opts).unwrap();
        assert!(rep_scalar.iterations > 50);
        assert!(rep_scalar.x.amax() < 1e-9);
    }

    fn two_block_equality_problem() -> ProblemInstance {
        // Two scalar blocks coupled by x_1 + x_2 = 1 plus a local row.
        let partition = BlockPartition::new(vec![1, 1], vec![1, 1], vec![0, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        a.insert_block(0, 1, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 1, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let costs = vec![
            LocalCost {
                hessian: CostMatrix::Diagonal(DVector::from_element(1, 2.0)),
                linear: DVector::from_element(1, 0.5),
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
        let b = DVector::from_vec(vec![1.0, 0.25]);
        ProblemInstance::new(partition, costs, a, None, b).unwrap()
    }

    #[test]
    fn dual_method_with_exact_metric_solves_quickly() {
        let p = two_block_equality_problem();
        let l = exact_metric(&p).unwrap();
        let opts = SolveOptions {
            tol_primal_infeas: 1e-10,
            max_iter: 50,
            ..Default::default()
        };
        let report = fast_dual_gradient(&p, &l, None, None, &opts).unwrap();
        assert!(report.converged, "converged in {} iters", report.iterations);
        assert!(report.iterations <= 10);
        // KKT solve of min x'Hx/2 + zeta'x s.t. Ax = b.
        let a = p.a.assemble_dense();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let zeta = DVector::from_vec(vec![0.5, 0.0]);
        let n = 2;
        let m = 2;
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&a);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&zeta));
        rhs.rows_mut(n, m).copy_from(&p.b_vec);
        let sol = kkt.lu().solve(&rhs).unwrap();
        let x_ref = sol.rows(0, n).into_owned();
        assert!((report.x - x_ref).amax() < 1e-8);
    }

    #[test]
    fn parallel_matches_centralized_with_same_metric() {
        let p = two_block_equality_problem();
        let l = exact_metric(&p).unwrap();
        let opts = SolveOptions {
            tol_primal_infeas: 1e-12,
            max_iter: 40,
            record_iterates: true,
            ..Default::default()
        };
        let central = fast_dual_gradient(&p, &l, None, None, &opts).unwrap();
        let parallel = parallel_fast_dual_gradient(&p, &l, None, &opts).unwrap();
        assert_eq!(central.iterations, parallel.iterations);
        for (a, b) in central.iterates.iter().zip(parallel.iterates.iter()) {
            assert!((&a.lambda - &b.lambda).amax() <= 1e-12);
            assert!((&a.y - &b.y).amax() <= 1e-12);
        }
        assert_eq!(parallel.counters.global_rounds, 2 * parallel.iterations as u64);
    }

    #[test]
    fn parallel_rejects_coupled_terms() {
        use crate::block_model::{Bounds, CoupledCost};
        let partition = BlockPartition::new(vec![1], vec![1], vec![1]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1], vec![1]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let mut b = SparseBlockMatrix::new(vec![1], vec![1]);
        b.insert_block(0, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let cost = LocalCost {
            hessian: CostMatrix::Diagonal(DVector::from_element(1, 1.0)),
            linear: DVector::zeros(1),
            bounds: None,
            coupled: Some(CoupledCost::Box(
                Bounds::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)).unwrap(),
            )),
        };
        let p = ProblemInstance::new(partition, vec![cost], a, Some(b), DVector::zeros(1)).unwrap();
        let l = scalar_metric(&p, ScalarNorm::TwoNorm).unwrap();
        assert!(matches!(
            parallel_fast_dual_gradient(&p, &l, None, &SolveOptions::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn stopping_checks_hit_max_iter() {
        let p = two_block_equality_problem();
        let l = scalar_metric(&p, ScalarNorm::OneNorm).unwrap();
        let opts = SolveOptions {
            tol_primal_infeas: 1e-14,
            max_iter: 3,
            ..Default::default()
        };
        let report = fast_dual_gradient(&p, &l, None, None, &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 3);
    }
}
