//! Metric selection: symmetric positive definite matrices `L` shaping the
//! quadratic lower bound on the dual function.
//!
//! The tightest admissible metric is the Gram matrix `C H^{-1} C^T`. The
//! exact choice is assembled sparsely and factored once; distributed
//! selections restrict each node to a block-diagonal neighborhood metric
//! dominating its local Gram matrix, chosen either by a closed-form scaling
//! or by trace minimization (a small semidefinite program per node).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::block_model::{BlockPartition, Layout, ProblemInstance};
use crate::error::{Error, Result};
use crate::sdp::solve_block_diag_sdp;
use crate::sparse::{CscMatrix, LdlFactor};

/// A small symmetric positive definite operator with a cached solve.
#[derive(Debug, Clone)]
pub enum SmallSpd {
    Scalar { alpha: f64, dim: usize },
    Diagonal(DVector<f64>),
    Dense { m: DMatrix<f64>, chol: Cholesky<f64, Dyn> },
}

impl SmallSpd {
    pub fn dense(m: DMatrix<f64>) -> Result<Self> {
        let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite {
            context: "metric block".into(),
        })?;
        Ok(SmallSpd::Dense { m, chol })
    }

    pub fn dim(&self) -> usize {
        match self {
            SmallSpd::Scalar { dim, .. } => *dim,
            SmallSpd::Diagonal(d) => d.len(),
            SmallSpd::Dense { m, .. } => m.nrows(),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SmallSpd::Scalar { alpha, .. } => v * *alpha,
            SmallSpd::Diagonal(d) => v.component_mul(d),
            SmallSpd::Dense { m, .. } => m * v,
        }
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SmallSpd::Scalar { alpha, .. } => v / *alpha,
            SmallSpd::Diagonal(d) => v.component_div(d),
            SmallSpd::Dense { chol, .. } => chol.solve(v),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SmallSpd::Scalar { alpha, dim } => DMatrix::identity(*dim, *dim) * *alpha,
            SmallSpd::Diagonal(d) => DMatrix::from_diagonal(d),
            SmallSpd::Dense { m, .. } => m.clone(),
        }
    }
}

/// Block-diagonal metric with one block per dual block.
#[derive(Debug, Clone)]
pub struct BlockDiagonalMetric {
    blocks: Vec<DMatrix<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    layout: Layout,
}

impl BlockDiagonalMetric {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let sizes: Vec<usize> = blocks.iter().map(|b| b.nrows()).collect();
        let mut chols = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            if b.nrows() != b.ncols() {
                return Err(Error::Invalid(format!("metric block {i} not square")));
            }
            let chol = b.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                context: format!("metric block {i}"),
            })?;
            chols.push(chol);
        }
        Ok(Self {
            blocks,
            chols,
            layout: Layout::new(&sizes),
        })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn solve_block(&self, i: usize, v: &DVector<f64>) -> DVector<f64> {
        self.chols[i].solve(v)
    }
}

/// Sparse-factored metric: the assembled matrix plus its LDL^T factor.
#[derive(Debug, Clone)]
pub struct SparseFactoredMetric {
    matrix: CscMatrix,
    factor: LdlFactor,
}

impl SparseFactoredMetric {
    pub fn new(matrix: CscMatrix) -> Result<Self> {
        let factor = LdlFactor::factor(&matrix, None)?;
        Ok(Self { matrix, factor })
    }

    pub fn from_parts(matrix: CscMatrix, factor: LdlFactor) -> Self {
        Self { matrix, factor }
    }

    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn factor(&self) -> &LdlFactor {
        &self.factor
    }
}

/// A symmetric positive definite metric.
#[derive(Debug, Clone)]
pub enum Metric {
    Scalar { alpha: f64, dim: usize },
    Diagonal { d: DVector<f64> },
    BlockDiagonal(BlockDiagonalMetric),
    SparseFactored(SparseFactoredMetric),
}

impl Metric {
    pub fn scalar(alpha: f64, dim: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context: "scalar metric".into(),
            });
        }
        Ok(Metric::Scalar { alpha, dim })
    }

    pub fn diagonal(d: DVector<f64>) -> Result<Self> {
        if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                context: "diagonal metric".into(),
            });
        }
        Ok(Metric::Diagonal { d })
    }

    pub fn block_diagonal(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        Ok(Metric::BlockDiagonal(BlockDiagonalMetric::new(blocks)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Metric::Scalar { dim, .. } => *dim,
            Metric::Diagonal { d } => d.len(),
            Metric::BlockDiagonal(b) => b.layout.total(),
            Metric::SparseFactored(s) => s.factor.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Metric::Scalar { .. } => "scalar",
            Metric::Diagonal { .. } => "diagonal",
            Metric::BlockDiagonal(_) => "block_diagonal",
            Metric::SparseFactored(_) => "sparse_factored",
        }
    }

    /// `L v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Scalar { alpha, .. } => v * *alpha,
            Metric::Diagonal { d } => v.component_mul(d),
            Metric::BlockDiagonal(b) => {
                let mut out = DVector::zeros(b.layout.total());
                for i in 0..b.blocks.len() {
                    let vi = b.layout.view(v, i);
                    out.rows_mut(b.layout.offset(i), b.layout.size(i))
                        .gemv(1.0, &b.blocks[i], &vi, 0.0);
                }
                out
            }
            Metric::SparseFactored(s) => s.matrix.mul_vec(v),
        }
    }

    /// `L^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Scalar { alpha, .. } => v / *alpha,
            Metric::Diagonal { d } => v.component_div(d),
            Metric::BlockDiagonal(b) => {
                let mut out = DVector::zeros(b.layout.total());
                for i in 0..b.blocks.len() {
                    let vi: DVector<f64> = b.layout.view(v, i).into();
                    let xi = b.chols[i].solve(&vi);
                    out.rows_mut(b.layout.offset(i), b.layout.size(i)).copy_from(&xi);
                }
                out
            }
            Metric::SparseFactored(s) => s.factor.solve(v),
        }
    }

    /// Quadratic form `v' L v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.apply(v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Metric::Scalar { alpha, dim } => DMatrix::identity(*dim, *dim) * *alpha,
            Metric::Diagonal { d } => DMatrix::from_diagonal(d),
            Metric::BlockDiagonal(b) => {
                let mut out = DMatrix::zeros(b.layout.total(), b.layout.total());
                for i in 0..b.blocks.len() {
                    let off = b.layout.offset(i);
                    let s = b.layout.size(i);
                    out.view_mut((off, off), (s, s)).copy_from(&b.blocks[i]);
                }
                out
            }
            Metric::SparseFactored(s) => s.matrix.to_dense(),
        }
    }

    /// Diagonal entries, when the metric is (block) diagonal in the scalar
    /// sense. Needed by proximal evaluations of separable functions.
    pub fn as_diagonal(&self) -> Result<DVector<f64>> {
        match self {
            Metric::Scalar { alpha, dim } => Ok(DVector::from_element(*dim, *alpha)),
            Metric::Diagonal { d } => Ok(d.clone()),
            Metric::BlockDiagonal(b) => {
                for (i, blk) in b.blocks.iter().enumerate() {
                    for r in 0..blk.nrows() {
                        for c in 0..blk.ncols() {
                            if r != c && blk[(r, c)] != 0.0 {
                                return Err(Error::Unsupported(format!(
                                    "metric block {i} is not diagonal"
                                )));
                            }
                        }
                    }
                }
                Ok(DVector::from_iterator(
                    self.dim(),
                    b.blocks.iter().flat_map(|blk| blk.diagonal().iter().copied().collect::<Vec<_>>()),
                ))
            }
            Metric::SparseFactored(_) => Err(Error::Unsupported(
                "sparse-factored metric has no separable diagonal".into(),
            )),
        }
    }

    /// Per-block solvers over the given block sizes.
    pub fn block_solvers(&self, sizes: &[usize]) -> Result<Vec<SmallSpd>> {
        match self {
            Metric::Scalar { alpha, dim } => {
                let total: usize = sizes.iter().sum();
                if total != *dim {
                    return Err(Error::DimensionMismatch {
                        context: "metric block split".into(),
                        expected: *dim,
                        found: total,
                    });
                }
                Ok(sizes
                    .iter()
                    .map(|&s| SmallSpd::Scalar { alpha: *alpha, dim: s })
                    .collect())
            }
            Metric::Diagonal { d } => {
                let total: usize = sizes.iter().sum();
                if total != d.len() {
                    return Err(Error::DimensionMismatch {
                        context: "metric block split".into(),
                        expected: d.len(),
                        found: total,
                    });
                }
                let layout = Layout::new(sizes);
                Ok((0..sizes.len())
                    .map(|i| SmallSpd::Diagonal(layout.view(d, i).into()))
                    .collect())
            }
            Metric::BlockDiagonal(b) => {
                let have: Vec<usize> = b.blocks.iter().map(|m| m.nrows()).collect();
                if have != sizes {
                    return Err(Error::PartitionMismatch(
                        "metric blocks do not match the requested split".into(),
                    ));
                }
                Ok(b.blocks
                    .iter()
                    .zip(&b.chols)
                    .map(|(m, c)| SmallSpd::Dense {
                        m: m.clone(),
                        chol: c.clone(),
                    })
                    .collect())
            }
            Metric::SparseFactored(_) => Err(Error::Unsupported(
                "sparse-factored metric cannot be split into blocks".into(),
            )),
        }
    }

    /// Split a metric over the interleaved dual space into separate metrics
    /// for the equality part (lambda) and the coupled part (mu). The mu part
    /// must be diagonal so that conjugate proximal steps stay separable.
    pub fn split_lambda_mu(&self, partition: &BlockPartition) -> Result<(Metric, Metric)> {
        let m = partition.total_m();
        let p = partition.total_p();
        if self.dim() != m + p {
            return Err(Error::DimensionMismatch {
                context: "dual metric split".into(),
                expected: m + p,
                found: self.dim(),
            });
        }
        match self {
            Metric::Scalar { alpha, .. } => Ok((
                Metric::Scalar { alpha: *alpha, dim: m },
                Metric::Scalar { alpha: *alpha, dim: p },
            )),
            Metric::Diagonal { d } => {
                let dual = partition.dual_layout();
                let mut dl = DVector::zeros(m);
                let mut dm = DVector::zeros(p);
                let ll = partition.lambda_layout();
                let ml = partition.mu_layout();
                for i in 0..partition.subsystem_count {
                    let off = dual.offset(i);
                    let mi = partition.m_sizes[i];
                    let pi = partition.p_sizes[i];
                    dl.rows_mut(ll.offset(i), mi).copy_from(&d.rows(off, mi));
                    dm.rows_mut(ml.offset(i), pi).copy_from(&d.rows(off + mi, pi));
                }
                Ok((Metric::Diagonal { d: dl }, Metric::Diagonal { d: dm }))
            }
            Metric::BlockDiagonal(b) => {
                let mut lambda_blocks = Vec::with_capacity(partition.subsystem_count);
                let mut mu_diag = DVector::zeros(p);
                let ml = partition.mu_layout();
                for i in 0..partition.subsystem_count {
                    let blk = &b.blocks[i];
                    let mi = partition.m_sizes[i];
                    let pi = partition.p_sizes[i];
                    if blk.nrows() != mi + pi {
                        return Err(Error::PartitionMismatch(format!(
                            "metric block {i} size {} does not match dual block {}",
                            blk.nrows(),
                            mi + pi
                        )));
                    }
                    for r in 0..mi {
                        for c in mi..mi + pi {
                            if blk[(r, c)] != 0.0 {
                                return Err(Error::Unsupported(format!(
                                    "metric block {i} couples lambda and mu"
                                )));
                            }
                        }
                    }
                    for r in mi..mi + pi {
                        for c in mi..mi + pi {
                            if r != c && blk[(r, c)] != 0.0 {
                                return Err(Error::Unsupported(format!(
                                    "mu part of metric block {i} is not diagonal"
                                )));
                            }
                        }
                    }
                    lambda_blocks.push(blk.view((0, 0), (mi, mi)).into_owned());
                    for k in 0..pi {
                        mu_diag[ml.offset(i) + k] = blk[(mi + k, mi + k)];
                    }
                }
                Ok((
                    Metric::block_diagonal(lambda_blocks)?,
                    Metric::Diagonal { d: mu_diag },
                ))
            }
            Metric::SparseFactored(_) => Err(Error::Unsupported(
                "sparse-factored metrics do not split across lambda/mu".into(),
            )),
        }
    }
}

/// Local Gram matrix `G_i = C_{M_i} H_i^{-1} C_{M_i}^T` of a subsystem.
#[derive(Debug, Clone)]
pub struct LocalGram {
    pub node: usize,
    /// Members of `M_i`, sorted.
    pub members: Vec<usize>,
    /// Dual block size `m_j + p_j` per member.
    pub member_sizes: Vec<usize>,
    pub g: DMatrix<f64>,
}

/// Exact dense local Gram matrix of subsystem `i`.
pub fn local_gram(problem: &ProblemInstance, i: usize) -> Result<LocalGram> {
    let cols = problem.c_column_blocks(i);
    let members: Vec<usize> = cols.iter().map(|(j, _)| *j).collect();
    let member_sizes: Vec<usize> = members
        .iter()
        .map(|&j| problem.partition.dual_size(j))
        .collect();
    let total: usize = member_sizes.iter().sum();
    let n_i = problem.partition.n_sizes[i];
    let mut c_mi = DMatrix::zeros(total, n_i);
    let mut off = 0;
    for (_, blk) in &cols {
        c_mi.view_mut((off, 0), (blk.nrows(), n_i)).copy_from(blk);
        off += blk.nrows();
    }
    let solved = problem.costs[i].hessian.solve_matrix(&c_mi.transpose())?;
    let g = &c_mi * solved;
    Ok(LocalGram {
        node: i,
        members,
        member_sizes,
        g,
    })
}

/// Default regularization for metric selection: `1e-8 * tr(G)/dim`, floored
/// away from zero so singular Gram matrices still yield definite metrics.
pub fn default_eps(g: &DMatrix<f64>) -> f64 {
    let dim = g.nrows().max(1) as f64;
    (1e-8 * g.trace() / dim).max(1e-12)
}

/// Closed-form feasible block-diagonal dominator of `g`:
/// `L_b = q * G_bb + eps * I` with `q` the number of blocks.
/// Feasibility `blkdiag(L) - g - eps*I >= 0` follows from Cauchy-Schwarz.
pub fn closed_form_blocks(g: &DMatrix<f64>, block_sizes: &[usize], eps: f64) -> Vec<DMatrix<f64>> {
    let q = block_sizes.len() as f64;
    let mut out = Vec::with_capacity(block_sizes.len());
    let mut off = 0;
    for &d in block_sizes {
        let mut blk = g.view((off, off), (d, d)).into_owned() * q;
        for k in 0..d {
            blk[(k, k)] += eps;
        }
        out.push(blk);
        off += d;
    }
    out
}

/// Closed-form feasible point at per-member granularity.
/// Returns the per-member blocks and the regularization actually used.
pub fn block_feasible_closed_form(gram: &LocalGram, eps: Option<f64>) -> (Vec<DMatrix<f64>>, f64) {
    let eps = eps.unwrap_or_else(|| default_eps(&gram.g));
    (closed_form_blocks(&gram.g, &gram.member_sizes, eps), eps)
}

/// Result of the trace-minimizing block-diagonal metric selection.
#[derive(Debug, Clone)]
pub struct SdpMetricResult {
    pub blocks: Vec<DMatrix<f64>>,
    pub block_sizes: Vec<usize>,
    pub trace: f64,
    /// Set when the barrier solve failed or was beaten by the closed form
    /// and the closed-form point was returned instead.
    pub fell_back: bool,
    pub eps: f64,
}

/// Minimize `tr(L)` over block-diagonal `L >= G + eps*I` with the given
/// block partition. Solved by a log-det barrier path-following method; on
/// barrier failure the closed-form feasible point is returned with a
/// warning flag. The result never has a larger trace than the closed form.
pub fn local_metric_sdp(
    gram: &LocalGram,
    block_sizes: &[usize],
    eps: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<SdpMetricResult> {
    let total: usize = block_sizes.iter().sum();
    if total != gram.g.nrows() {
        return Err(Error::DimensionMismatch {
            context: "local metric block sizes".into(),
            expected: gram.g.nrows(),
            found: total,
        });
    }
    let eps = eps.unwrap_or_else(|| default_eps(&gram.g));
    let mut shifted = gram.g.clone();
    for k in 0..shifted.nrows() {
        shifted[(k, k)] += eps;
    }
    let closed = closed_form_blocks(&gram.g, block_sizes, eps);
    let closed_trace: f64 = closed.iter().map(|b| b.trace()).sum();

    let scale = gram.g.trace().abs().max(1.0);
    let solved = solve_block_diag_sdp(&shifted, block_sizes, max_iter, tol);
    match solved {
        Ok(sol) => {
            // Verify dominance of the shifted Gram matrix.
            let mut l = DMatrix::zeros(total, total);
            let mut off = 0;
            for (b, &d) in block_sizes.iter().enumerate() {
                l.view_mut((off, off), (d, d)).copy_from(&sol.blocks[b]);
                off += d;
            }
            let min_eig = (&l - &shifted).symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-9 * scale || sol.trace > closed_trace {
                Ok(SdpMetricResult {
                    blocks: closed,
                    block_sizes: block_sizes.to_vec(),
                    trace: closed_trace,
                    fell_back: true,
                    eps,
                })
            } else {
                Ok(SdpMetricResult {
                    blocks: sol.blocks,
                    block_sizes: block_sizes.to_vec(),
                    trace: sol.trace,
                    fell_back: false,
                    eps,
                })
            }
        }
        Err(_) => Ok(SdpMetricResult {
            blocks: closed,
            block_sizes: block_sizes.to_vec(),
            trace: closed_trace,
            fell_back: true,
            eps,
        }),
    }
}

/// How a node picks its neighborhood metric in the distributed init.
#[derive(Debug, Clone)]
pub enum ChooserMethod {
    ClosedForm,
    /// Trace minimization over the full block-diagonal class: exact but
    /// cubic in the number of symmetric block parameters.
    Sdp { max_newton: usize, gap_tol: f64 },
    /// Trace minimization restricted to member blocks of the form
    /// `T_j^{-T} diag(theta) T_j^{-1}`, with `T_j` whitening the member's
    /// diagonal Gram block. Keeps full dense member blocks while the
    /// barrier runs over one scalar per dual row; scales to MPC-sized
    /// neighborhoods.
    WhitenedSdp { max_newton: usize, gap_tol: f64 },
}

/// Per-node metric selection rule.
///
/// `lambda_chunks`, when set, splits the equality part of member `j`'s dual
/// block into sub-blocks of at most `lambda_chunks[j]` rows (any refinement
/// of the block structure stays feasible); the coupled part is always split
/// into scalar sub-blocks so that conjugate proximal steps stay separable.
#[derive(Debug, Clone)]
pub struct MetricChooser {
    pub method: ChooserMethod,
    pub eps: Option<f64>,
    pub lambda_chunks: Option<Vec<usize>>,
}

impl MetricChooser {
    pub fn closed_form() -> Self {
        Self {
            method: ChooserMethod::ClosedForm,
            eps: None,
            lambda_chunks: None,
        }
    }

    pub fn sdp() -> Self {
        Self {
            method: ChooserMethod::Sdp {
                max_newton: 2000,
                gap_tol: 1e-8,
            },
            eps: None,
            lambda_chunks: None,
        }
    }

    pub fn whitened_sdp() -> Self {
        Self {
            method: ChooserMethod::WhitenedSdp {
                max_newton: 2000,
                gap_tol: 1e-7,
            },
            eps: None,
            lambda_chunks: None,
        }
    }

    pub fn with_lambda_chunks(mut self, chunks: Vec<usize>) -> Self {
        self.lambda_chunks = Some(chunks);
        self
    }

    /// Sub-block sizes inside member `j`'s dual block.
    fn member_partition(&self, j: usize, m_j: usize, p_j: usize) -> Vec<usize> {
        let mut sizes = Vec::new();
        let chunk = self
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

    /// Choose the per-member neighborhood metric blocks for node `i`.
    pub fn choose(&self, gram: &LocalGram, partition: &BlockPartition) -> Result<LocalChoice> {
        let eps = self.eps.unwrap_or_else(|| default_eps(&gram.g));
        if let ChooserMethod::WhitenedSdp { max_newton, gap_tol } = &self.method {
            return choose_whitened(gram, partition, eps, *max_newton, *gap_tol);
        }
        let mut flat_sizes = Vec::new();
        let mut member_splits = Vec::new();
        for &j in &gram.members {
            let split = self.member_partition(j, partition.m_sizes[j], partition.p_sizes[j]);
            flat_sizes.extend_from_slice(&split);
            member_splits.push(split);
        }
        let (fine_blocks, fell_back) = match &self.method {
            ChooserMethod::ClosedForm => (closed_form_blocks(&gram.g, &flat_sizes, eps), false),
            ChooserMethod::Sdp { max_newton, gap_tol } => {
                let r = local_metric_sdp(gram, &flat_sizes, Some(eps), *max_newton, *gap_tol)?;
                (r.blocks, r.fell_back)
            }
            ChooserMethod::WhitenedSdp { .. } => unreachable!(),
        };
        // Regroup fine blocks into per-member matrices.
        let mut blocks = Vec::with_capacity(gram.members.len());
        let mut fine_idx = 0;
        for (mi, &j) in gram.members.iter().enumerate() {
            let dim = partition.dual_size(j);
            let mut blk = DMatrix::zeros(dim, dim);
            let mut off = 0;
            for _ in 0..member_splits[mi].len() {
                let d = fine_blocks[fine_idx].nrows();
                blk.view_mut((off, off), (d, d)).copy_from(&fine_blocks[fine_idx]);
                off += d;
                fine_idx += 1;
            }
            blocks.push(blk);
        }
        Ok(LocalChoice {
            node: gram.node,
            members: gram.members.clone(),
            blocks,
            eps,
            fell_back,
        })
    }
}

/// Whitened trace minimization: per member `j`, eigen-decompose the
/// (shifted) diagonal Gram block, whiten, and optimize one scalar per dual
/// row under `diag(theta) >= whitened(G + eps I)`. Falls back to the
/// closed form when the barrier fails or does not improve on it.
fn choose_whitened(
    gram: &LocalGram,
    partition: &BlockPartition,
    eps: f64,
    max_newton: usize,
    gap_tol: f64,
) -> Result<LocalChoice> {
    let dim = gram.g.nrows();
    let mut shifted = gram.g.clone();
    for k in 0..dim {
        shifted[(k, k)] += eps;
    }
    let member_layout = Layout::new(&gram.member_sizes);

    // Per-member whitening transforms: an eigen factor for the equality
    // part, scalar factors for the coupled part.
    struct MemberBasis {
        q: DMatrix<f64>,
        lam: DVector<f64>,
        mu_diag: DVector<f64>,
    }
    let mut bases = Vec::with_capacity(gram.members.len());
    let mut t_mat = DMatrix::zeros(dim, dim);
    let mut weights = DVector::zeros(dim);
    for (mi, &j) in gram.members.iter().enumerate() {
        let off = member_layout.offset(mi);
        let m_j = partition.m_sizes[j];
        let p_j = partition.p_sizes[j];
        let lam_block = shifted.view((off, off), (m_j, m_j)).into_owned();
        let eig = lam_block.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                context: format!("whitening block of member {j}"),
            });
        }
        for (k, &lam_k) in eig.eigenvalues.iter().enumerate() {
            weights[off + k] = lam_k;
            let s = lam_k.sqrt().recip();
            for r in 0..m_j {
                t_mat[(off + k, off + r)] = s * eig.eigenvectors[(r, k)];
            }
        }
        let mut mu_diag = DVector::zeros(p_j);
        for k in 0..p_j {
            let d = shifted[(off + m_j + k, off + m_j + k)];
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    context: format!("coupled whitening entry of member {j}"),
                });
            }
            mu_diag[k] = d;
            weights[off + m_j + k] = d;
            t_mat[(off + m_j + k, off + m_j + k)] = d.sqrt().recip();
        }
        bases.push(MemberBasis {
            q: eig.eigenvectors,
            lam: eig.eigenvalues,
            mu_diag,
        });
    }

    let mut whitened = &t_mat * &shifted * t_mat.transpose();
    for r in 0..dim {
        for c in (r + 1)..dim {
            let v = 0.5 * (whitened[(r, c)] + whitened[(c, r)]);
            whitened[(r, c)] = v;
            whitened[(c, r)] = v;
        }
    }

    let (closed, _) = block_feasible_closed_form(gram, Some(eps));
    let closed_trace: f64 = closed.iter().map(|b| b.trace()).sum();

    let solved = crate::sdp::solve_weighted_diagonal_sdp(&whitened, &weights, max_newton, gap_tol);
    let (blocks, fell_back) = match solved {
        Ok(theta) => {
            let mut blocks = Vec::with_capacity(gram.members.len());
            for (mi, &j) in gram.members.iter().enumerate() {
                let off = member_layout.offset(mi);
                let m_j = partition.m_sizes[j];
                let p_j = partition.p_sizes[j];
                let basis = &bases[mi];
                let mut blk = DMatrix::zeros(m_j + p_j, m_j + p_j);
                if m_j > 0 {
                    // Q Lam^{1/2} diag(theta) Lam^{1/2} Q'.
                    let mut scaled = basis.q.clone();
                    for k in 0..m_j {
                        let s = basis.lam[k].sqrt() * theta[off + k].max(0.0).sqrt();
                        for r in 0..m_j {
                            scaled[(r, k)] *= s;
                        }
                    }
                    let lam_part = &scaled * scaled.transpose();
                    blk.view_mut((0, 0), (m_j, m_j)).copy_from(&lam_part);
                }
                for k in 0..p_j {
                    blk[(m_j + k, m_j + k)] = theta[off + m_j + k] * basis.mu_diag[k];
                }
                blocks.push(blk);
            }
            let trace: f64 = blocks.iter().map(|b| b.trace()).sum();
            // Post-verify dominance of the shifted Gram matrix.
            let sizes: Vec<usize> = gram.member_sizes.clone();
            let layout = Layout::new(&sizes);
            let mut l = DMatrix::zeros(dim, dim);
            for (k, b) in blocks.iter().enumerate() {
                l.view_mut((layout.offset(k), layout.offset(k)), (b.nrows(), b.ncols()))
                    .copy_from(b);
            }
            let min_eig = (&l - &gram.g).symmetric_eigen().eigenvalues.min();
            let scale = gram.g.trace().abs().max(1.0);
            if min_eig < -1e-9 * scale || trace > closed_trace {
                (closed, true)
            } else {
                (blocks, false)
            }
        }
        Err(_) => (closed, true),
    };
    Ok(LocalChoice {
        node: gram.node,
        members: gram.members.clone(),
        blocks,
        eps,
        fell_back,
    })
}

/// Chooser output at one node: block-diagonal neighborhood metric
/// `L_{M_i} = blkdiag(..., L_{M_i, j}, ...)` dominating `G_i + eps*I`.
#[derive(Debug, Clone)]
pub struct LocalChoice {
    pub node: usize,
    pub members: Vec<usize>,
    pub blocks: Vec<DMatrix<f64>>,
    pub eps: f64,
    pub fell_back: bool,
}

impl LocalChoice {
    /// The block this node contributes to member `j`, if any.
    pub fn block_for(&self, j: usize) -> Option<&DMatrix<f64>> {
        self.members
            .iter()
            .position(|&m| m == j)
            .map(|k| &self.blocks[k])
    }

    /// Assembled `blkdiag` of the choice.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let sizes: Vec<usize> = self.blocks.iter().map(|b| b.nrows()).collect();
        let layout = Layout::new(&sizes);
        let mut out = DMatrix::zeros(layout.total(), layout.total());
        for (k, b) in self.blocks.iter().enumerate() {
            out.view_mut((layout.offset(k), layout.offset(k)), (b.nrows(), b.ncols()))
                .copy_from(b);
        }
        out
    }
}

/// Result of the distributed metric initialization.
#[derive(Debug, Clone)]
pub struct DistributedInit {
    pub choices: Vec<LocalChoice>,
    /// Per-node metric `L_i = sum_{j in N_i} L_{M_j, i}`.
    pub node_blocks: Vec<DMatrix<f64>>,
    pub metric: Metric,
}

/// Distributed metric initialization without messaging: every node chooses
/// its neighborhood metric, then each node metric is the sum of the blocks
/// its row neighbors chose for it. The simulator variant reproduces this
/// result bit for bit with neighbor-only messages.
pub fn distributed_init(problem: &ProblemInstance, chooser: &MetricChooser) -> Result<DistributedInit> {
    let count = problem.subsystem_count();
    let mut choices = Vec::with_capacity(count);
    for i in 0..count {
        let gram = local_gram(problem, i)?;
        let choice = chooser.choose(&gram, &problem.partition)?;
        verify_choice(&gram, &choice)?;
        choices.push(choice);
    }
    let node_blocks = sum_node_blocks(problem, &choices)?;
    let metric = Metric::block_diagonal(node_blocks.clone())?;
    Ok(DistributedInit {
        choices,
        node_blocks,
        metric,
    })
}

/// Per-node feasibility check of a chooser output:
/// `blkdiag(choice) - G_i` must be positive semidefinite (tolerance scaled).
pub fn verify_choice(gram: &LocalGram, choice: &LocalChoice) -> Result<()> {
    let l = choice.to_dense();
    if l.nrows() != gram.g.nrows() {
        return Err(Error::InfeasibleMetric {
            node: gram.node,
            detail: format!(
                "choice dimension {} does not match local Gram dimension {}",
                l.nrows(),
                gram.g.nrows()
            ),
        });
    }
    if gram.g.nrows() == 0 {
        return Ok(());
    }
    let min_eig = (&l - &gram.g).symmetric_eigen().eigenvalues.min();
    let scale = gram.g.trace().abs().max(1.0);
    if min_eig < -1e-8 * scale {
        return Err(Error::InfeasibleMetric {
            node: gram.node,
            detail: format!("min eigenvalue of L - G is {min_eig:.3e}"),
        });
    }
    Ok(())
}

/// `L_i = sum_{j in N_i} L_{M_j, i}`, summed in sorted neighbor order.
pub fn sum_node_blocks(
    problem: &ProblemInstance,
    choices: &[LocalChoice],
) -> Result<Vec<DMatrix<f64>>> {
    let count = problem.subsystem_count();
    let mut node_blocks = Vec::with_capacity(count);
    for i in 0..count {
        let dim = problem.partition.dual_size(i);
        let mut sum = DMatrix::zeros(dim, dim);
        for &j in &problem.neighbors.n[i] {
            match choices[j].block_for(i) {
                Some(b) => sum += b,
                None => {
                    return Err(Error::InfeasibleMetric {
                        node: j,
                        detail: format!("choice at node {j} has no block for member {i}"),
                    })
                }
            }
        }
        node_blocks.push(sum);
    }
    Ok(node_blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarNorm {
    TwoNorm,
    OneNorm,
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration, to relative tolerance `rel_tol`.
pub fn spectral_norm_psd(g: &DMatrix<f64>, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let n = g.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic start with incommensurate components.
    let mut v = DVector::from_fn(n, |k, _| 1.0 + 1e-4 * ((k % 7) as f64) + 1e-6 * (k as f64));
    v /= v.norm();
    let mut lambda_prev = 0.0f64;
    for _ in 0..max_iter {
        let w = g * &v;
        let lambda = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        if (lambda - lambda_prev).abs() <= rel_tol * lambda.abs().max(1e-300) {
            return Ok(lambda.max(0.0));
        }
        lambda_prev = lambda;
    }
    Err(Error::NonConvergence {
        what: "power iteration".into(),
        max_iter,
    })
}

/// Scalar metric `alpha * I` over the full dual space, with `alpha` the
/// 2-norm (power iteration) or 1-norm (max column sum) of the assembled
/// Gram matrix. Desk-scale: assembles the dense Gram matrix.
pub fn scalar_metric(problem: &ProblemInstance, norm: ScalarNorm) -> Result<Metric> {
    let gram = problem.gram_dense()?;
    let alpha = match norm {
        ScalarNorm::TwoNorm => spectral_norm_psd(&gram, 1e-10, 500_000)?,
        ScalarNorm::OneNorm => (0..gram.ncols())
            .map(|j| gram.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max),
    };
    Metric::scalar(alpha, gram.nrows())
}

/// Feasibility report of a metric against the dual Gram matrix.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub min_eig: f64,
}

/// Smallest eigenvalue of `L - C H^{-1} C^T`; feasible iff `>= -tol`.
/// Dense and desk-scale only.
pub fn verify_feasible(metric: &Metric, problem: &ProblemInstance, tol: f64) -> Result<FeasibilityReport> {
    let gram = problem.gram_dense()?;
    if metric.dim() != gram.nrows() {
        return Err(Error::DimensionMismatch {
            context: "metric feasibility".into(),
            expected: gram.nrows(),
            found: metric.dim(),
        });
    }
    let diff = metric.to_dense() - gram;
    let min_eig = diff.symmetric_eigen().eigenvalues.min();
    Ok(FeasibilityReport {
        feasible: min_eig >= -tol,
        min_eig,
    })
}

/// Exact metric `L = A H^{-1} A^T`, assembled sparsely from the block
/// structure and LDL-factored once. Requires all coupled terms absent so
/// that `C = A`.
pub fn exact_metric(problem: &ProblemInstance) -> Result<Metric> {
    if problem.has_coupled_terms() {
        return Err(Error::Unsupported(
            "exact sparse metric requires all coupled terms absent".into(),
        ));
    }
    let m_total = problem.partition.total_m();
    let lambda = problem.partition.lambda_layout();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for k in 0..problem.subsystem_count() {
        let col_blocks: Vec<(usize, &DMatrix<f64>)> = problem.a.col_blocks(k).collect();
        if col_blocks.is_empty() {
            continue;
        }
        // H_k^{-1} A_jk^T for every row neighbor j of column k.
        let solved: Vec<DMatrix<f64>> = col_blocks
            .iter()
            .map(|(_, blk)| problem.costs[k].hessian.solve_matrix(&blk.transpose()))
            .collect::<Result<_>>()?;
        for (ia, &(i, blk_i)) in col_blocks.iter().enumerate() {
            let _ = ia;
            for (jb, &(j, _)) in col_blocks.iter().enumerate() {
                let contrib = blk_i * &solved[jb];
                let (ro, co) = (lambda.offset(i), lambda.offset(j));
                for r in 0..contrib.nrows() {
                    for c in 0..contrib.ncols() {
                        let v = contrib[(r, c)];
                        if v != 0.0 {
                            triplets.push((ro + r, co + c, v));
                        }
                    }
                }
            }
        }
    }
    let csc = CscMatrix::from_triplets(m_total, m_total, &triplets);
    let sf = SparseFactoredMetric::new(csc).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::NotPositiveDefinite {
            context: "A H^{-1} A^T (is A full row rank?)".into(),
        },
        other => other,
    })?;
    Ok(Metric::SparseFactored(sf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_model::{BlockPartition, CostMatrix, LocalCost, SparseBlockMatrix};
    use nalgebra::{DMatrix, DVector};

    fn cost(h: Vec<f64>) -> LocalCost {
        let n = h.len();
        LocalCost {
            hessian: CostMatrix::Diagonal(DVector::from_vec(h)),
            linear: DVector::zeros(n),
            bounds: None,
            coupled: None,
        }
    }

    fn single_block_problem(a: DMatrix<f64>, h: Vec<f64>) -> ProblemInstance {
        let (m, n) = (a.nrows(), a.ncols());
        let partition = BlockPartition::new(vec![n], vec![m], vec![0]).unwrap();
        let mut am = SparseBlockMatrix::new(vec![m], vec![n]);
        am.insert_block(0, 0, a).unwrap();
        ProblemInstance::new(partition, vec![cost(h)], am, None, DVector::zeros(m)).unwrap()
    }

    #[test]
    fn exact_metric_row_vector() {
        // A = [1 1], H = I: L = [2], solve(4) = 2.
        let p = single_block_problem(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), vec![1.0, 1.0]);
        let l = exact_metric(&p).unwrap();
        assert_eq!(l.dim(), 1);
        let s = l.solve(&DVector::from_vec(vec![4.0]));
        assert!((s[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn exact_metric_identity_a() {
        // A = I, H = diag(2,4): L = diag(0.5, 0.25).
        let p = single_block_problem(DMatrix::identity(2, 2), vec![2.0, 4.0]);
        let l = exact_metric(&p).unwrap();
        let dense = l.to_dense();
        assert!((dense[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((dense[(1, 1)] - 0.25).abs() < 1e-14);
        assert!(dense[(0, 1)].abs() < 1e-14);
    }

    fn chain_problem(blocks: usize) -> ProblemInstance {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n_sizes = vec![2usize; blocks];
        let m_sizes = vec![1usize; blocks];
        let partition = BlockPartition::new(n_sizes.clone(), m_sizes.clone(), vec![0; blocks]).unwrap();
        let mut a = SparseBlockMatrix::new(m_sizes, n_sizes);
        for i in 0..blocks {
            let diag = DMatrix::from_fn(1, 2, |_, _| rng.gen_range(0.5..1.5));
            a.insert_block(i, i, diag).unwrap();
            if i + 1 < blocks {
                let off = DMatrix::from_fn(1, 2, |_, _| rng.gen_range(-0.5..0.5));
                a.insert_block(i, i + 1, off).unwrap();
            }
        }
        let costs = (0..blocks)
            .map(|_| cost(vec![rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)]))
            .collect();
        ProblemInstance::new(partition, costs, a, None, DVector::zeros(blocks)).unwrap()
    }

    #[test]
    fn exact_metric_solve_roundtrip_chain() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let p = chain_problem(3);
        let l = exact_metric(&p).unwrap();
        for _ in 0..5 {
            let v = DVector::from_fn(l.dim(), |_, _| rng.gen_range(-1.0..1.0));
            let back = l.apply(&l.solve(&v));
            assert!((back - &v).amax() < 1e-12 * v.amax().max(1.0));
        }
    }

    #[test]
    fn local_gram_two_scalar_duals() {
        // Column 0 coupled into two scalar dual rows with H = [2]:
        // G = [[0.5, 0.5], [0.5, 0.5]].
        let partition = BlockPartition::new(vec![1, 1], vec![1, 1], vec![0, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 0, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 1, DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let p = ProblemInstance::new(
            partition,
            vec![cost(vec![2.0]), cost(vec![1.0])],
            a,
            None,
            DVector::zeros(2),
        )
        .unwrap();
        let g = local_gram(&p, 0).unwrap();
        assert_eq!(g.members, vec![0, 1]);
        for r in 0..2 {
            for c in 0..2 {
                assert!((g.g[(r, c)] - 0.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn local_gram_identity() {
        let p = single_block_problem(DMatrix::identity(2, 2), vec![1.0, 1.0]);
        let g = local_gram(&p, 0).unwrap();
        assert!((&g.g - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn closed_form_two_scalar_blocks() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let blocks = closed_form_blocks(&g, &[1, 1], 0.0);
        assert_eq!(blocks[0][(0, 0)], 4.0);
        assert_eq!(blocks[1][(0, 0)], 4.0);
        // min eig of diag(4,4) - G is 1.
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0]));
        let min_eig = (l - g).symmetric_eigen().eigenvalues.min();
        assert!((min_eig - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_single_block_is_tight() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let blocks = closed_form_blocks(&g, &[2], 1e-3);
        let expect = &g + DMatrix::identity(2, 2) * 1e-3;
        assert!((&blocks[0] - expect).norm() < 1e-14);
    }

    #[test]
    fn closed_form_zero_gram() {
        let g = DMatrix::zeros(3, 3);
        let blocks = closed_form_blocks(&g, &[1, 2], 0.5);
        assert!((&blocks[0] - DMatrix::identity(1, 1) * 0.5).norm() < 1e-14);
        assert!((&blocks[1] - DMatrix::identity(2, 2) * 0.5).norm() < 1e-14);
    }

    #[test]
    fn sdp_metric_two_by_two_optimum() {
        let gram = LocalGram {
            node: 0,
            members: vec![0, 1],
            member_sizes: vec![1, 1],
            g: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
        };
        let r = local_metric_sdp(&gram, &[1, 1], Some(0.0), 2000, 1e-9).unwrap();
        assert!((r.trace - 6.0).abs() < 1e-4, "trace {}", r.trace);
        assert!(!r.fell_back);
    }

    #[test]
    fn sdp_metric_diagonal_gram_is_tight() {
        let gram = LocalGram {
            node: 0,
            members: vec![0, 1],
            member_sizes: vec![1, 1],
            g: DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 5.0])),
        };
        let eps = 1e-6;
        let r = local_metric_sdp(&gram, &[1, 1], Some(eps), 2000, 1e-10).unwrap();
        assert!((r.blocks[0][(0, 0)] - (3.0 + eps)).abs() < 1e-4);
        assert!((r.blocks[1][(0, 0)] - (5.0 + eps)).abs() < 1e-4);
    }

    #[test]
    fn sdp_trace_never_exceeds_closed_form() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let f = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
            let g = &f * f.transpose();
            let gram = LocalGram {
                node: 0,
                members: vec![0, 1, 2],
                member_sizes: vec![2, 2, 1],
                g,
            };
            let (closed, eps) = block_feasible_closed_form(&gram, None);
            let closed_trace: f64 = closed.iter().map(|b| b.trace()).sum();
            let r = local_metric_sdp(&gram, &[2, 2, 1], Some(eps), 2000, 1e-8).unwrap();
            assert!(r.trace <= closed_trace + 1e-9 * closed_trace.abs());
            // Feasibility of the returned blocks.
            let mut l = DMatrix::zeros(5, 5);
            let mut off = 0;
            for b in &r.blocks {
                l.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
                off += b.nrows();
            }
            let min_eig = (&l - &gram.g).symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-9 * gram.g.trace().max(1.0));
        }
    }

    #[test]
    fn scalar_metric_norms() {
        // A H^{-1} A^T = [[2,1],[1,2]]: two-norm 3, one-norm 3.
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let p = single_block_problem(a, vec![1.0, 1.0, 1.0]);
        let two = scalar_metric(&p, ScalarNorm::TwoNorm).unwrap();
        let one = scalar_metric(&p, ScalarNorm::OneNorm).unwrap();
        match (two, one) {
            (Metric::Scalar { alpha: a2, .. }, Metric::Scalar { alpha: a1, .. }) => {
                assert!((a2 - 3.0).abs() < 1e-8, "two norm {a2}");
                assert!((a1 - 3.0).abs() < 1e-12, "one norm {a1}");
            }
            _ => panic!("expected scalar metrics"),
        }
    }

    #[test]
    fn scalar_metric_diagonal_case() {
        // A = [5], H = [5]: Gram = [5]; both norms are 5.
        let p = single_block_problem(DMatrix::from_row_slice(1, 1, &[5.0]), vec![5.0]);
        for norm in [ScalarNorm::TwoNorm, ScalarNorm::OneNorm] {
            match scalar_metric(&p, norm).unwrap() {
                Metric::Scalar { alpha, .. } => assert!((alpha - 5.0).abs() < 1e-9),
                _ => panic!(),
            }
        }
    }

    #[test]
    fn verify_exact_metric_is_tight() {
        let p = chain_problem(3);
        let l = exact_metric(&p).unwrap();
        let rep = verify_feasible(&l, &p, 1e-10).unwrap();
        assert!(rep.feasible);
        assert!(rep.min_eig.abs() < 1e-10);
    }

    #[test]
    fn verify_rejects_shrunk_metric() {
        let p = chain_problem(3);
        let two = match scalar_metric(&p, ScalarNorm::TwoNorm).unwrap() {
            Metric::Scalar { alpha, dim } => Metric::Scalar {
                alpha: 0.5 * alpha,
                dim,
            },
            _ => unreachable!(),
        };
        let rep = verify_feasible(&two, &p, 1e-10).unwrap();
        assert!(!rep.feasible);
    }

    #[test]
    fn distributed_init_decoupled_uses_own_block() {
        let partition = BlockPartition::new(vec![2, 2], vec![1, 1], vec![0, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![2, 2]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        a.insert_block(1, 1, DMatrix::from_row_slice(1, 2, &[3.0, 1.0])).unwrap();
        let p = ProblemInstance::new(
            partition,
            vec![cost(vec![1.0, 2.0]), cost(vec![2.0, 1.0])],
            a,
            None,
            DVector::zeros(2),
        )
        .unwrap();
        let init = distributed_init(&p, &MetricChooser::closed_form()).unwrap();
        for i in 0..2 {
            let own = init.choices[i].block_for(i).unwrap();
            assert_eq!(&init.node_blocks[i], own);
        }
    }

    #[test]
    fn distributed_init_chain_is_feasible() {
        let p = chain_problem(2);
        let init = distributed_init(&p, &MetricChooser::closed_form()).unwrap();
        let rep = verify_feasible(&init.metric, &p, 1e-9).unwrap();
        assert!(rep.feasible, "min eig {}", rep.min_eig);
    }

    #[test]
    fn summation_identity_random_duals() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let p = chain_problem(4);
        let init = distributed_init(&p, &MetricChooser::sdp()).unwrap();
        let dual = p.partition.dual_layout();
        for _ in 0..10 {
            let nu = DVector::from_fn(dual.total(), |_, _| rng.gen_range(-1.0..1.0));
            let lhs: f64 = (0..p.subsystem_count())
                .map(|i| {
                    let ni: DVector<f64> = dual.view(&nu, i).into();
                    ni.dot(&(&init.node_blocks[i] * &ni))
                })
                .sum();
            let rhs: f64 = (0..p.subsystem_count())
                .map(|i| {
                    let nmi = p.gather(&nu, i);
                    nmi.dot(&(init.choices[i].to_dense() * &nmi))
                })
                .sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }
}
