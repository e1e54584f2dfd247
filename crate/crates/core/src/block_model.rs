//! Block-partitioned problem model.
//!
//! Problems have the separable form
//!
//! ```text
//! minimize   sum_i f_i(x_i) + h_i(x_i) + g_i(B_i x)
//! subject to A x = b
//! ```
//!
//! with block-sparse coupling matrices `A` (equality) and `B` (coupled
//! terms). The block sparsity induces per-subsystem neighbor sets that
//! drive all gather/scatter and communication patterns.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-block dimensions of the primal and dual spaces.
///
/// `n_sizes[i]` is the primal dimension of subsystem `i`, `m_sizes[i]` the
/// number of its equality rows, `p_sizes[i]` the number of its coupled rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub subsystem_count: usize,
    pub n_sizes: Vec<usize>,
    pub m_sizes: Vec<usize>,
    pub p_sizes: Vec<usize>,
}

impl BlockPartition {
    pub fn new(n_sizes: Vec<usize>, m_sizes: Vec<usize>, p_sizes: Vec<usize>) -> Result<Self> {
        let count = n_sizes.len();
        if m_sizes.len() != count || p_sizes.len() != count {
            return Err(Error::PartitionMismatch(format!(
                "size lists disagree: n={}, m={}, p={}",
                n_sizes.len(),
                m_sizes.len(),
                p_sizes.len()
            )));
        }
        if count == 0 {
            return Err(Error::Invalid("partition needs at least one subsystem".into()));
        }
        Ok(Self {
            subsystem_count: count,
            n_sizes,
            m_sizes,
            p_sizes,
        })
    }

    pub fn total_n(&self) -> usize {
        self.n_sizes.iter().sum()
    }

    pub fn total_m(&self) -> usize {
        self.m_sizes.iter().sum()
    }

    pub fn total_p(&self) -> usize {
        self.p_sizes.iter().sum()
    }

    /// Size of the combined dual block of subsystem `i`: `m_i + p_i`.
    pub fn dual_size(&self, i: usize) -> usize {
        self.m_sizes[i] + self.p_sizes[i]
    }

    pub fn primal_layout(&self) -> Layout {
        Layout::new(&self.n_sizes)
    }

    pub fn lambda_layout(&self) -> Layout {
        Layout::new(&self.m_sizes)
    }

    pub fn mu_layout(&self) -> Layout {
        Layout::new(&self.p_sizes)
    }

    /// Layout of the stacked dual vector `nu = (nu_1, ..., nu_M)` with
    /// per-node blocks `nu_i = (lambda_i, mu_i)`.
    pub fn dual_layout(&self) -> Layout {
        let sizes: Vec<usize> = (0..self.subsystem_count).map(|i| self.dual_size(i)).collect();
        Layout::new(&sizes)
    }
}

/// Offsets of a block layout over a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            offsets.push(acc);
            acc += s;
        }
        Self {
            offsets,
            sizes: sizes.to_vec(),
            total: acc,
        }
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn view<'a>(&self, v: &'a DVector<f64>, i: usize) -> DVectorView<'a, f64> {
        v.rows(self.offsets[i], self.sizes[i])
    }
}

/// Block-sparse matrix storing only structurally nonzero dense blocks.
///
/// Blocks are keyed by `(block_row, block_col)`; iteration order is always
/// sorted, which pins the floating-point accumulation order everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlockMatrix {
    row_sizes: Vec<usize>,
    col_sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl SparseBlockMatrix {
    pub fn new(row_sizes: Vec<usize>, col_sizes: Vec<usize>) -> Self {
        Self {
            row_sizes,
            col_sizes,
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert_block(&mut self, i: usize, j: usize, block: DMatrix<f64>) -> Result<()> {
        if i >= self.row_sizes.len() || j >= self.col_sizes.len() {
            return Err(Error::Invalid(format!("block index ({i},{j}) out of range")));
        }
        if block.nrows() != self.row_sizes[i] || block.ncols() != self.col_sizes[j] {
            return Err(Error::DimensionMismatch {
                context: format!("block ({i},{j})"),
                expected: self.row_sizes[i] * self.col_sizes[j],
                found: block.nrows() * block.ncols(),
            });
        }
        self.blocks.insert((i, j), block);
        Ok(())
    }

    pub fn remove_block(&mut self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        self.blocks.remove(&(i, j))
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(i, j))
    }

    pub fn block_rows(&self) -> usize {
        self.row_sizes.len()
    }

    pub fn block_cols(&self) -> usize {
        self.col_sizes.len()
    }

    pub fn row_sizes(&self) -> &[usize] {
        &self.row_sizes
    }

    pub fn col_sizes(&self) -> &[usize] {
        &self.col_sizes
    }

    pub fn nrows(&self) -> usize {
        self.row_sizes.iter().sum()
    }

    pub fn ncols(&self) -> usize {
        self.col_sizes.iter().sum()
    }

    /// Structurally nonzero blocks of block row `i`, sorted by column.
    pub fn row_blocks(&self, i: usize) -> impl Iterator<Item = (usize, &DMatrix<f64>)> {
        self.blocks
            .range((i, 0)..(i + 1, 0))
            .map(|(&(_, j), b)| (j, b))
    }

    /// Structurally nonzero blocks of block column `j`, sorted by row.
    pub fn col_blocks(&self, j: usize) -> impl Iterator<Item = (usize, &DMatrix<f64>)> + '_ {
        self.blocks
            .iter()
            .filter(move |(&(_, c), _)| c == j)
            .map(|(&(r, _), b)| (r, b))
    }

    /// Column indices of nonzero blocks in row `i`, sorted.
    pub fn row_pattern(&self, i: usize) -> Vec<usize> {
        self.row_blocks(i).map(|(j, _)| j).collect()
    }

    /// Row indices of nonzero blocks in column `j`, sorted.
    pub fn col_pattern(&self, j: usize) -> Vec<usize> {
        self.col_blocks(j).map(|(i, _)| i).collect()
    }

    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.blocks.iter().map(|(&(i, j), b)| (i, j, b))
    }

    /// Row block `i` of `self * x`, accumulated over nonzero blocks in
    /// sorted column order.
    pub fn row_block_mul(&self, i: usize, x: &DVector<f64>, x_layout: &Layout) -> DVector<f64> {
        let mut acc = DVector::zeros(self.row_sizes[i]);
        for (j, b) in self.row_blocks(i) {
            acc.gemv(1.0, b, &x_layout.view(x, j), 1.0);
        }
        acc
    }

    /// Column block `j` of `self^T * y`, accumulated over nonzero blocks in
    /// sorted row order.
    pub fn col_block_tr_mul(&self, j: usize, y: &DVector<f64>, y_layout: &Layout) -> DVector<f64> {
        let mut acc = DVector::zeros(self.col_sizes[j]);
        for (i, b) in self.col_blocks(j) {
            acc.gemv_tr(1.0, b, &y_layout.view(y, i), 1.0);
        }
        acc
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let x_layout = Layout::new(&self.col_sizes);
        let y_layout = Layout::new(&self.row_sizes);
        let mut y = DVector::zeros(self.nrows());
        for i in 0..self.block_rows() {
            let ri = self.row_block_mul(i, x, &x_layout);
            y.rows_mut(y_layout.offset(i), y_layout.size(i)).copy_from(&ri);
        }
        y
    }

    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let x_layout = Layout::new(&self.col_sizes);
        let y_layout = Layout::new(&self.row_sizes);
        let mut x = DVector::zeros(self.ncols());
        for j in 0..self.block_cols() {
            let cj = self.col_block_tr_mul(j, y, &y_layout);
            x.rows_mut(x_layout.offset(j), x_layout.size(j)).copy_from(&cj);
        }
        x
    }

    pub fn assemble_dense(&self) -> DMatrix<f64> {
        let row_layout = Layout::new(&self.row_sizes);
        let col_layout = Layout::new(&self.col_sizes);
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        for (i, j, b) in self.iter_blocks() {
            out.view_mut(
                (row_layout.offset(i), col_layout.offset(j)),
                (b.nrows(), b.ncols()),
            )
            .copy_from(b);
        }
        out
    }
}

/// Accumulate `sum_k blocks[k] * parts[k]` in list order.
///
/// Both the centralized solver and the simulated nodes route their block
/// matrix-vector products through this kernel so that their floating-point
/// results are identical bit for bit.
pub fn block_apply(out_dim: usize, blocks: &[(usize, &DMatrix<f64>)], parts: &[DVectorView<f64>]) -> DVector<f64> {
    debug_assert_eq!(blocks.len(), parts.len());
    let mut acc = DVector::zeros(out_dim);
    for (k, (_, b)) in blocks.iter().enumerate() {
        acc.gemv(1.0, b, &parts[k], 1.0);
    }
    acc
}

/// Accumulate `sum_k blocks[k]^T * parts[k]` in list order.
pub fn block_apply_transpose(
    out_dim: usize,
    blocks: &[(usize, &DMatrix<f64>)],
    parts: &[DVectorView<f64>],
) -> DVector<f64> {
    debug_assert_eq!(blocks.len(), parts.len());
    let mut acc = DVector::zeros(out_dim);
    for (k, (_, b)) in blocks.iter().enumerate() {
        acc.gemv_tr(1.0, b, &parts[k], 1.0);
    }
    acc
}

/// Row and column neighbor sets derived from block sparsity.
///
/// `n[i]` holds the block columns coupled on block row `i`; `m[i]` holds the
/// block rows coupled on block column `i`. Both are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub n: Vec<Vec<usize>>,
    pub m: Vec<Vec<usize>>,
}

/// Derive neighbor sets from the union of the `A` and `B` block patterns.
///
/// `j` is in `N_i` iff block `A_ij` or `B_ij` is structurally nonzero; `M_i`
/// is the transpose relation. Union semantics keep the sets meaningful when
/// `B` is absent.
pub fn derive_neighbor_sets(
    a: &SparseBlockMatrix,
    b: Option<&SparseBlockMatrix>,
) -> Result<NeighborSets> {
    let count = a.block_rows();
    if a.block_cols() != count {
        return Err(Error::PartitionMismatch(format!(
            "A must have square block structure, got {}x{}",
            a.block_rows(),
            a.block_cols()
        )));
    }
    if let Some(b) = b {
        if b.block_rows() != count || b.block_cols() != count {
            return Err(Error::PartitionMismatch(
                "B block structure must match A".into(),
            ));
        }
        if b.col_sizes() != a.col_sizes() {
            return Err(Error::PartitionMismatch(
                "A and B must share the column partition".into(),
            ));
        }
    }
    let mut n: Vec<Vec<usize>> = vec![Vec::new(); count];
    let mut m: Vec<Vec<usize>> = vec![Vec::new(); count];
    for i in 0..count {
        let mut cols = a.row_pattern(i);
        if let Some(b) = b {
            for j in b.row_pattern(i) {
                if !cols.contains(&j) {
                    cols.push(j);
                }
            }
            cols.sort_unstable();
        }
        n[i] = cols;
    }
    for (i, cols) in n.iter().enumerate() {
        for &j in cols {
            m[j].push(i);
        }
    }
    for set in &mut m {
        set.sort_unstable();
    }
    Ok(NeighborSets { n, m })
}

/// Check that the assembled `A` has full row rank.
///
/// Passes iff the smallest singular value exceeds `tol` times the largest.
/// On failure the error carries 0-based indices of rows that are linearly
/// dependent on earlier rows; nothing is removed silently.
pub fn validate_full_row_rank(a: &SparseBlockMatrix, tol: f64) -> Result<()> {
    let dense = a.assemble_dense();
    if dense.nrows() == 0 {
        return Ok(());
    }
    if dense.nrows() > dense.ncols() {
        // More rows than columns can never have full row rank; fall through
        // to report dependents.
    }
    let svd = dense.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = if dense.nrows() <= dense.ncols() {
        svd.singular_values.min()
    } else {
        0.0
    };
    if smax > 0.0 && smin > tol * smax {
        return Ok(());
    }
    // Identify dependent rows by modified Gram-Schmidt over the rows in order.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    let scale = if smax > 0.0 { smax } else { 1.0 };
    for r in 0..dense.nrows() {
        let mut v: DVector<f64> = dense.row(r).transpose();
        let norm0 = v.norm().max(scale * 1e-300);
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        // Re-orthogonalize once for numerical robustness.
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let res = v.norm();
        if res <= tol.max(1e-12) * norm0.max(scale) {
            dependent.push(r);
        } else {
            basis.push(v / res);
        }
    }
    if dependent.is_empty() {
        // Rank test failed but no single row flagged: report the last row.
        dependent.push(dense.nrows() - 1);
    }
    Err(Error::RankDeficient { rows: dependent })
}

/// Quadratic cost matrix of a subsystem.
#[derive(Debug, Clone, PartialEq)]
pub enum CostMatrix {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl CostMatrix {
    pub fn dim(&self) -> usize {
        match self {
            CostMatrix::Diagonal(d) => d.len(),
            CostMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            CostMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
            CostMatrix::Dense(m) => m.clone(),
        }
    }

    /// `self * x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            CostMatrix::Diagonal(d) => x.component_mul(d),
            CostMatrix::Dense(m) => m * x,
        }
    }

    /// `self^{-1} * x`, assuming positive definiteness.
    pub fn solve(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            CostMatrix::Diagonal(d) => Ok(x.component_div(d)),
            CostMatrix::Dense(m) => {
                let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    context: "cost matrix".into(),
                })?;
                Ok(chol.solve(x))
            }
        }
    }

    /// `self^{-1} * B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            CostMatrix::Diagonal(d) => {
                let mut out = b.clone();
                for mut col in out.column_iter_mut() {
                    for (k, v) in col.iter_mut().enumerate() {
                        *v /= d[k];
                    }
                }
                Ok(out)
            }
            CostMatrix::Dense(m) => {
                let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    context: "cost matrix".into(),
                })?;
                Ok(chol.solve(b))
            }
        }
    }

    fn validate(&self, n: usize, node: usize) -> Result<()> {
        if self.dim() != n {
            return Err(Error::DimensionMismatch {
                context: format!("cost matrix of subsystem {node}"),
                expected: n,
                found: self.dim(),
            });
        }
        match self {
            CostMatrix::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::NotPositiveDefinite {
                        context: format!("diagonal cost of subsystem {node}"),
                    });
                }
            }
            CostMatrix::Dense(m) => {
                if m.nrows() != m.ncols() {
                    return Err(Error::Invalid(format!(
                        "cost matrix of subsystem {node} not square"
                    )));
                }
                if m.clone().cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite {
                        context: format!("dense cost of subsystem {node}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Componentwise box `[lower, upper]`; entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds".into(),
                expected: lower.len(),
                found: upper.len(),
            });
        }
        for k in 0..lower.len() {
            if lower[k].is_nan() || upper[k].is_nan() || lower[k] > upper[k] {
                return Err(Error::Invalid(format!(
                    "box bounds out of order at component {k}: [{}, {}]",
                    lower[k], upper[k]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| x[k].max(self.lower[k]).min(self.upper[k]))
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        (0..x.len()).all(|k| x[k] >= self.lower[k] - slack && x[k] <= self.upper[k] + slack)
    }
}

/// Coupled-term descriptor `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum CoupledCost {
    /// Indicator of a box on the coupled rows `B_i x`.
    Box(Bounds),
    /// Weighted 1-norm of the coupled rows.
    OneNorm(DVector<f64>),
}

impl CoupledCost {
    pub fn dim(&self) -> usize {
        match self {
            CoupledCost::Box(b) => b.dim(),
            CoupledCost::OneNorm(w) => w.len(),
        }
    }
}

/// Local cost `f_i + h_i` plus optional coupled term descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCost {
    pub hessian: CostMatrix,
    pub linear: DVector<f64>,
    pub bounds: Option<Bounds>,
    pub coupled: Option<CoupledCost>,
}

impl LocalCost {
    /// `f_i(x) = 1/2 x' H x + zeta' x`.
    pub fn quadratic_value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.hessian.apply(x)) + self.linear.dot(x)
    }
}

/// A block-partitioned problem instance.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub partition: BlockPartition,
    pub costs: Vec<LocalCost>,
    pub a: SparseBlockMatrix,
    pub b_mat: Option<SparseBlockMatrix>,
    pub b_vec: DVector<f64>,
    pub neighbors: NeighborSets,
}

impl ProblemInstance {
    pub fn new(
        partition: BlockPartition,
        costs: Vec<LocalCost>,
        a: SparseBlockMatrix,
        b_mat: Option<SparseBlockMatrix>,
        b_vec: DVector<f64>,
    ) -> Result<Self> {
        let count = partition.subsystem_count;
        if costs.len() != count {
            return Err(Error::PartitionMismatch(format!(
                "expected {count} local costs, got {}",
                costs.len()
            )));
        }
        if a.row_sizes() != partition.m_sizes.as_slice() || a.col_sizes() != partition.n_sizes.as_slice()
        {
            return Err(Error::PartitionMismatch("A does not match the partition".into()));
        }
        if let Some(b) = &b_mat {
            if b.row_sizes() != partition.p_sizes.as_slice()
                || b.col_sizes() != partition.n_sizes.as_slice()
            {
                return Err(Error::PartitionMismatch("B does not match the partition".into()));
            }
        } else if partition.total_p() != 0 {
            return Err(Error::PartitionMismatch(
                "partition declares coupled rows but B is absent".into(),
            ));
        }
        if b_vec.len() != partition.total_m() {
            return Err(Error::DimensionMismatch {
                context: "right-hand side b".into(),
                expected: partition.total_m(),
                found: b_vec.len(),
            });
        }
        for (i, cost) in costs.iter().enumerate() {
            cost.hessian.validate(partition.n_sizes[i], i)?;
            if cost.linear.len() != partition.n_sizes[i] {
                return Err(Error::DimensionMismatch {
                    context: format!("linear term of subsystem {i}"),
                    expected: partition.n_sizes[i],
                    found: cost.linear.len(),
                });
            }
            if let Some(b) = &cost.bounds {
                if b.dim() != partition.n_sizes[i] {
                    return Err(Error::DimensionMismatch {
                        context: format!("box of subsystem {i}"),
                        expected: partition.n_sizes[i],
                        found: b.dim(),
                    });
                }
            }
            match (&cost.coupled, partition.p_sizes[i]) {
                (None, 0) => {}
                (None, _) => {
                    return Err(Error::Invalid(format!(
                        "subsystem {i} has coupled rows but no coupled term"
                    )))
                }
                (Some(_), 0) => {
                    return Err(Error::Invalid(format!(
                        "subsystem {i} has a coupled term but no coupled rows"
                    )))
                }
                (Some(g), p) => {
                    if g.dim() != p {
                        return Err(Error::DimensionMismatch {
                            context: format!("coupled term of subsystem {i}"),
                            expected: p,
                            found: g.dim(),
                        });
                    }
                }
            }
        }
        let neighbors = derive_neighbor_sets(&a, b_mat.as_ref())?;
        Ok(Self {
            partition,
            costs,
            a,
            b_mat,
            b_vec,
            neighbors,
        })
    }

    pub fn subsystem_count(&self) -> usize {
        self.partition.subsystem_count
    }

    pub fn has_coupled_terms(&self) -> bool {
        self.b_mat.is_some()
    }

    /// Right-hand side block `b_i`.
    pub fn b_block(&self, i: usize) -> DVectorView<'_, f64> {
        let layout = self.partition.lambda_layout();
        layout.view(&self.b_vec, i)
    }

    /// Stack `(lambda, mu)` into the per-node interleaved dual vector.
    pub fn stack_dual(&self, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        let dual = self.partition.dual_layout();
        let ll = self.partition.lambda_layout();
        let ml = self.partition.mu_layout();
        let mut nu = DVector::zeros(dual.total());
        for i in 0..self.subsystem_count() {
            let off = dual.offset(i);
            let mi = self.partition.m_sizes[i];
            let pi = self.partition.p_sizes[i];
            nu.rows_mut(off, mi).copy_from(&ll.view(lambda, i));
            nu.rows_mut(off + mi, pi).copy_from(&ml.view(mu, i));
        }
        nu
    }

    /// Split the interleaved dual vector back into `(lambda, mu)`.
    pub fn split_dual(&self, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let dual = self.partition.dual_layout();
        let ll = self.partition.lambda_layout();
        let ml = self.partition.mu_layout();
        let mut lambda = DVector::zeros(ll.total());
        let mut mu = DVector::zeros(ml.total());
        for i in 0..self.subsystem_count() {
            let off = dual.offset(i);
            let mi = self.partition.m_sizes[i];
            let pi = self.partition.p_sizes[i];
            lambda.rows_mut(ll.offset(i), mi).copy_from(&nu.rows(off, mi));
            mu.rows_mut(ml.offset(i), pi).copy_from(&nu.rows(off + mi, pi));
        }
        (lambda, mu)
    }

    /// Gather `nu_{M_i}`: the concatenation of dual blocks `nu_j` for
    /// `j in M_i` in sorted order.
    pub fn gather(&self, nu: &DVector<f64>, i: usize) -> DVector<f64> {
        gather(nu, &self.neighbors.m[i], &self.partition.dual_layout())
    }

    /// Scatter a gathered `nu_{M_i}` back to global positions, zero elsewhere.
    pub fn scatter(&self, local: &DVector<f64>, i: usize) -> DVector<f64> {
        scatter(local, &self.neighbors.m[i], &self.partition.dual_layout())
    }

    /// Assembled dense coupling matrix `C` in the interleaved dual ordering:
    /// the rows of node `i` are its `A` rows followed by its `B` rows.
    pub fn assemble_c_dense(&self) -> DMatrix<f64> {
        let dual = self.partition.dual_layout();
        let primal = self.partition.primal_layout();
        let mut c = DMatrix::zeros(dual.total(), primal.total());
        for (i, j, blk) in self.a.iter_blocks() {
            c.view_mut((dual.offset(i), primal.offset(j)), (blk.nrows(), blk.ncols()))
                .copy_from(blk);
        }
        if let Some(b) = &self.b_mat {
            for (i, j, blk) in b.iter_blocks() {
                let off = dual.offset(i) + self.partition.m_sizes[i];
                c.view_mut((off, primal.offset(j)), (blk.nrows(), blk.ncols()))
                    .copy_from(blk);
            }
        }
        c
    }

    /// `c = (b, 0)` in the interleaved dual ordering.
    pub fn assemble_c_rhs(&self) -> DVector<f64> {
        let dual = self.partition.dual_layout();
        let ll = self.partition.lambda_layout();
        let mut c = DVector::zeros(dual.total());
        for i in 0..self.subsystem_count() {
            c.rows_mut(dual.offset(i), self.partition.m_sizes[i])
                .copy_from(&ll.view(&self.b_vec, i));
        }
        c
    }

    /// Concatenated column blocks `C_{M_i}` of block column `i`: for each
    /// `j in M_i` (sorted) the rows `[A_ji; B_ji]`, with structural zeros for
    /// members coupled through only one of the two matrices.
    pub fn c_column_blocks(&self, i: usize) -> Vec<(usize, DMatrix<f64>)> {
        let n_i = self.partition.n_sizes[i];
        self.neighbors.m[i]
            .iter()
            .map(|&j| {
                let mj = self.partition.m_sizes[j];
                let pj = self.partition.p_sizes[j];
                let mut blk = DMatrix::zeros(mj + pj, n_i);
                if let Some(a) = self.a.block(j, i) {
                    blk.view_mut((0, 0), (mj, n_i)).copy_from(a);
                }
                if let Some(bm) = &self.b_mat {
                    if let Some(b) = bm.block(j, i) {
                        blk.view_mut((mj, 0), (pj, n_i)).copy_from(b);
                    }
                }
                (j, blk)
            })
            .collect()
    }

    /// Dense Gram matrix `C H^{-1} C^T` in the interleaved dual ordering.
    /// Desk-scale only; used by verification and scalar metric selection.
    pub fn gram_dense(&self) -> Result<DMatrix<f64>> {
        let dual = self.partition.dual_layout();
        let mut g = DMatrix::zeros(dual.total(), dual.total());
        for i in 0..self.subsystem_count() {
            let cols = self.c_column_blocks(i);
            let sizes: Vec<usize> = self.neighbors.m[i]
                .iter()
                .map(|&j| self.partition.dual_size(j))
                .collect();
            let local = Layout::new(&sizes);
            // H_i^{-1} C_{M_i}^T computed blockwise.
            let solved: Vec<DMatrix<f64>> = cols
                .iter()
                .map(|(_, blk)| self.costs[i].hessian.solve_matrix(&blk.transpose()))
                .collect::<Result<_>>()?;
            for (a_idx, (ja, blk_a)) in cols.iter().enumerate() {
                for (b_idx, (jb, _)) in cols.iter().enumerate() {
                    let contrib = blk_a * &solved[b_idx];
                    let (ra, rb) = (dual.offset(*ja), dual.offset(*jb));
                    let mut view = g.view_mut((ra, rb), (local.size(a_idx), local.size(b_idx)));
                    view += contrib;
                }
            }
        }
        Ok(g)
    }

    /// Full row rank validation of the equality constraint matrix.
    pub fn validate_rank(&self, tol: f64) -> Result<()> {
        validate_full_row_rank(&self.a, tol)
    }
}

/// Gather blocks `set` of `v` (per `layout`) into one concatenated vector.
pub fn gather(v: &DVector<f64>, set: &[usize], layout: &Layout) -> DVector<f64> {
    let total: usize = set.iter().map(|&j| layout.size(j)).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for &j in set {
        out.rows_mut(off, layout.size(j)).copy_from(&layout.view(v, j));
        off += layout.size(j);
    }
    out
}

/// Adjoint of [`gather`]: place the concatenated blocks back at their global
/// positions, zeros elsewhere.
pub fn scatter(local: &DVector<f64>, set: &[usize], layout: &Layout) -> DVector<f64> {
    let mut out = DVector::zeros(layout.total());
    let mut off = 0;
    for &j in set {
        out.rows_mut(layout.offset(j), layout.size(j))
            .copy_from(&local.rows(off, layout.size(j)));
        off += layout.size(j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn neighbor_sets_from_a_only() {
        // A blocks {(0,0),(0,1),(1,1)} nonzero, B absent.
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        a.insert_block(0, 0, mat(1, 1, &[1.0])).unwrap();
        a.insert_block(0, 1, mat(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 1, mat(1, 1, &[1.0])).unwrap();
        let sets = derive_neighbor_sets(&a, None).unwrap();
        assert_eq!(sets.n, vec![vec![0, 1], vec![1]]);
        assert_eq!(sets.m, vec![vec![0], vec![0, 1]]);
    }

    #[test]
    fn neighbor_sets_diagonal() {
        let mut a = SparseBlockMatrix::new(vec![1, 2, 1], vec![1, 2, 1]);
        a.insert_block(0, 0, mat(1, 1, &[1.0])).unwrap();
        a.insert_block(1, 1, DMatrix::identity(2, 2)).unwrap();
        a.insert_block(2, 2, mat(1, 1, &[1.0])).unwrap();
        let sets = derive_neighbor_sets(&a, None).unwrap();
        for i in 0..3 {
            assert_eq!(sets.n[i], vec![i]);
            assert_eq!(sets.m[i], vec![i]);
        }
    }

    #[test]
    fn neighbor_sets_union_of_a_and_b() {
        // A has only block (0,1); B has only block (1,0). Union semantics.
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        a.insert_block(0, 1, mat(1, 1, &[1.0])).unwrap();
        let mut b = SparseBlockMatrix::new(vec![1, 1], vec![1, 1]);
        b.insert_block(1, 0, mat(1, 1, &[1.0])).unwrap();
        let sets = derive_neighbor_sets(&a, Some(&b)).unwrap();
        assert_eq!(sets.n, vec![vec![1], vec![0]]);
        assert_eq!(sets.m, vec![vec![1], vec![0]]);
    }

    #[test]
    fn neighbor_duality_on_random_patterns() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let count = rng.gen_range(2..8);
            let sizes = vec![1usize; count];
            let mut a = SparseBlockMatrix::new(sizes.clone(), sizes.clone());
            for i in 0..count {
                for j in 0..count {
                    if i == j || rng.gen_bool(0.3) {
                        a.insert_block(i, j, mat(1, 1, &[1.0])).unwrap();
                    }
                }
            }
            let sets = derive_neighbor_sets(&a, None).unwrap();
            for i in 0..count {
                for j in 0..count {
                    let j_in_ni = sets.n[i].contains(&j);
                    let i_in_mj = sets.m[j].contains(&i);
                    assert_eq!(j_in_ni, i_in_mj);
                }
            }
        }
    }

    #[test]
    fn rank_validation_identity_ok() {
        let mut a = SparseBlockMatrix::new(vec![2], vec![2]);
        a.insert_block(0, 0, DMatrix::identity(2, 2)).unwrap();
        assert!(validate_full_row_rank(&a, 1e-10).is_ok());
    }

    #[test]
    fn rank_validation_flags_dependent_row() {
        let mut a = SparseBlockMatrix::new(vec![2], vec![2]);
        a.insert_block(0, 0, mat(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        match validate_full_row_rank(&a, 1e-10) {
            Err(Error::RankDeficient { rows }) => assert_eq!(rows, vec![1]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn rank_validation_wide_ok() {
        // A = [[1,0,1],[0,1,1]]: singular values sqrt(3), 1 -> full row rank.
        let mut a = SparseBlockMatrix::new(vec![2], vec![3]);
        a.insert_block(0, 0, mat(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]))
            .unwrap();
        assert!(validate_full_row_rank(&a, 1e-10).is_ok());
    }

    #[test]
    fn gather_follows_sorted_member_order() {
        // M_0 = {0, 3, 5} in a 6-block layout of scalar blocks.
        let layout = Layout::new(&[1, 1, 1, 1, 1, 1]);
        let nu = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = gather(&nu, &[0, 3, 5], &layout);
        assert_eq!(picked.as_slice(), &[1.0, 4.0, 6.0]);
    }

    #[test]
    fn gather_singleton() {
        let layout = Layout::new(&[2, 3]);
        let nu = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let picked = gather(&nu, &[1], &layout);
        assert_eq!(picked.as_slice(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn scatter_restores_positions() {
        let layout = Layout::new(&[1, 2, 1]);
        let nu = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let set = vec![0usize, 2];
        let local = gather(&nu, &set, &layout);
        let back = scatter(&local, &set, &layout);
        assert_eq!(back.as_slice(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn concatenated_row_apply_matches_global() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let row_sizes = vec![2, 1, 2];
        let col_sizes = vec![2, 2, 1];
        let mut a = SparseBlockMatrix::new(row_sizes.clone(), col_sizes.clone());
        for i in 0..3 {
            for j in 0..3 {
                if i == j || rng.gen_bool(0.5) {
                    let block = DMatrix::from_fn(row_sizes[i], col_sizes[j], |_, _| {
                        rng.gen_range(-1.0..1.0)
                    });
                    a.insert_block(i, j, block).unwrap();
                }
            }
        }
        let x = DVector::from_fn(a.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        let y = a.mul_vec(&x);
        let dense = a.assemble_dense();
        let y_dense = &dense * &x;
        assert!((y - y_dense).amax() < 1e-12);

        let z = DVector::from_fn(a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let w = a.tr_mul_vec(&z);
        let w_dense = dense.transpose() * &z;
        assert!((w - w_dense).amax() < 1e-12);
    }
}
