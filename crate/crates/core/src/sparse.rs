//! Minimal sparse machinery: CSC storage, reverse Cuthill-McKee ordering,
//! and an up-looking LDL^T factorization for symmetric positive definite
//! matrices. Factors are computed once offline; online use is one forward
//! and one backward substitution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(r, c, v) in triplets {
            by_col[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in &mut by_col {
            col.sort_unstable_by_key(|&(r, _)| r);
            let mut k = 0;
            while k < col.len() {
                let r = col[k].0;
                let mut v = 0.0;
                while k < col.len() && col[k].0 == r {
                    v += col[k].1;
                    k += 1;
                }
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        range.map(move |p| (self.row_idx[p], self.values[p]))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                out[(i, j)] += v;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            for (i, v) in self.col(j) {
                y[i] += v * xj;
            }
        }
        y
    }

    /// Symmetric permutation `P A P^T` for a square matrix, with
    /// `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> CscMatrix {
        assert_eq!(self.nrows, self.ncols);
        let n = self.nrows;
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut triplets = Vec::with_capacity(self.nnz());
        for j in 0..n {
            for (i, v) in self.col(j) {
                triplets.push((inv[i], inv[j], v));
            }
        }
        CscMatrix::from_triplets(n, n, &triplets)
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in a.col(j) {
            if i != j {
                adj[j].push(i);
                adj[i].push(j);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // Start each component from a minimum-degree node.
        let start = match (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
        {
            Some(s) => s,
            None => break,
        };
        visited[start] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// LDL^T factorization of a symmetric positive definite matrix with a
/// symmetric fill-reducing permutation. `P A P^T = L D L^T` with `L` unit
/// lower triangular (unit diagonal implicit) and `D` positive diagonal.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    /// Factor a symmetric positive definite CSC matrix. Both triangles of
    /// `a` may be stored; only entries with `row <= col` after permutation
    /// are consumed. When `perm` is `None` a reverse Cuthill-McKee ordering
    /// is applied.
    pub fn factor(a: &CscMatrix, perm: Option<Vec<usize>>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Invalid("LDL needs a square matrix".into()));
        }
        let n = a.ncols();
        let perm = perm.unwrap_or_else(|| reverse_cuthill_mckee(a));
        if perm.len() != n {
            return Err(Error::Invalid("permutation length mismatch".into()));
        }
        let ap = a.permute_symmetric(&perm);

        // Symbolic phase: elimination tree and column counts from the upper
        // triangle of the permuted matrix.
        let mut parent = vec![usize::MAX; n];
        let mut l_nz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for (i, _) in ap.col(k) {
                if i >= k {
                    continue;
                }
                let mut j = i;
                while flag[j] != k {
                    if parent[j] == usize::MAX {
                        parent[j] = k;
                    }
                    l_nz[j] += 1;
                    flag[j] = k;
                    j = parent[j];
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + l_nz[k];
        }
        let total = l_col_ptr[n];
        let mut l_row_idx = vec![0usize; total];
        let mut l_values = vec![0.0f64; total];
        let mut d = vec![0.0f64; n];

        // Numeric phase, up-looking.
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut l_next = vec![0usize; n];
        for k in 0..n {
            y[k] = 0.0;
            let mut top = n;
            flag[k] = k;
            for (i, v) in ap.col(k) {
                if i > k {
                    continue;
                }
                y[i] += v;
                let mut len = 0usize;
                let mut j = i;
                while j != k && flag[j] != k {
                    pattern[len] = j;
                    len += 1;
                    flag[j] = k;
                    j = parent[j];
                }
                // Move the path onto the stack in topological position.
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for idx in top..n {
                let j = pattern[idx];
                let yj = y[j];
                y[j] = 0.0;
                let start = l_col_ptr[j];
                for p in start..(start + l_next[j]) {
                    y[l_row_idx[p]] -= l_values[p] * yj;
                }
                let l_kj = yj / d[j];
                d[k] -= l_kj * yj;
                let p = l_col_ptr[j] + l_next[j];
                l_row_idx[p] = k;
                l_values[p] = l_kj;
                l_next[j] += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: format!("LDL pivot {k}"),
                });
            }
        }
        Ok(Self {
            n,
            perm,
            l_col_ptr,
            l_row_idx,
            l_values,
            d,
        })
    }

    /// Rebuild a factor from stored parts (file import path). The caller is
    /// responsible for the parts describing a valid factorization.
    pub fn from_parts(
        perm: Vec<usize>,
        l_col_ptr: Vec<usize>,
        l_row_idx: Vec<usize>,
        l_values: Vec<f64>,
        d: Vec<f64>,
    ) -> Result<Self> {
        let n = d.len();
        if perm.len() != n || l_col_ptr.len() != n + 1 {
            return Err(Error::Parse("inconsistent factor parts".into()));
        }
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                context: "imported factor diagonal".into(),
            });
        }
        Ok(Self {
            n,
            perm,
            l_col_ptr,
            l_row_idx,
            l_values,
            d,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn l_parts(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.l_col_ptr, &self.l_row_idx, &self.l_values)
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Solve `A x = b` via one forward and one backward substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = DVector::zeros(n);
        for new in 0..n {
            x[new] = b[self.perm[new]];
        }
        // Forward: L z = x (unit diagonal).
        for j in 0..n {
            let xj = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                x[self.l_row_idx[p]] -= self.l_values[p] * xj;
            }
        }
        // Diagonal.
        for j in 0..n {
            x[j] /= self.d[j];
        }
        // Backward: L^T w = x.
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                s -= self.l_values[p] * x[self.l_row_idx[p]];
            }
            x[j] = s;
        }
        let mut out = DVector::zeros(n);
        for new in 0..n {
            out[self.perm[new]] = x[new];
        }
        out
    }

    /// Apply `A v` by reconstructing from the factor: `P^T (L D L^T) P v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = DVector::zeros(n);
        for new in 0..n {
            x[new] = v[self.perm[new]];
        }
        // w = L^T x
        let mut w = x.clone();
        for j in 0..n {
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                w[j] += self.l_values[p] * x[self.l_row_idx[p]];
            }
        }
        for j in 0..n {
            w[j] *= self.d[j];
        }
        // y = L w
        let mut y = w.clone();
        for j in (0..n).rev() {
            let wj = w[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                y[self.l_row_idx[p]] += self.l_values[p] * wj;
            }
        }
        let mut out = DVector::zeros(n);
        for new in 0..n {
            out[self.perm[new]] = y[new];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_spd_sparse(n: usize, rng: &mut impl Rng) -> CscMatrix {
        // Strong diagonal plus a few symmetric off-diagonals.
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, 4.0 + rng.gen_range(0.0..2.0)));
        }
        for _ in 0..(2 * n) {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                let v = rng.gen_range(-0.4..0.4);
                triplets.push((i, j, v));
                triplets.push((j, i, v));
            }
        }
        CscMatrix::from_triplets(n, n, &triplets)
    }

    #[test]
    fn ldl_matches_dense_solve() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..25);
            let a = random_spd_sparse(n, &mut rng);
            let f = LdlFactor::factor(&a, None).unwrap();
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let x = f.solve(&b);
            let dense = a.to_dense();
            let x_ref = dense.clone().cholesky().unwrap().solve(&b);
            assert!((x - x_ref).amax() < 1e-10);
        }
    }

    #[test]
    fn ldl_apply_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = random_spd_sparse(15, &mut rng);
        let f = LdlFactor::factor(&a, None).unwrap();
        let v = DVector::from_fn(15, |_, _| rng.gen_range(-1.0..1.0));
        let back = f.apply(&f.solve(&v));
        assert!((back - &v).amax() < 1e-10 * v.amax().max(1.0));
    }

    #[test]
    fn ldl_rejects_indefinite() {
        let triplets = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)];
        let a = CscMatrix::from_triplets(2, 2, &triplets);
        assert!(matches!(
            LdlFactor::factor(&a, None),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = random_spd_sparse(30, &mut rng);
        let p = reverse_cuthill_mckee(&a);
        let mut seen = vec![false; 30];
        for &v in &p {
            assert!(!seen[v]);
            seen[v] = true;
        }
    }
}
