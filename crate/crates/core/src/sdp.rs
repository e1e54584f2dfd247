//! Log-det barrier path-following solver for the small block-diagonal
//! semidefinite programs arising in local metric selection:
//!
//! ```text
//! minimize    tr(blkdiag(X_1, ..., X_B))
//! subject to  blkdiag(X_1, ..., X_B) - G  positive semidefinite
//! ```
//!
//! Problem dimensions are neighborhood-sized (tens), so dense Newton steps
//! over the block-diagonal symmetric subspace are cheap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outcome of one barrier solve.
#[derive(Debug, Clone)]
pub struct BlockSdpSolution {
    pub blocks: Vec<DMatrix<f64>>,
    pub trace: f64,
    pub newton_steps: usize,
}

/// Index map of the block-diagonal symmetric variable space.
struct VarMap {
    /// (block, local row, local col) with row <= col, plus global offsets.
    entries: Vec<(usize, usize, usize)>,
    offsets: Vec<usize>,
}

impl VarMap {
    fn new(block_sizes: &[usize]) -> Self {
        let mut entries = Vec::new();
        let mut offsets = Vec::with_capacity(block_sizes.len());
        let mut acc = 0;
        for (b, &d) in block_sizes.iter().enumerate() {
            offsets.push(acc);
            acc += d;
            for r in 0..d {
                for c in r..d {
                    entries.push((b, r, c));
                }
            }
        }
        Self { entries, offsets }
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    /// Global (row, col) of variable `a`.
    fn global(&self, a: usize) -> (usize, usize) {
        let (b, r, c) = self.entries[a];
        (self.offsets[b] + r, self.offsets[b] + c)
    }
}

fn add_block_diag(s: &mut DMatrix<f64>, vars: &VarMap, x: &DVector<f64>, sign: f64) {
    for a in 0..vars.len() {
        let (i, j) = vars.global(a);
        s[(i, j)] += sign * x[a];
        if i != j {
            s[(j, i)] += sign * x[a];
        }
    }
}

/// Minimize `tr(blkdiag(X))` subject to `blkdiag(X) >= g` (as matrices).
///
/// `g` must be symmetric with dimension `sum(block_sizes)`. The returned
/// blocks satisfy the constraint up to the path-following gap; the caller
/// decides how to post-verify. Errors on Newton breakdown or iteration
/// exhaustion.
pub fn solve_block_diag_sdp(
    g: &DMatrix<f64>,
    block_sizes: &[usize],
    max_newton: usize,
    gap_tol: f64,
) -> Result<BlockSdpSolution> {
    let dim: usize = block_sizes.iter().sum();
    if g.nrows() != dim || g.ncols() != dim {
        return Err(Error::DimensionMismatch {
            context: "block SDP".into(),
            expected: dim,
            found: g.nrows(),
        });
    }
    if dim == 0 {
        return Ok(BlockSdpSolution {
            blocks: block_sizes.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
            trace: 0.0,
            newton_steps: 0,
        });
    }

    // Normalize so the barrier runs at unit scale.
    let scale = (0..dim).map(|k| g[(k, k)].abs()).fold(0.0f64, f64::max).max(1e-300);
    let gn = g / scale;

    let vars = VarMap::new(block_sizes);
    let nv = vars.len();
    let q = block_sizes.len() as f64;

    // Strictly feasible start: the blockwise Cauchy-Schwarz point plus margin.
    let mut x = DVector::zeros(nv);
    for a in 0..nv {
        let (i, j) = vars.global(a);
        if i == j {
            x[a] = q * gn[(i, i)] + 1e-2;
        } else {
            x[a] = q * gn[(i, j)];
        }
    }

    let slack = |x: &DVector<f64>| -> DMatrix<f64> {
        let mut s = -gn.clone();
        add_block_diag(&mut s, &vars, x, 1.0);
        s
    };
    if slack(&x).cholesky().is_none() {
        return Err(Error::NotPositiveDefinite {
            context: "block SDP initial point".into(),
        });
    }

    let mut t = 1.0f64;
    let mu = 10.0f64;
    let nu = dim as f64; // barrier parameter of the PSD cone
    let mut steps = 0usize;

    loop {
        // Centering: damped Newton on t*tr(X) - log det(S).
        loop {
            if steps >= max_newton {
                return Err(Error::NonConvergence {
                    what: "block SDP barrier".into(),
                    max_iter: max_newton,
                });
            }
            steps += 1;
            let s = slack(&x);
            let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                context: "block SDP slack".into(),
            })?;
            let w = chol.inverse();

            // Gradient and Hessian over the block-diagonal subspace.
            let mut grad = DVector::zeros(nv);
            for a in 0..nv {
                let (i, j) = vars.global(a);
                if i == j {
                    grad[a] = t - w[(i, i)];
                } else {
                    grad[a] = -2.0 * w[(i, j)];
                }
            }
            let mut hess = DMatrix::zeros(nv, nv);
            for a in 0..nv {
                let (i, j) = vars.global(a);
                for b in a..nv {
                    let (k, l) = vars.global(b);
                    let v = if i == j && k == l {
                        w[(i, k)] * w[(i, k)]
                    } else if i == j {
                        2.0 * w[(i, k)] * w[(i, l)]
                    } else if k == l {
                        2.0 * w[(i, k)] * w[(j, k)]
                    } else {
                        2.0 * (w[(i, k)] * w[(j, l)] + w[(i, l)] * w[(j, k)])
                    };
                    hess[(a, b)] = v;
                    hess[(b, a)] = v;
                }
            }
            // Levenberg regularization keeps the reduced Hessian factorable.
            for a in 0..nv {
                hess[(a, a)] *= 1.0 + 1e-12;
                hess[(a, a)] += 1e-14;
            }
            let hchol = hess.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                context: "block SDP Newton system".into(),
            })?;
            let dx = hchol.solve(&(-&grad));
            let decrement_sq = -grad.dot(&dx);
            if !decrement_sq.is_finite() {
                return Err(Error::NonFinite("block SDP Newton decrement".into()));
            }
            if decrement_sq <= 2.0 * 1e-14 {
                break;
            }
            let lambda = decrement_sq.max(0.0).sqrt();
            let mut alpha = if lambda <= 0.25 { 1.0 } else { 1.0 / (1.0 + lambda) };
            // Backtrack into the cone.
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &x + &dx * alpha;
                if slack(&cand).cholesky().is_some() {
                    x = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    what: "block SDP line search".into(),
                    max_iter: 60,
                });
            }
            if lambda <= 1e-7 {
                break;
            }
        }
        if nu / t <= gap_tol {
            break;
        }
        t *= mu;
    }

    // Assemble blocks at the original scale.
    let mut blocks: Vec<DMatrix<f64>> = block_sizes.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    for a in 0..vars.len() {
        let (b, r, c) = vars.entries[a];
        let v = x[a] * scale;
        blocks[b][(r, c)] = v;
        blocks[b][(c, r)] = v;
    }
    let trace = blocks.iter().map(|m| m.trace()).sum();
    Ok(BlockSdpSolution {
        blocks,
        trace,
        newton_steps: steps,
    })
}

/// Minimize `w' theta` subject to `diag(theta) >= g` (as matrices).
///
/// Specialization of the block solver to scalar blocks with a weighted
/// objective; the weights must be positive. Used by the whitened metric
/// chooser, where `theta` parametrizes full member blocks in a
/// per-member eigenbasis and the weights carry the original trace.
pub fn solve_weighted_diagonal_sdp(
    g: &DMatrix<f64>,
    weights: &DVector<f64>,
    max_newton: usize,
    gap_tol: f64,
) -> Result<DVector<f64>> {
    let dim = g.nrows();
    if g.ncols() != dim || weights.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "weighted diagonal SDP".into(),
            expected: dim,
            found: weights.len(),
        });
    }
    if dim == 0 {
        return Ok(DVector::zeros(0));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Invalid("objective weights must be positive".into()));
    }
    let scale = (0..dim).map(|k| g[(k, k)].abs()).fold(0.0f64, f64::max).max(1e-300);
    let gn = g / scale;

    // Gershgorin start: diagonally dominant, strictly feasible.
    let mut theta = DVector::from_fn(dim, |k, _| {
        let row_sum: f64 = (0..dim).map(|l| gn[(k, l)].abs()).sum();
        row_sum + 1e-2
    });

    let slack = |theta: &DVector<f64>| -> DMatrix<f64> {
        let mut s = -gn.clone();
        for k in 0..dim {
            s[(k, k)] += theta[k];
        }
        s
    };

    let mut t = 1.0f64;
    let mu = 20.0f64;
    let nu = dim as f64;
    let mut steps = 0usize;
    loop {
        loop {
            if steps >= max_newton {
                return Err(Error::NonConvergence {
                    what: "weighted diagonal SDP barrier".into(),
                    max_iter: max_newton,
                });
            }
            steps += 1;
            let s = slack(&theta);
            let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                context: "weighted diagonal SDP slack".into(),
            })?;
            let w = chol.inverse();
            let grad = DVector::from_fn(dim, |k, _| t * weights[k] - w[(k, k)]);
            let mut hess = DMatrix::from_fn(dim, dim, |k, l| w[(k, l)] * w[(k, l)]);
            for k in 0..dim {
                hess[(k, k)] *= 1.0 + 1e-12;
                hess[(k, k)] += 1e-14;
            }
            let hchol = hess.cholesky().ok_or(Error::NotPositiveDefinite {
                context: "weighted diagonal SDP Newton system".into(),
            })?;
            let dtheta = hchol.solve(&(-&grad));
            let decrement_sq = -grad.dot(&dtheta);
            if !decrement_sq.is_finite() {
                return Err(Error::NonFinite("weighted diagonal SDP decrement".into()));
            }
            if decrement_sq <= 2.0 * 1e-14 {
                break;
            }
            let lambda = decrement_sq.max(0.0).sqrt();
            let mut alpha = if lambda <= 0.25 { 1.0 } else { 1.0 / (1.0 + lambda) };
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &theta + &dtheta * alpha;
                if slack(&cand).cholesky().is_some() {
                    theta = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    what: "weighted diagonal SDP line search".into(),
                    max_iter: 60,
                });
            }
            if lambda <= 0.05 {
                break;
            }
        }
        if nu / t <= gap_tol {
            break;
        }
        t *= mu;
    }
    Ok(theta * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_scalar_blocks_optimum() {
        // min a + b s.t. diag(a,b) >= [[2,1],[1,2]]. KKT: (a-2)(b-2) >= 1,
        // optimum at a = b = 3, trace 6.
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let sol = solve_block_diag_sdp(&g, &[1, 1], 400, 1e-7).unwrap();
        assert!((sol.trace - 6.0).abs() < 1e-4, "trace {}", sol.trace);
        assert!((sol.blocks[0][(0, 0)] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn single_block_is_tight() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = solve_block_diag_sdp(&g, &[2], 400, 1e-9).unwrap();
        assert!((&sol.blocks[0] - &g).norm() < 1e-6);
    }

    #[test]
    fn weighted_diagonal_matches_unit_weight_optimum() {
        // With unit weights this is the diag(a,b) >= [[2,1],[1,2]] problem.
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let theta =
            solve_weighted_diagonal_sdp(&g, &DVector::from_element(2, 1.0), 600, 1e-7).unwrap();
        assert!((theta[0] + theta[1] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn weighted_diagonal_respects_weights() {
        // Heavier weight on the first variable pushes the optimum toward
        // a smaller first component: min w1 a + w2 b, (a-2)(b-2) >= 1.
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let w = DVector::from_vec(vec![4.0, 1.0]);
        let theta = solve_weighted_diagonal_sdp(&g, &w, 600, 1e-8).unwrap();
        // KKT: a = 2 + 1/sqrt(w1), b = 2 + sqrt(w1) for w2 = 1.
        assert!((theta[0] - 2.5).abs() < 1e-3, "a {}", theta[0]);
        assert!((theta[1] - 4.0).abs() < 1e-3, "b {}", theta[1]);
    }

    #[test]
    fn feasibility_of_random_solutions() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let sizes = vec![
                rng.gen_range(1..3usize),
                rng.gen_range(1..3usize),
                rng.gen_range(1..3usize),
            ];
            let dim: usize = sizes.iter().sum();
            let f = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let g = &f * f.transpose();
            let sol = solve_block_diag_sdp(&g, &sizes, 600, 1e-8).unwrap();
            let mut l = DMatrix::zeros(dim, dim);
            let mut off = 0;
            for (b, &d) in sizes.iter().enumerate() {
                l.view_mut((off, off), (d, d)).copy_from(&sol.blocks[b]);
                off += d;
            }
            let diff = &l - &g;
            let eig = diff.symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            assert!(min_eig >= -1e-8 * g.trace().max(1.0), "min eig {min_eig}");
        }
    }
}
