//! File formats: problem instances, metrics, and generator configs.
//!
//! Problems and metrics serialize to JSON documents whose numbers are
//! emitted in shortest round-trip form, so files round-trip losslessly.
//! Infinite box bounds are encoded as `null`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block_model::{
    BlockPartition, Bounds, CostMatrix, CoupledCost, LocalCost, ProblemInstance, SparseBlockMatrix,
};
use crate::dmpc::GeneratorConfig;
use crate::error::{Error, Result};
use crate::metrics::{BlockDiagonalMetric, Metric, SparseFactoredMetric};
use crate::sparse::{CscMatrix, LdlFactor};

#[derive(Serialize, Deserialize)]
struct BlockFile {
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
    /// Row-major entries.
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoundsFile {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CostMatrixFile {
    Diagonal { values: Vec<f64> },
    Dense { rows: usize, values: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CoupledFile {
    Box {
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
    },
    OneNorm {
        weight: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct CostFile {
    h: CostMatrixFile,
    zeta: Vec<f64>,
    #[serde(rename = "box")]
    bounds: Option<BoundsFile>,
    g: Option<CoupledFile>,
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    partition: BlockPartition,
    a_blocks: Vec<BlockFile>,
    b_blocks: Option<Vec<BlockFile>>,
    b: Vec<f64>,
    costs: Vec<CostFile>,
}

fn matrix_to_file(i: usize, j: usize, m: &DMatrix<f64>) -> BlockFile {
    let mut values = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            values.push(m[(r, c)]);
        }
    }
    BlockFile {
        i,
        j,
        rows: m.nrows(),
        cols: m.ncols(),
        values,
    }
}

fn matrix_from_file(f: &BlockFile) -> Result<DMatrix<f64>> {
    if f.values.len() != f.rows * f.cols {
        return Err(Error::Parse(format!(
            "block ({}, {}) has {} values for a {}x{} shape",
            f.i,
            f.j,
            f.values.len(),
            f.rows,
            f.cols
        )));
    }
    Ok(DMatrix::from_row_slice(f.rows, f.cols, &f.values))
}

fn bounds_to_file(b: &Bounds) -> BoundsFile {
    let enc = |v: f64| if v.is_finite() { Some(v) } else { None };
    BoundsFile {
        lower: b.lower.iter().map(|&v| enc(v)).collect(),
        upper: b.upper.iter().map(|&v| enc(v)).collect(),
    }
}

fn bounds_from_file(f: &BoundsFile) -> Result<Bounds> {
    let lower = DVector::from_iterator(
        f.lower.len(),
        f.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)),
    );
    let upper = DVector::from_iterator(
        f.upper.len(),
        f.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)),
    );
    Bounds::new(lower, upper)
}

/// Serialize a problem instance to its JSON document.
pub fn problem_to_json(problem: &ProblemInstance) -> Result<String> {
    let a_blocks = problem
        .a
        .iter_blocks()
        .map(|(i, j, m)| matrix_to_file(i, j, m))
        .collect();
    let b_blocks = problem.b_mat.as_ref().map(|b| {
        b.iter_blocks()
            .map(|(i, j, m)| matrix_to_file(i, j, m))
            .collect()
    });
    let costs = problem
        .costs
        .iter()
        .map(|c| CostFile {
            h: match &c.hessian {
                CostMatrix::Diagonal(d) => CostMatrixFile::Diagonal {
                    values: d.iter().copied().collect(),
                },
                CostMatrix::Dense(m) => CostMatrixFile::Dense {
                    rows: m.nrows(),
                    values: {
                        let mut v = Vec::with_capacity(m.nrows() * m.ncols());
                        for r in 0..m.nrows() {
                            for cc in 0..m.ncols() {
                                v.push(m[(r, cc)]);
                            }
                        }
                        v
                    },
                },
            },
            zeta: c.linear.iter().copied().collect(),
            bounds: c.bounds.as_ref().map(bounds_to_file),
            g: c.coupled.as_ref().map(|g| match g {
                CoupledCost::Box(b) => {
                    let bf = bounds_to_file(b);
                    CoupledFile::Box {
                        lower: bf.lower,
                        upper: bf.upper,
                    }
                }
                CoupledCost::OneNorm(w) => CoupledFile::OneNorm {
                    weight: w.iter().copied().collect(),
                },
            }),
        })
        .collect();
    let file = ProblemFile {
        partition: problem.partition.clone(),
        a_blocks,
        b_blocks,
        b: problem.b_vec.iter().copied().collect(),
        costs,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parse a problem instance from its JSON document, revalidating every
/// invariant on the way in.
pub fn problem_from_json(text: &str) -> Result<ProblemInstance> {
    let file: ProblemFile = serde_json::from_str(text)?;
    let partition = BlockPartition::new(
        file.partition.n_sizes.clone(),
        file.partition.m_sizes.clone(),
        file.partition.p_sizes.clone(),
    )?;
    let mut a = SparseBlockMatrix::new(partition.m_sizes.clone(), partition.n_sizes.clone());
    for blk in &file.a_blocks {
        a.insert_block(blk.i, blk.j, matrix_from_file(blk)?)?;
    }
    let b_mat = match &file.b_blocks {
        Some(blocks) => {
            let mut b = SparseBlockMatrix::new(partition.p_sizes.clone(), partition.n_sizes.clone());
            for blk in blocks {
                b.insert_block(blk.i, blk.j, matrix_from_file(blk)?)?;
            }
            Some(b)
        }
        None => None,
    };
    let costs = file
        .costs
        .iter()
        .map(|c| {
            let hessian = match &c.h {
                CostMatrixFile::Diagonal { values } => {
                    CostMatrix::Diagonal(DVector::from_vec(values.clone()))
                }
                CostMatrixFile::Dense { rows, values } => {
                    if values.len() != rows * rows {
                        return Err(Error::Parse("dense cost size mismatch".into()));
                    }
                    CostMatrix::Dense(DMatrix::from_row_slice(*rows, *rows, values))
                }
            };
            let bounds = c.bounds.as_ref().map(bounds_from_file).transpose()?;
            let coupled = match &c.g {
                Some(CoupledFile::Box { lower, upper }) => {
                    let bf = BoundsFile {
                        lower: lower.clone(),
                        upper: upper.clone(),
                    };
                    Some(CoupledCost::Box(bounds_from_file(&bf)?))
                }
                Some(CoupledFile::OneNorm { weight }) => {
                    Some(CoupledCost::OneNorm(DVector::from_vec(weight.clone())))
                }
                None => None,
            };
            Ok(LocalCost {
                hessian,
                linear: DVector::from_vec(c.zeta.clone()),
                bounds,
                coupled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProblemInstance::new(partition, costs, a, b_mat, DVector::from_vec(file.b))
}

pub fn write_problem_file<P: AsRef<Path>>(problem: &ProblemInstance, path: P) -> Result<()> {
    fs::write(path, problem_to_json(problem)?)?;
    Ok(())
}

pub fn read_problem_file<P: AsRef<Path>>(path: P) -> Result<ProblemInstance> {
    problem_from_json(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
struct SquareBlockFile {
    dim: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CscFile {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FactorFile {
    perm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricFile {
    Scalar {
        dim: usize,
        alpha: f64,
    },
    Diagonal {
        values: Vec<f64>,
    },
    BlockDiagonal {
        blocks: Vec<SquareBlockFile>,
    },
    SparseFactored {
        matrix: CscFile,
        factor: FactorFile,
        /// SHA-256 over the sparsity pattern, recording the factorization's
        /// provenance for offline-init / online-solve separation.
        pattern_hash: String,
    },
}

/// Hash of a CSC sparsity pattern (dimensions and index structure).
pub fn pattern_hash(m: &CscMatrix) -> String {
    let mut h = Sha256::new();
    h.update(m.nrows().to_le_bytes());
    h.update(m.ncols().to_le_bytes());
    for &p in m.col_ptr() {
        h.update(p.to_le_bytes());
    }
    for &r in m.row_idx() {
        h.update(r.to_le_bytes());
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a metric (kind tag plus payload).
pub fn metric_to_json(metric: &Metric) -> Result<String> {
    let file = match metric {
        Metric::Scalar { alpha, dim } => MetricFile::Scalar {
            dim: *dim,
            alpha: *alpha,
        },
        Metric::Diagonal { d } => MetricFile::Diagonal {
            values: d.iter().copied().collect(),
        },
        Metric::BlockDiagonal(b) => MetricFile::BlockDiagonal {
            blocks: b
                .blocks()
                .iter()
                .map(|m| SquareBlockFile {
                    dim: m.nrows(),
                    values: {
                        let mut v = Vec::with_capacity(m.nrows() * m.ncols());
                        for r in 0..m.nrows() {
                            for c in 0..m.ncols() {
                                v.push(m[(r, c)]);
                            }
                        }
                        v
                    },
                })
                .collect(),
        },
        Metric::SparseFactored(s) => {
            let m = s.matrix();
            let (l_col_ptr, l_row_idx, l_values) = s.factor().l_parts();
            MetricFile::SparseFactored {
                matrix: CscFile {
                    nrows: m.nrows(),
                    ncols: m.ncols(),
                    col_ptr: m.col_ptr().to_vec(),
                    row_idx: m.row_idx().to_vec(),
                    values: m.values().to_vec(),
                },
                factor: FactorFile {
                    perm: s.factor().perm().to_vec(),
                    l_col_ptr: l_col_ptr.to_vec(),
                    l_row_idx: l_row_idx.to_vec(),
                    l_values: l_values.to_vec(),
                    d: s.factor().d().to_vec(),
                },
                pattern_hash: pattern_hash(m),
            }
        }
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parse a metric, rebuilding solver state (Cholesky factors) and checking
/// the recorded pattern hash for sparse-factored metrics.
pub fn metric_from_json(text: &str) -> Result<Metric> {
    let file: MetricFile = serde_json::from_str(text)?;
    match file {
        MetricFile::Scalar { dim, alpha } => Metric::scalar(alpha, dim),
        MetricFile::Diagonal { values } => Metric::diagonal(DVector::from_vec(values)),
        MetricFile::BlockDiagonal { blocks } => {
            let mats = blocks
                .iter()
                .map(|b| {
                    if b.values.len() != b.dim * b.dim {
                        return Err(Error::Parse("metric block size mismatch".into()));
                    }
                    Ok(DMatrix::from_row_slice(b.dim, b.dim, &b.values))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Metric::BlockDiagonal(BlockDiagonalMetric::new(mats)?))
        }
        MetricFile::SparseFactored {
            matrix,
            factor,
            pattern_hash: recorded,
        } => {
            let mut triplets = Vec::with_capacity(matrix.values.len());
            for j in 0..matrix.ncols {
                for p in matrix.col_ptr[j]..matrix.col_ptr[j + 1] {
                    triplets.push((matrix.row_idx[p], j, matrix.values[p]));
                }
            }
            let csc = CscMatrix::from_triplets(matrix.nrows, matrix.ncols, &triplets);
            if pattern_hash(&csc) != recorded {
                return Err(Error::Parse(
                    "sparse metric pattern hash does not match the stored pattern".into(),
                ));
            }
            let ldl = LdlFactor::from_parts(
                factor.perm,
                factor.l_col_ptr,
                factor.l_row_idx,
                factor.l_values,
                factor.d,
            )?;
            Ok(Metric::SparseFactored(SparseFactoredMetric::from_parts(
                csc, ldl,
            )))
        }
    }
}

pub fn write_metric_file<P: AsRef<Path>>(metric: &Metric, path: P) -> Result<()> {
    fs::write(path, metric_to_json(metric)?)?;
    Ok(())
}

pub fn read_metric_file<P: AsRef<Path>>(path: P) -> Result<Metric> {
    metric_from_json(&fs::read_to_string(path)?)
}

pub fn read_generator_config<P: AsRef<Path>>(path: P) -> Result<GeneratorConfig> {
    let cfg: GeneratorConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_generator_config<P: AsRef<Path>>(config: &GeneratorConfig, path: P) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(config)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{exact_metric, scalar_metric, ScalarNorm};

    fn sample_problem() -> ProblemInstance {
        let partition = BlockPartition::new(vec![2, 1], vec![1, 1], vec![1, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![2, 1]);
        a.insert_block(0, 0, DMatrix::from_row_slice(1, 2, &[1.0, 0.25])).unwrap();
        a.insert_block(1, 0, DMatrix::from_row_slice(1, 2, &[0.5, -1.0])).unwrap();
        a.insert_block(1, 1, DMatrix::from_row_slice(1, 1, &[2.0])).unwrap();
        let mut b = SparseBlockMatrix::new(vec![1, 0], vec![2, 1]);
        b.insert_block(0, 1, DMatrix::from_row_slice(1, 1, &[1.5])).unwrap();
        let costs = vec![
            LocalCost {
                hessian: CostMatrix::Diagonal(DVector::from_vec(vec![2.0, 0.125])),
                linear: DVector::from_vec(vec![0.1, -0.2]),
                bounds: Some(
                    Bounds::new(DVector::from_vec(vec![-1.0, -2.0]), DVector::from_vec(vec![1.0, 2.0]))
                        .unwrap(),
                ),
                coupled: Some(CoupledCost::Box(
                    Bounds::new(
                        DVector::from_element(1, f64::NEG_INFINITY),
                        DVector::from_element(1, 0.7),
                    )
                    .unwrap(),
                )),
            },
            LocalCost {
                hessian: CostMatrix::Dense(DMatrix::from_row_slice(1, 1, &[3.0])),
                linear: DVector::from_vec(vec![0.3]),
                bounds: None,
                coupled: None,
            },
        ];
        ProblemInstance::new(partition, costs, a, Some(b), DVector::from_vec(vec![0.1, 0.9]))
            .unwrap()
    }

    #[test]
    fn problem_roundtrip_is_lossless() {
        let p = sample_problem();
        let text = problem_to_json(&p).unwrap();
        let back = problem_from_json(&text).unwrap();
        assert_eq!(back.partition, p.partition);
        assert_eq!(back.a, p.a);
        assert_eq!(back.b_mat, p.b_mat);
        assert_eq!(back.b_vec, p.b_vec);
        assert_eq!(back.costs, p.costs);
        // Second pass is byte-identical.
        assert_eq!(problem_to_json(&back).unwrap(), text);
    }

    #[test]
    fn problem_file_uses_declared_field_names() {
        let p = sample_problem();
        let text = problem_to_json(&p).unwrap();
        for field in ["partition", "a_blocks", "b_blocks", "costs", "zeta", "box"] {
            assert!(text.contains(field), "missing field name {field}");
        }
    }

    #[test]
    fn scalar_and_block_metric_roundtrip() {
        let m = Metric::scalar(2.5, 3).unwrap();
        let back = metric_from_json(&metric_to_json(&m).unwrap()).unwrap();
        assert!((back.to_dense() - m.to_dense()).norm() == 0.0);

        let blocks = vec![
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_row_slice(1, 1, &[4.0]),
        ];
        let bm = Metric::block_diagonal(blocks).unwrap();
        let back = metric_from_json(&metric_to_json(&bm).unwrap()).unwrap();
        assert_eq!(back.to_dense(), bm.to_dense());
    }

    #[test]
    fn sparse_metric_roundtrip_checks_pattern() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        // Equality-only chain instance.
        let partition = BlockPartition::new(vec![2, 2], vec![1, 1], vec![0, 0]).unwrap();
        let mut a = SparseBlockMatrix::new(vec![1, 1], vec![2, 2]);
        a.insert_block(0, 0, DMatrix::from_fn(1, 2, |_, _| rng.gen_range(0.5..1.5))).unwrap();
        a.insert_block(0, 1, DMatrix::from_fn(1, 2, |_, _| rng.gen_range(-0.5..0.5))).unwrap();
        a.insert_block(1, 1, DMatrix::from_fn(1, 2, |_, _| rng.gen_range(0.5..1.5))).unwrap();
        let costs = (0..2)
            .map(|_| LocalCost {
                hessian: CostMatrix::Diagonal(DVector::from_vec(vec![1.0, 2.0])),
                linear: DVector::zeros(2),
                bounds: None,
                coupled: None,
            })
            .collect();
        let p = ProblemInstance::new(partition, costs, a, None, DVector::zeros(2)).unwrap();
        let l = exact_metric(&p).unwrap();
        let text = metric_to_json(&l).unwrap();
        let back = metric_from_json(&text).unwrap();
        let v = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(l.solve(&v), back.solve(&v));
        assert!(text.contains("pattern_hash"));

        // Corrupting the pattern is caught.
        let tampered = text.replace("\"pattern_hash\": \"", "\"pattern_hash\": \"00");
        assert!(metric_from_json(&tampered).is_err());

        let _ = scalar_metric(&p, ScalarNorm::TwoNorm).unwrap();
    }
}
