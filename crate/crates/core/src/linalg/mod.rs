//! Dense real linear algebra for the matrix workload.
//!
//! Everything here is binary64 and allocation-light; the eigenvalue routines
//! operate on copies and never touch their inputs.

mod eigen;
mod matrix;
mod oracle;

pub use eigen::{balance, chop, eig_qr, eig_qr_with, hessenberg, EigenSet, CHOP_EPS, DEFLATION_TOL};
pub use matrix::DenseMatrix;
pub use oracle::{charpoly, oracle_charpoly_eigs, toeplitz_tridiag_eigs, ORACLE_MAX_ORDER};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("entry count {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("matrix order {0} exceeds the oracle limit of {ORACLE_MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("tridiagonal order must be at least 1")]
    EmptyOrder,
}

/// Constant-diagonal tridiagonal matrix description.
///
/// `sup` fills the `(i, i+1)` positions and `sub` the `(i+1, i)` positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TridiagonalSpec {
    pub n: usize,
    pub diag: f64,
    pub sup: f64,
    pub sub: f64,
}

impl TridiagonalSpec {
    pub fn new(n: usize, diag: f64, sup: f64, sub: f64) -> Self {
        Self { n, diag, sup, sub }
    }
}

pub fn build_tridiagonal(spec: &TridiagonalSpec) -> Result<DenseMatrix, LinalgError> {
    let n = spec.n;
    if n == 0 {
        return Err(LinalgError::EmptyOrder);
    }
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = spec.diag;
        if i + 1 < n {
            m[(i, i + 1)] = spec.sup;
            m[(i + 1, i)] = spec.sub;
        }
    }
    // keeps the finite-entries invariant for callers passing inf/NaN
    DenseMatrix::new(n, n, m.into_vec())
}

fn check_product(a: &DenseMatrix, b: &DenseMatrix) -> Result<(), LinalgError> {
    if a.cols() != b.rows() {
        return Err(LinalgError::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

// Each output row is computed independently with a fixed summation order, so
// the sequential and parallel products are bit-identical.
fn product_row(a_row: &[f64], b: &DenseMatrix, out: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
            *o += aik * bkj;
        }
    }
}

/// Matrix product on the calling thread.
pub fn mat_mul_sequential(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    check_product(a, b)?;
    let mut data = vec![0.0; a.rows() * b.cols()];
    if b.cols() > 0 {
        for (a_row, out) in a.row_iter().zip(data.chunks_mut(b.cols())) {
            product_row(a_row, b, out);
        }
    }
    DenseMatrix::new(a.rows(), b.cols(), data)
}

/// Matrix product with output rows distributed over the rayon pool.
#[cfg(feature = "parallel")]
pub fn mat_mul_parallel(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    use rayon::prelude::*;

    check_product(a, b)?;
    let mut data = vec![0.0; a.rows() * b.cols()];
    if b.cols() > 0 {
        data.par_chunks_mut(b.cols())
            .enumerate()
            .for_each(|(i, out)| product_row(a.row(i), b, out));
    }
    DenseMatrix::new(a.rows(), b.cols(), data)
}

/// Multiply-adds below which [`mat_mul`] stays on the calling thread.
pub const PARALLEL_MIN_WORK: usize = 1 << 18;

/// Standard matrix product. With the `parallel` feature, products of at
/// least [`PARALLEL_MIN_WORK`] multiply-adds use the rayon pool; results are
/// bit-identical either way.
pub fn mat_mul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    #[cfg(feature = "parallel")]
    {
        if a.rows().saturating_mul(a.cols()).saturating_mul(b.cols()) >= PARALLEL_MIN_WORK {
            mat_mul_parallel(a, b)
        } else {
            mat_mul_sequential(a, b)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        mat_mul_sequential(a, b)
    }
}

pub fn trace(m: &DenseMatrix) -> Result<f64, LinalgError> {
    let n = m.require_square()?;
    Ok((0..n).map(|i| m[(i, i)]).sum())
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(m: &DenseMatrix) -> Result<f64, LinalgError> {
    let n = m.require_square()?;
    let mut lu = m.clone();
    let mut det = 1.0;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&x, &y| lu[(x, k)].abs().total_cmp(&lu[(y, k)].abs()))
            .expect("non-empty pivot range");
        if lu[(pivot, k)] == 0.0 {
            return Ok(0.0);
        }
        if pivot != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = tmp;
            }
            det = -det;
        }
        let pkk = lu[(k, k)];
        det *= pkk;
        for i in k + 1..n {
            let factor = lu[(i, k)] / pkk;
            if factor == 0.0 {
                continue;
            }
            for j in k + 1..n {
                lu[(i, j)] -= factor * lu[(k, j)];
            }
        }
    }
    Ok(det)
}
