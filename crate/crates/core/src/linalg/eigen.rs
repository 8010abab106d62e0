use std::cmp::Ordering;
use std::fmt;

use num_complex::Complex64;

use super::{DenseMatrix, LinalgError};

/// Relative deflation threshold for negligible subdiagonal entries.
pub const DEFLATION_TOL: f64 = 1e-12;

/// Default threshold below which `chop` zeroes a component.
pub const CHOP_EPS: f64 = 1e-10;

/// Multiset of (possibly complex) eigenvalues.
///
/// Values are kept in a canonical order: descending modulus, then descending
/// real part, then descending imaginary part.
#[derive(Clone, PartialEq)]
pub struct EigenSet {
    values: Vec<Complex64>,
}

fn key_order(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then_with(|| b.re.total_cmp(&a.re))
        .then_with(|| b.im.total_cmp(&a.im))
}

impl EigenSet {
    pub fn new(mut values: Vec<Complex64>) -> Self {
        values.sort_by(key_order);
        Self { values }
    }

    pub fn from_real(values: impl IntoIterator<Item = f64>) -> Self {
        Self::new(values.into_iter().map(|re| Complex64::new(re, 0.0)).collect())
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> Complex64 {
        self.values.iter().sum()
    }

    pub fn product(&self) -> Complex64 {
        self.values.iter().product()
    }

    /// Largest distance between paired eigenvalues of `self` and `other`.
    ///
    /// Walks `self` in key order and pairs each value with the nearest
    /// still-unpaired value of `other`, so two eigenvalues whose moduli tie up
    /// to rounding still pair correctly. Returns `None` when the cardinalities
    /// differ.
    pub fn max_matched_distance(&self, other: &EigenSet) -> Option<f64> {
        if self.len() != other.len() {
            return None;
        }
        let mut used = vec![false; other.len()];
        let mut worst = 0.0f64;
        for a in &self.values {
            let (j, d) = other
                .values
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, b)| (j, (a - b).norm()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("equal cardinality");
            used[j] = true;
            worst = worst.max(d);
        }
        Some(worst)
    }

    pub fn matches(&self, other: &EigenSet, tol: f64) -> bool {
        self.max_matched_distance(other).is_some_and(|d| d <= tol)
    }

    /// True when the multiset is closed under complex conjugation within `tol`.
    pub fn is_conjugate_closed(&self, tol: f64) -> bool {
        let conj = EigenSet::new(self.values.iter().map(|z| z.conj()).collect());
        self.matches(&conj, tol)
    }
}

impl fmt::Debug for EigenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(&self.values).finish()
    }
}

/// Zeroes every real or imaginary component whose magnitude is below `eps`.
pub fn chop(set: &EigenSet, eps: f64) -> EigenSet {
    let cut = |x: f64| if x.abs() < eps { 0.0 } else { x };
    EigenSet::new(
        set.values
            .iter()
            .map(|z| Complex64::new(cut(z.re), cut(z.im)))
            .collect(),
    )
}

/// Reduces a square matrix to upper Hessenberg form by Householder
/// similarity transforms. Entries below the first subdiagonal are exactly 0.
pub fn hessenberg(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = m.require_square()?;
    let mut h = m.clone();
    if n < 3 {
        return Ok(h);
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let len = n - k - 1;
        let norm = (k + 1..n).map(|i| h[(i, k)] * h[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for (idx, i) in (k + 1..n).enumerate() {
            v[idx] = h[(i, k)];
        }
        v[0] -= alpha;
        let vv: f64 = v[..len].iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        let beta = 2.0 / vv;

        // H <- (I - beta v v^T) H
        for j in 0..n {
            let s: f64 = (0..len).map(|i| v[i] * h[(k + 1 + i, j)]).sum();
            let s = s * beta;
            for i in 0..len {
                h[(k + 1 + i, j)] -= s * v[i];
            }
        }
        // H <- H (I - beta v v^T)
        for i in 0..n {
            let s: f64 = (0..len).map(|j| h[(i, k + 1 + j)] * v[j]).sum();
            let s = s * beta;
            for j in 0..len {
                h[(i, k + 1 + j)] -= s * v[j];
            }
        }
        h[(k + 1, k)] = alpha;
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
    }
    Ok(h)
}

/// Diagonal similarity scaling applied before the QR iteration.
///
/// A tridiagonal matrix whose off-diagonal pairs all have positive products
/// (or are both zero) is mapped to the symmetric tridiagonal matrix with
/// off-diagonals `sign(a[i][i+1]) * sqrt(a[i][i+1] * a[i+1][i])`, which is
/// diagonally similar to it. Any other matrix is balanced by powers of two so
/// that each row and column pair has comparable off-diagonal norms.
pub fn balance(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    m.require_square()?;
    Ok(symmetrize_tridiagonal(m).unwrap_or_else(|| balance_radix(m)))
}

fn symmetrize_tridiagonal(m: &DenseMatrix) -> Option<DenseMatrix> {
    let n = m.rows();
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) > 1 && m[(i, j)] != 0.0 {
                return None;
            }
        }
    }
    let mut out = m.clone();
    for i in 0..n.saturating_sub(1) {
        let (up, down) = (m[(i, i + 1)], m[(i + 1, i)]);
        let prod = up * down;
        if prod > 0.0 {
            let off = prod.sqrt().copysign(up);
            out[(i, i + 1)] = off;
            out[(i + 1, i)] = off;
        } else if up != 0.0 || down != 0.0 {
            return None;
        }
    }
    Some(out)
}

fn balance_radix(m: &DenseMatrix) -> DenseMatrix {
    const RADIX: f64 = 2.0;
    let n = m.rows();
    let mut a = m.clone();
    loop {
        let mut converged = true;
        for i in 0..n {
            let mut col = 0.0;
            let mut row = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                col += a[(j, i)].abs();
                row += a[(i, j)].abs();
            }
            if col == 0.0 || row == 0.0 {
                continue;
            }
            let total = col + row;
            let mut f = 1.0;
            let mut c = col;
            while c < row / RADIX {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            while c > row * RADIX {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + row) / f < 0.95 * total {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
        if converged {
            return a;
        }
    }
}

/// Eigenvalues with the default deflation tolerance and an iteration budget
/// of `100 * n` QR steps.
pub fn eig_qr(m: &DenseMatrix) -> Result<EigenSet, LinalgError> {
    eig_qr_with(m, DEFLATION_TOL, 100 * m.rows().max(1))
}

/// Eigenvalues by balancing and Hessenberg reduction followed by Francis
/// double-shift QR with deflation.
///
/// A subdiagonal entry `h[l][l-1]` is treated as zero once
/// `|h[l][l-1]| <= tol * (|h[l-1][l-1]| + |h[l][l]|)`; when both diagonal
/// entries vanish the matrix norm replaces their sum. Exceptional shifts are
/// applied after 10 and 30 stagnant iterations on the same block.
pub fn eig_qr_with(m: &DenseMatrix, tol: f64, max_sweeps: usize) -> Result<EigenSet, LinalgError> {
    let nn = m.require_square()?;
    if nn == 0 {
        return Ok(EigenSet::new(Vec::new()));
    }
    let mut h = hessenberg(&balance(m)?)?;
    let mut re = vec![0.0; nn];
    let mut im = vec![0.0; nn];

    let eps = f64::EPSILON;
    let norm: f64 = (0..nn)
        .map(|i| (i.saturating_sub(1)..nn).map(|j| h[(i, j)].abs()).sum::<f64>())
        .sum();

    let mut n = nn as isize - 1;
    let mut exshift = 0.0;
    let mut iter = 0usize;
    let mut sweeps = 0usize;
    let (mut p, mut q, mut r, mut s, mut z);
    let mut w;
    let (mut x, mut y);

    while n >= 0 {
        let nu = n as usize;
        // locate the bottom of the unreduced block
        let mut l = nu;
        while l > 0 {
            let mut scale = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if scale == 0.0 {
                scale = norm;
            }
            if h[(l, l - 1)].abs() <= tol * scale {
                break;
            }
            l -= 1;
        }

        if l == nu {
            re[nu] = h[(nu, nu)] + exshift;
            im[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                re[nu - 1] = x + z;
                re[nu] = if z != 0.0 { x - w / z } else { x + z };
                im[nu - 1] = 0.0;
                im[nu] = 0.0;
            } else {
                re[nu - 1] = x + p;
                re[nu] = x + p;
                im[nu - 1] = z;
                im[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(LinalgError::NoConvergence(max_sweeps));
            }
            x = h[(nu, nu)];
            y = h[(nu - 1, nu - 1)];
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];

            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // look for two consecutive small subdiagonal entries
            let mut mm = nu - 2;
            loop {
                z = h[(mm, mm)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(mm + 1, mm)] + h[(mm, mm + 1)];
                q = h[(mm + 1, mm + 1)] - z - r - s;
                r = h[(mm + 2, mm + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if mm == l {
                    break;
                }
                if h[(mm, mm - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(mm - 1, mm - 1)].abs() + z.abs() + h[(mm + 1, mm + 1)].abs()))
                {
                    break;
                }
                mm -= 1;
            }

            for i in mm + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > mm + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // double QR step on rows l..=n, columns mm..=n
            for k in mm..nu {
                let notlast = k != nu - 1;
                if k != mm {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s == 0.0 {
                    continue;
                }
                if k != mm {
                    h[(k, k - 1)] = -s * x;
                } else if l != mm {
                    h[(k, k - 1)] = -h[(k, k - 1)];
                }
                p += s;
                x = p / s;
                y = q / s;
                z = r / s;
                q /= p;
                r /= p;

                for j in k..nn {
                    p = h[(k, j)] + q * h[(k + 1, j)];
                    if notlast {
                        p += r * h[(k + 2, j)];
                        h[(k + 2, j)] -= p * z;
                    }
                    h[(k, j)] -= p * x;
                    h[(k + 1, j)] -= p * y;
                }
                for i in 0..=nu.min(k + 3) {
                    p = x * h[(i, k)] + y * h[(i, k + 1)];
                    if notlast {
                        p += z * h[(i, k + 2)];
                        h[(i, k + 2)] -= p * r;
                    }
                    h[(i, k)] -= p;
                    h[(i, k + 1)] -= p * q;
                }
            }
        }
    }

    Ok(EigenSet::new(
        re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect(),
    ))
}
