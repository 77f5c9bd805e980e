//! Banded symmetric storage and Cholesky factorisation, plus a few dense
//! helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric matrix stored by its lower band: `band[i * (hb + 1) + d] = A[i][i-d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym {
    n: usize,
    hb: usize,
    band: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, hb: usize) -> Self {
        Self {
            n,
            hb,
            band: vec![0.0; n * (hb + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.hb
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        if d > self.hb {
            0.0
        } else {
            self.band[i * (self.hb + 1) + d]
        }
    }

    /// Adds `v` to `A[i][j]` (and by symmetry `A[j][i]`). Diagonal entries are
    /// added once.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        assert!(d <= self.hb, "entry ({i},{j}) outside band {}", self.hb);
        self.band[i * (self.hb + 1) + d] += v;
    }

    /// Principal submatrix without the listed (sorted, unique) indices.
    pub fn without(&self, removed: &[usize]) -> (BandedSym, Vec<usize>) {
        let keep: Vec<usize> = (0..self.n).filter(|i| removed.binary_search(i).is_err()).collect();
        let mut out = BandedSym::zeros(keep.len(), self.hb);
        for (a, &i) in keep.iter().enumerate() {
            for b in a.saturating_sub(self.hb)..=a {
                let j = keep[b];
                if i - j <= self.hb {
                    out.band[a * (self.hb + 1) + (a - b)] = self.get(i, j);
                }
            }
        }
        (out, keep)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.hb);
            for j in lo..=i {
                let a = self.band[i * (self.hb + 1) + (i - j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let hb = self.hb;
        let w = hb + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(hb);
            for j in lo..=i {
                let mut s = self.band[i * w + (i - j)];
                let klo = lo.max(j.saturating_sub(hb));
                for k in klo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { min_eigenvalue: s });
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Ok(BandedCholesky { n, hb, l })
    }
}

/// Lower-triangular banded factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    hb: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let w = self.hb + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.hb);
            let mut s = b[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper(&self, y: &mut [f64]) {
        let w = self.hb + 1;
        for i in (0..self.n).rev() {
            let hi = (i + self.hb).min(self.n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
    }

    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// Column `j` of `A⁻¹`, exploiting the leading zeros of `e_j`.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let w = self.hb + 1;
        let mut x = vec![0.0; self.n];
        x[j] = 1.0 / self.l[j * w];
        for i in j + 1..self.n {
            let lo = i.saturating_sub(self.hb).max(j);
            let mut s = 0.0;
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * x[k];
            }
            x[i] = s / self.l[i * w];
        }
        self.solve_upper(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        let w = self.hb + 1;
        2.0 * (0..self.n).map(|i| self.l[i * w].ln()).sum::<f64>()
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Smallest eigenvalue of a banded SPD matrix by inverse iteration. Returns
/// `None` when the matrix is not positive definite.
pub fn banded_min_eigenvalue(a: &BandedSym, iterations: usize) -> Option<f64> {
    let chol = a.cholesky().ok()?;
    let n = a.dim();
    // Smooth start vector; the lowest mode of the kernels used here is smooth.
    let mut x: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.1 * ((i as f64 * 0.7311).sin()))
        .collect();
    let mut lambda = f64::NAN;
    for _ in 0..iterations {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        let mut y = x.clone();
        chol.solve(&mut y);
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let next = 1.0 / dot;
        let converged = (next - lambda).abs() <= 1e-10 * next.abs();
        lambda = next;
        x = y;
        if converged {
            break;
        }
    }
    Some(lambda)
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    for i in 0..a.nrows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn is_antisymmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    let scale = max_abs(a).max(1.0);
    for i in 0..a.nrows() {
        for j in 0..=i {
            if (a[(i, j)] + a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Solves the symmetric system `A x = b` with Cholesky, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::LinearAlgebra("singular system".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> BandedSym {
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.5);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn banded_cholesky_matches_dense_inverse() {
        let a = tridiag(12);
        let chol = a.cholesky().unwrap();
        let inv = a.to_dense().try_inverse().unwrap();
        for j in 0..12 {
            let col = chol.inverse_column(j);
            for i in 0..12 {
                assert!((col[i] - inv[(i, j)]).abs() < 1e-13);
            }
        }
        let mut b: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let rhs = b.clone();
        chol.solve(&mut b);
        let back = a.mul_vec(&b);
        for (x, y) in back.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = BandedSym::zeros(3, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, -1.0);
        a.add(2, 2, 1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn removing_rows_keeps_band() {
        let a = tridiag(6);
        let (b, keep) = a.without(&[0, 3]);
        assert_eq!(keep, vec![1, 2, 4, 5]);
        let d = a.to_dense();
        for (x, &i) in keep.iter().enumerate() {
            for (y, &j) in keep.iter().enumerate() {
                assert_eq!(b.get(x, y), d[(i, j)]);
            }
        }
    }

    #[test]
    fn inverse_iteration_min_eigenvalue() {
        let a = tridiag(40);
        let (min, _) = eigen_range(&a.to_dense());
        let est = banded_min_eigenvalue(&a, 500).unwrap();
        assert!((est - min).abs() < 1e-8, "{est} vs {min}");
    }
}
