//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Average of `m` and its transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute diagonal entry, floored at one. Used to scale jitter.
pub fn diag_scale(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().fold(1.0_f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric square root of a PSD matrix; eigenvalues below zero are
/// clamped, so a rank-deficient (even all-zero) input is fine.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = DVector::from_iterator(n, eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&roots) * q.transpose()
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Singular(min_eigenvalue(m)))?;
    Ok(chol.inverse())
}

/// Relative pivot floor for the unjittered attempt in [`PivotedCholesky::robust`].
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Relative jitter used when a block is numerically singular.
pub const JITTER: f64 = 1e-10;

/// Cholesky factorisation with symmetric (diagonal) pivoting:
/// `P A Pᵀ = L Lᵀ`, where `perm[k]` is the original index placed at
/// position `k`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    perm: Vec<usize>,
    l: DMatrix<f64>,
}

impl PivotedCholesky {
    /// Factor `a + jitter·I`. Fails when a pivot is not strictly positive.
    pub fn new(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        Self::factor(a, jitter, 0.0)
    }

    /// Factor `a` exactly when it is well conditioned, otherwise
    /// `a + 1e-10·s·I` with `s` the diagonal scale. Adding jitter to a
    /// healthy matrix would bias every solve, so it is a fallback only.
    pub fn robust(a: &DMatrix<f64>) -> Result<Self> {
        let s = diag_scale(a);
        Self::factor(a, 0.0, PIVOT_FLOOR * s).or_else(|_| Self::factor(a, JITTER * s, 0.0))
    }

    fn factor(a: &DMatrix<f64>, jitter: f64, floor: f64) -> Result<Self> {
        let n = a.nrows();
        let mut w = symmetrize(a);
        for i in 0..n {
            w[(i, i)] += jitter;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut l = DMatrix::zeros(n, n);
        for k in 0..n {
            let (mut best, mut best_val) = (k, w[(k, k)]);
            for j in k + 1..n {
                if w[(j, j)] > best_val {
                    best = j;
                    best_val = w[(j, j)];
                }
            }
            if !(best_val > floor) || !best_val.is_finite() {
                return Err(Error::SingularCondition);
            }
            if best != k {
                w.swap_rows(k, best);
                w.swap_columns(k, best);
                l.swap_rows(k, best);
                perm.swap(k, best);
            }
            let pivot = w[(k, k)].sqrt();
            l[(k, k)] = pivot;
            for i in k + 1..n {
                l[(i, k)] = w[(i, k)] / pivot;
            }
            for j in k + 1..n {
                let ljk = l[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                for i in j..n {
                    w[(i, j)] -= l[(i, k)] * ljk;
                }
            }
            for j in k + 1..n {
                for i in j + 1..n {
                    w[(j, i)] = w[(i, j)];
                }
            }
        }
        Ok(Self { perm, l })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solve `(a + jitter·I) X = B` for every column of `B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut y = DMatrix::zeros(n, b.ncols());
        for c in 0..b.ncols() {
            for k in 0..n {
                y[(k, c)] = b[(self.perm[k], c)];
            }
        }
        let lower = self.l.view((0, 0), (n, n));
        lower.solve_lower_triangular_mut(&mut y);
        lower.tr_solve_lower_triangular_mut(&mut y);
        let mut x = DMatrix::zeros(n, b.ncols());
        for c in 0..b.ncols() {
            for k in 0..n {
                x[(self.perm[k], c)] = y[(k, c)];
            }
        }
        x
    }
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}
