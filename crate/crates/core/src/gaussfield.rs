//! Gaussian increment simulation through a Cholesky factor of the anchored
//! increment covariance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::variogram::AnchoredSigma;

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;
const RECONSTRUCTION_TOL: f64 = 1e-8;

/// Lower-triangular `L` with `L Lᵀ = A + εI`.
///
/// Pivots that vanish (duplicate or collocated sites) get a zero column, so a
/// positive semidefinite matrix is factored exactly without jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    lower: Matrix,
    jitter: f64,
    zero_pivots: usize,
}

impl CholFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// True when every pivot is strictly positive, i.e. the factored matrix is
    /// invertible.
    pub fn is_definite(&self) -> bool {
        self.zero_pivots == 0
    }

    pub fn log_det(&self) -> Result<f64> {
        self.require_definite()?;
        Ok(2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>())
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.require_definite()?;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..y.len() {
            let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
            y[i] = (y[i] - s) / l[(i, i)];
        }
        Ok(y)
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let l = &self.lower;
        let mut x = self.solve_lower(b)?;
        for i in (0..x.len()).rev() {
            let s: f64 = (i + 1..x.len()).map(|k| l[(k, i)] * x[k]).sum();
            x[i] = (x[i] - s) / l[(i, i)];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // symmetrize away round-off
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        Ok(inv)
    }

    fn require_definite(&self) -> Result<()> {
        if self.is_definite() {
            Ok(())
        } else {
            Err(Error::NotPsd { jitter: self.jitter })
        }
    }
}

pub fn factor(sigma: &AnchoredSigma) -> Result<CholFactor> {
    factor_matrix(&sigma.matrix)
}

/// Factors a symmetric matrix, adding jitter `ε = 1e-12, 1e-11, …, 1e-6` only
/// when the plain factorization fails.
pub fn factor_matrix(a: &Matrix) -> Result<CholFactor> {
    if !a.is_square() {
        return Err(Error::invalid("cannot factor a non-square matrix"));
    }
    if !a.is_symmetric(1e-10 * (1.0 + a.trace().abs())) {
        return Err(Error::invalid("cannot factor a non-symmetric matrix"));
    }
    let mut jitter = 0.0;
    loop {
        if let Some(f) = try_factor(a, jitter) {
            return Ok(f);
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000_001 {
            return Err(Error::NotPsd { jitter: JITTER_MAX });
        }
    }
}

fn try_factor(a: &Matrix, jitter: f64) -> Option<CholFactor> {
    let n = a.rows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max) + jitter;
    let tol = 1e-12 * scale;
    let mut l = Matrix::zeros(n, n);
    let mut zero_pivots = 0;
    for j in 0..n {
        let d = a[(j, j)] + jitter - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d > tol {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
                l[(i, j)] = (a[(i, j)] - s) / ljj;
            }
        } else if d >= -tol {
            zero_pivots += 1;
        } else {
            return None;
        }
    }
    let mut target = a.clone();
    for i in 0..n {
        target[(i, i)] += jitter;
    }
    let err = l.matmul(&l.transpose()).max_abs_diff(&target);
    (err <= RECONSTRUCTION_TOL * scale.max(1.0)).then_some(CholFactor {
        lower: l,
        jitter,
        zero_pivots,
    })
}

/// `W = L N` with `N` i.i.d. standard normal.
pub fn sample_anchored_increments<R: Rng + ?Sized>(factor: &CholFactor, rng: &mut R) -> Vec<f64> {
    let n = factor.dim();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let l = &factor.lower;
    (0..n)
        .map(|i| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
        .collect()
}
