//! Surrogate kernel regularization, Cholesky factorization and determinant
//! gradients.
//!
//! A kernel matrix built from duplicated policies is only positive
//! semidefinite. Blending it with the identity, `beta * K + (1 - beta) * I`,
//! keeps the determinant bounded away from zero so the Cholesky factor always
//! exists and the log-determinant is differentiable everywhere.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::KernelMatrix;

/// Pivots at or below this value are treated as a failed factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Tolerance on `|a_ij - a_ji|` accepted as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// `beta * K + (1 - beta) * I` for a population kernel `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateKernel {
    beta: f64,
    entries: DMatrix<f64>,
}

impl SurrogateKernel {
    pub fn new(base: &KernelMatrix, beta: f64) -> Result<Self> {
        Self::from_matrix(base.entries(), beta)
    }

    /// Builds the surrogate from a raw square matrix. The caller is
    /// responsible for the matrix being a valid kernel.
    pub fn from_matrix(base: &DMatrix<f64>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "surrogate beta must lie in (0, 1), got {beta}"
            )));
        }
        if !base.is_square() {
            return Err(Error::DimensionMismatch {
                expected: base.nrows(),
                got: base.ncols(),
            });
        }
        let n = base.nrows();
        let mut entries = base * beta;
        for i in 0..n {
            entries[(i, i)] += 1.0 - beta;
        }
        Ok(Self { beta, entries })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        cholesky(&self.entries)
    }
}

/// Entrywise `beta * K + (1 - beta) * I`.
pub fn surrogate(k: &KernelMatrix, beta: f64) -> Result<SurrogateKernel> {
    SurrogateKernel::new(k, beta)
}

/// Lower-triangular `L` with `L * L^T = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn size(&self) -> usize {
        self.lower.nrows()
    }

    /// `(prod L_ii)^2`.
    pub fn det(&self) -> f64 {
        let prod: f64 = (0..self.size()).map(|i| self.lower[(i, i)]).product();
        prod * prod
    }

    /// `2 * sum ln L_ii`; finite even when the determinant underflows.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.size()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.size();
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.lower[(i, k)] * b[k];
            }
            b[i] = acc / self.lower[(i, i)];
        }
    }

    /// Solves `L^T x = y` in place.
    fn back_substitute(&self, y: &mut [f64]) {
        let n = self.size();
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n {
                acc -= self.lower[(k, i)] * y[k];
            }
            y[i] = acc / self.lower[(i, i)];
        }
    }

    /// Solves `A x = b` for the factored `A`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                got: b.len(),
            });
        }
        let mut x = b.to_vec();
        self.forward_substitute(&mut x);
        self.back_substitute(&mut x);
        Ok(x)
    }

    /// `A^{-1}` column by column through two triangular solves.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut inv = DMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            self.forward_substitute(&mut col);
            self.back_substitute(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Exact symmetry keeps downstream kernel gradients symmetric.
        let t = inv.transpose();
        (inv + t) * 0.5
    }
}

pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let diff = (a[(i, j)] - a[(j, i)]).abs();
            let scale = 1.0f64.max(a[(i, j)].abs()).max(a[(j, i)].abs());
            if diff > SYMMETRY_TOLERANCE * scale || diff.is_nan() {
                return Err(Error::NotSymmetric { row: i, col: j, diff });
            }
        }
    }
    Ok(())
}

/// Cholesky–Banachiewicz factorization of a symmetric matrix.
///
/// Fails with [`Error::NotPositiveDefinite`] on the first pivot that is not
/// strictly above [`PIVOT_TOLERANCE`]; callers then fall back to a surrogate
/// with more identity weight.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    check_symmetric(a)?;
    let n = a.nrows();
    let mut lower = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= lower[(i, k)] * lower[(j, k)];
            }
            if i == j {
                if !(sum > PIVOT_TOLERANCE) {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: sum });
                }
                lower[(i, i)] = sum.sqrt();
            } else {
                lower[(i, j)] = sum / lower[(j, j)];
            }
        }
    }
    Ok(CholeskyFactor { lower })
}

pub fn det_via_cholesky(l: &CholeskyFactor) -> f64 {
    l.det()
}

/// Lower bound `(1 - beta + M beta)(1 - beta)^(M - 1)` on the surrogate
/// determinant of any unit-diagonal PSD kernel with entries in `[0, 1]`.
pub fn lemma3_bound(m: usize, beta: f64) -> f64 {
    assert!(m >= 1, "population size must be at least 1");
    (1.0 - beta + m as f64 * beta) * (1.0 - beta).powi(m as i32 - 1)
}

/// Jacobi's formula for the surrogate determinant.
///
/// `dk_dtheta[p]` is the derivative of the raw kernel `K` with respect to
/// parameter `p`; the surrogate derivative is `beta * dK/dtheta`. Returns
/// `det(K~) * tr(K~^{-1} dK~/dtheta)` for every parameter.
pub fn det_gradient(ktilde: &SurrogateKernel, dk_dtheta: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let factor = ktilde.cholesky()?;
    let det = factor.det();
    let inv = factor.inverse();
    let n = ktilde.size();
    dk_dtheta
        .iter()
        .map(|dk| {
            if dk.nrows() != n || dk.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: dk.nrows(),
                });
            }
            // tr(A B) = sum_ij A_ij B_ji
            let trace: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| inv[(i, j)] * dk[(j, i)])
                .sum();
            Ok(det * ktilde.beta() * trace)
        })
        .collect()
}

/// Factors `beta * K + (1 - beta) * I`, shrinking `beta` toward zero until the
/// factorization succeeds. Returns the surrogate actually used.
pub fn factor_with_fallback(
    k: &DMatrix<f64>,
    beta: f64,
) -> Result<(SurrogateKernel, CholeskyFactor)> {
    let mut current = beta;
    let mut last_err = None;
    for _ in 0..16 {
        let surrogate = SurrogateKernel::from_matrix(k, current)?;
        match surrogate.cholesky() {
            Ok(factor) => return Ok((surrogate, factor)),
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                last_err = Some(e);
                current = 1.0 - 2.0 * (1.0 - current);
                if current <= 0.0 {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::InvalidArgument("surrogate fallback exhausted".into())))
}
