//! Gaussian beliefs, SPD-safe linear algebra, and the Gaussian
//! Kullback-Leibler divergence used by iteration stopping rules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Returns the symmetric part `(m + m^T) / 2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky-factorizes a symmetric matrix, failing with
/// [`Error::NotPositiveDefinite`] when the matrix is not SPD.
pub(crate) fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))
}

/// Solves `m x = b` for SPD `m` given as a plain matrix.
pub(crate) fn chol_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, context)?.solve(b))
}

/// A multivariate Gaussian over the state: mean vector plus a symmetric
/// positive definite covariance.
///
/// Construction symmetrizes the covariance as `(cov + cov^T)/2` and then
/// validates positive definiteness by Cholesky factorization; beliefs whose
/// smallest eigenvalue is not strictly positive are rejected rather than
/// repaired.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        cholesky(&cov, "belief covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// A validated symmetric positive definite matrix, used for measurement
/// noise and innovation covariances.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    data: DMatrix<f64>,
}

impl SpdMatrix {
    /// Symmetrizes the input and validates positive definiteness.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "SPD matrix must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let data = symmetrize(&data);
        cholesky(&data, "SPD matrix")?;
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        cholesky(&self.data, "SPD matrix")
    }
}

/// Solves `a x = b` by Cholesky factorization.
///
/// For well-conditioned `a` the residual satisfies
/// `||a x - b||_F <= 1e-10 ||b||_F`.
pub fn solve_spd(a: &SpdMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd: A is {0}x{0} but B has {1} rows",
            a.dim(),
            b.nrows()
        )));
    }
    Ok(a.factor()?.solve(b))
}

/// Log-determinant of an SPD matrix from its Cholesky factor.
fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Kullback-Leibler divergence `D_KL(from || to)` between two Gaussian
/// beliefs, by the closed form
///
/// ```text
/// 1/2 [ tr(S1^-1 S0) + (m1-m0)^T S1^-1 (m1-m0) - n + ln det S1 - ln det S0 ]
/// ```
///
/// The result is nonnegative up to rounding and vanishes exactly when the
/// beliefs coincide.
pub fn kl_divergence(from: &GaussianBelief, to: &GaussianBelief) -> Result<f64> {
    if from.dim() != to.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kl_divergence: dimensions {} and {}",
            from.dim(),
            to.dim()
        )));
    }
    let n = from.dim() as f64;
    let chol_to = cholesky(to.cov(), "kl target covariance")?;
    let chol_from = cholesky(from.cov(), "kl source covariance")?;
    let trace = chol_to.solve(from.cov()).trace();
    let dm = to.mean() - from.mean();
    let quad = dm.dot(&chol_to.solve(&dm));
    Ok(0.5 * (trace + quad - n + log_det(&chol_to) - log_det(&chol_from)))
}
