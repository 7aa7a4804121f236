//! Statistical and analytical linearization of nonlinear measurement
//! functions with respect to a Gaussian density.
//!
//! Statistical linearization fits an affine-plus-noise model
//! `g(x) ~ A x + b + eta`, `eta ~ N(0, Omega)`, by matching the first and
//! cross moments of `g` under the density. The moments are evaluated with a
//! sigma-point rule (unscented or cubature); the choice of rule changes the
//! captured linearization error `Omega`, so the rule is a caller-visible
//! parameter rather than a baked-in default.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{cholesky, chol_solve, symmetrize, GaussianBelief};

type EvalFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Central-difference step for the entry `x_j`: `1e-6 * (1 + |x_j|)`.
fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// A vector-valued measurement function `R^n -> R^m` with an optional
/// analytic jacobian. Evaluation must be reentrant; closures are shared
/// behind `Arc` so the function can be cloned across threads.
#[derive(Clone)]
pub struct MeasurementFn {
    dim_in: usize,
    dim_out: usize,
    eval: Arc<EvalFn>,
    jac: Option<Arc<JacFn>>,
}

impl fmt::Debug for MeasurementFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementFn")
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .field("has_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl MeasurementFn {
    pub fn new<F>(dim_in: usize, dim_out: usize, eval: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim_in,
            dim_out,
            eval: Arc::new(eval),
            jac: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    /// Evaluates the function, rejecting wrong input shapes and non-finite
    /// outputs.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim_in {
            return Err(Error::DimensionMismatch(format!(
                "measurement function expects input of length {}, got {}",
                self.dim_in,
                x.len()
            )));
        }
        let z = (self.eval)(x);
        if z.len() != self.dim_out {
            return Err(Error::EvaluationFailure(format!(
                "expected output of length {}, got {}",
                self.dim_out,
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluationFailure(
                "non-finite output value".to_string(),
            ));
        }
        Ok(z)
    }

    /// The analytic jacobian at `x`; fails with [`Error::MissingJacobian`]
    /// when none was provided.
    pub fn analytic_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let jac = self.jac.as_ref().ok_or(Error::MissingJacobian)?;
        let h = jac(x);
        if h.nrows() != self.dim_out || h.ncols() != self.dim_in {
            return Err(Error::EvaluationFailure(format!(
                "jacobian has shape {}x{}, expected {}x{}",
                h.nrows(),
                h.ncols(),
                self.dim_out,
                self.dim_in
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluationFailure(
                "non-finite jacobian entry".to_string(),
            ));
        }
        Ok(h)
    }

    /// The jacobian at `x`: analytic when provided, otherwise central
    /// finite differences of `eval`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if self.jac.is_some() {
            self.analytic_jacobian(x)
        } else {
            self.fd_jacobian(x)
        }
    }

    fn fd_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.dim_out, self.dim_in);
        for j in 0..self.dim_in {
            let step = fd_step(x[j]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let col = (self.eval(&xp)? - self.eval(&xm)?) / (2.0 * step);
            h.set_column(j, &col);
        }
        Ok(h)
    }
}

/// Affine-plus-noise fit of a measurement function: slope `A`, offset `b`,
/// and the symmetric PSD linearization-error covariance `Omega`.
///
/// `Omega` vanishes for affine functions and grows with the nonlinearity of
/// the function at the linearization density.
#[derive(Debug, Clone)]
pub struct AffineLinearization {
    pub slope: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub error_cov: DMatrix<f64>,
}

impl AffineLinearization {
    /// The fitted model's prediction `A x + b` at a point.
    pub fn predict_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.slope * x + &self.offset
    }
}

/// Raw moments of the transformed density: `z_bar = E[g(x)]`, the
/// state-measurement cross covariance `psi`, and the measurement second
/// central moment `phi`.
#[derive(Debug, Clone)]
pub struct MomentStatistics {
    pub z_bar: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

/// Deterministic sigma-point rules for Gaussian expectation integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPointRule {
    /// Basic unscented transform with a single spread parameter `kappa`;
    /// 2n+1 points with center weight `kappa / (n + kappa)`.
    Unscented { kappa: f64 },
    /// Spherical-radial cubature: 2n equally weighted points, no center.
    Cubature,
}

impl SigmaPointRule {
    /// The classical heuristic `kappa = 3 - n`.
    pub fn unscented_default(state_dim: usize) -> Self {
        SigmaPointRule::Unscented {
            kappa: 3.0 - state_dim as f64,
        }
    }
}

/// Generates sigma points and weights for a Gaussian belief.
///
/// Unscented: `x_hat` and `x_hat +- sqrt(n + kappa) * L_j` with
/// `P = L L^T`, weights `kappa/(n+kappa)` and `1/(2(n+kappa))`.
/// Cubature: `x_hat +- sqrt(n) * L_j`, weights `1/(2n)`.
pub fn sigma_points(
    belief: &GaussianBelief,
    rule: SigmaPointRule,
) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let n = belief.dim();
    let l = cholesky(belief.cov(), "sigma-point covariance")?.l();
    match rule {
        SigmaPointRule::Unscented { kappa } => {
            let scale = n as f64 + kappa;
            if scale <= 0.0 {
                return Err(Error::InvalidRuleParameter(format!(
                    "n + kappa must be positive, got {scale}"
                )));
            }
            let mut points = Vec::with_capacity(2 * n + 1);
            let mut weights = Vec::with_capacity(2 * n + 1);
            points.push(belief.mean().clone());
            weights.push(kappa / scale);
            let spread = scale.sqrt();
            for j in 0..n {
                let col = l.column(j) * spread;
                points.push(belief.mean() + &col);
                points.push(belief.mean() - &col);
                weights.push(0.5 / scale);
                weights.push(0.5 / scale);
            }
            Ok((points, weights))
        }
        SigmaPointRule::Cubature => {
            let spread = (n as f64).sqrt();
            let w = 0.5 / n as f64;
            let mut points = Vec::with_capacity(2 * n);
            for j in 0..n {
                let col = l.column(j) * spread;
                points.push(belief.mean() + &col);
                points.push(belief.mean() - &col);
            }
            Ok((points, vec![w; 2 * n]))
        }
    }
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
///
/// Quadrature error can leave the fitted error covariance indefinite by a
/// small margin; downstream innovation covariances need it PSD.
fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let clipped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&rebuilt)
}

/// Statistically linearizes `g` with respect to a Gaussian density.
///
/// With sigma points `x_k` and weights `w_k`:
///
/// ```text
/// z_bar = sum w g(x_k)
/// psi   = sum w (x_k - x_hat)(g(x_k) - z_bar)^T
/// phi   = sum w (g(x_k) - z_bar)(g(x_k) - z_bar)^T
/// A     = psi^T P^-1,  b = z_bar - A x_hat,  Omega = phi - A P A^T
/// ```
///
/// `A` is computed by an SPD solve against `P`, and `Omega` is symmetrized
/// and eigenvalue-clipped to PSD.
pub fn statistical_linearize(
    g: &MeasurementFn,
    density: &GaussianBelief,
    rule: SigmaPointRule,
) -> Result<(AffineLinearization, MomentStatistics)> {
    let n = density.dim();
    if g.dim_in() != n {
        return Err(Error::DimensionMismatch(format!(
            "function expects dimension {}, density has {}",
            g.dim_in(),
            n
        )));
    }
    let m = g.dim_out();
    let (points, weights) = sigma_points(density, rule)?;
    let images: Vec<DVector<f64>> = points.iter().map(|p| g.eval(p)).collect::<Result<_>>()?;

    let mut z_bar = DVector::zeros(m);
    for (w, z) in weights.iter().zip(&images) {
        z_bar += z * *w;
    }
    let mut psi = DMatrix::zeros(n, m);
    let mut phi = DMatrix::zeros(m, m);
    for ((w, x), z) in weights.iter().zip(&points).zip(&images) {
        let dx = x - density.mean();
        let dz = z - &z_bar;
        psi += *w * &dx * dz.transpose();
        phi += *w * &dz * dz.transpose();
    }

    // A = psi^T P^-1 via P x = psi (P symmetric).
    let slope = chol_solve(density.cov(), &psi, "linearization density")?.transpose();
    let offset = &z_bar - &slope * density.mean();
    let error_cov = clip_psd(&(&phi - &slope * density.cov() * slope.transpose()));

    Ok((
        AffineLinearization {
            slope,
            offset,
            error_cov,
        },
        MomentStatistics { z_bar, psi, phi },
    ))
}

/// First-order (tangent) linearization at a point: `A = H(x)`,
/// `b = g(x) - A x`, `Omega = 0`. Falls back to finite differences when no
/// analytic jacobian is available.
pub fn analytical_linearize(g: &MeasurementFn, point: &DVector<f64>) -> Result<AffineLinearization> {
    let slope = g.jacobian(point)?;
    let offset = g.eval(point)? - &slope * point;
    Ok(AffineLinearization {
        error_cov: DMatrix::zeros(g.dim_out(), g.dim_out()),
        slope,
        offset,
    })
}

/// Compares the analytic jacobian against central finite differences of the
/// function and returns the largest entrywise relative deviation
/// `|analytic - fd| / (1 + |analytic|)`.
pub fn check_jacobian(g: &MeasurementFn, point: &DVector<f64>) -> Result<f64> {
    let analytic = g.analytic_jacobian(point)?;
    let fd = g.fd_jacobian(point)?;
    let mut worst = 0.0_f64;
    for (a, f) in analytic.iter().zip(fd.iter()) {
        worst = worst.max((a - f).abs() / (1.0 + a.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_fn<F>(f: F) -> MeasurementFn
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        MeasurementFn::new(1, 1, move |x| DVector::from_vec(vec![f(x[0])]))
    }

    fn std_normal() -> GaussianBelief {
        GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn unscented_points_standard_normal() {
        let (points, weights) = sigma_points(&std_normal(), SigmaPointRule::Unscented { kappa: 2.0 }).unwrap();
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        assert_abs_diff_eq!(xs[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[1], 3.0_f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(xs[2], -(3.0_f64.sqrt()), epsilon = 1e-15);
        assert_abs_diff_eq!(weights[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[1], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[2], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn cubature_points_standard_normal() {
        let (points, weights) = sigma_points(&std_normal(), SigmaPointRule::Cubature).unwrap();
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        assert_eq!(points.len(), 2);
        assert_abs_diff_eq!(xs[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[1], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sigma_point_moment_reproduction() {
        let belief = GaussianBelief::new(
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]),
        )
        .unwrap();
        for rule in [SigmaPointRule::unscented_default(3), SigmaPointRule::Cubature] {
            let (points, weights) = sigma_points(&belief, rule).unwrap();
            let wsum: f64 = weights.iter().sum();
            assert!((wsum - 1.0).abs() <= 1e-12);
            let mut mean = DVector::zeros(3);
            for (w, p) in weights.iter().zip(&points) {
                mean += p * *w;
            }
            assert!((&mean - belief.mean()).norm() <= 1e-10);
            let mut cov = DMatrix::zeros(3, 3);
            for (w, p) in weights.iter().zip(&points) {
                let d = p - &mean;
                cov += *w * &d * d.transpose();
            }
            let rel = (&cov - belief.cov()).norm() / belief.cov().norm();
            assert!(rel <= 1e-9, "covariance reproduction {rel} for {rule:?}");
        }
    }

    #[test]
    fn invalid_kappa_rejected() {
        let err = sigma_points(&std_normal(), SigmaPointRule::Unscented { kappa: -1.0 }).unwrap_err();
        assert!(matches!(err, Error::InvalidRuleParameter(_)));
    }

    #[test]
    fn affine_recovered_exactly() {
        let g = scalar_fn(|x| 2.0 * x + 1.0);
        for rule in [SigmaPointRule::Unscented { kappa: 2.0 }, SigmaPointRule::Cubature] {
            let (lin, _) = statistical_linearize(&g, &std_normal(), rule).unwrap();
            assert_abs_diff_eq!(lin.slope[(0, 0)], 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(lin.offset[0], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(lin.error_cov[(0, 0)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn square_under_unscented() {
        let g = scalar_fn(|x| x * x);
        let (lin, stats) =
            statistical_linearize(&g, &std_normal(), SigmaPointRule::Unscented { kappa: 2.0 }).unwrap();
        // Gaussian moments: E[x^2]=1, E[x^3]=0, E[x^4]=3 => psi=0, phi=2.
        assert_abs_diff_eq!(lin.slope[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lin.offset[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lin.error_cov[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.z_bar[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.phi[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn square_under_cubature() {
        let g = scalar_fn(|x| x * x);
        let (lin, _) = statistical_linearize(&g, &std_normal(), SigmaPointRule::Cubature).unwrap();
        // Both cubature points map to 1, so phi = 0 and Omega = 0.
        assert_abs_diff_eq!(lin.slope[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lin.offset[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lin.error_cov[(0, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_matches_closed_form_moments() {
        // g(x) = a x^2 + b x + c under N(mu, s2), unscented kappa = 2:
        // A = b + 2 a mu, z_bar = a mu^2 + a s2 + b mu + c, Omega = 2 a^2 s2^2.
        let (a, b, c) = (0.7, -1.3, 0.4);
        let (mu, s2) = (0.8, 2.5);
        let g = scalar_fn(move |x| a * x * x + b * x + c);
        let density =
            GaussianBelief::new(DVector::from_vec(vec![mu]), DMatrix::from_vec(1, 1, vec![s2])).unwrap();
        let (lin, stats) =
            statistical_linearize(&g, &density, SigmaPointRule::Unscented { kappa: 2.0 }).unwrap();
        let a_expect = b + 2.0 * a * mu;
        let z_expect = a * mu * mu + a * s2 + b * mu + c;
        let om_expect = 2.0 * a * a * s2 * s2;
        assert!((lin.slope[(0, 0)] - a_expect).abs() <= 1e-9 * (1.0 + a_expect.abs()));
        assert!((stats.z_bar[0] - z_expect).abs() <= 1e-9 * (1.0 + z_expect.abs()));
        assert!((lin.error_cov[(0, 0)] - om_expect).abs() <= 1e-9 * (1.0 + om_expect.abs()));
    }

    #[test]
    fn analytical_affine() {
        let g = scalar_fn(|x| 2.0 * x + 1.0).with_jacobian(|_| DMatrix::from_vec(1, 1, vec![2.0]));
        let lin = analytical_linearize(&g, &DVector::from_vec(vec![5.0])).unwrap();
        assert_abs_diff_eq!(lin.slope[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lin.offset[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lin.error_cov[(0, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn analytical_square_at_one() {
        let g = scalar_fn(|x| x * x).with_jacobian(|x| DMatrix::from_vec(1, 1, vec![2.0 * x[0]]));
        let lin = analytical_linearize(&g, &DVector::from_vec(vec![1.0])).unwrap();
        assert_abs_diff_eq!(lin.slope[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lin.offset[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn analytical_cube_at_zero_fd_fallback() {
        let g = scalar_fn(|x| x * x * x);
        let lin = analytical_linearize(&g, &DVector::zeros(1)).unwrap();
        // derivative 3x^2 at 0; fd of odd cubic at 0 has O(h^2) truncation
        assert_abs_diff_eq!(lin.slope[(0, 0)], 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(lin.offset[0], 0.0, epsilon = 1e-11);
    }

    #[test]
    fn jacobian_check_linear_exact() {
        let g = scalar_fn(|x| 2.0 * x + 1.0).with_jacobian(|_| DMatrix::from_vec(1, 1, vec![2.0]));
        let dev = check_jacobian(&g, &DVector::from_vec(vec![0.7])).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
    }

    #[test]
    fn jacobian_check_sine() {
        let g = scalar_fn(|x| x.sin()).with_jacobian(|x| DMatrix::from_vec(1, 1, vec![x[0].cos()]));
        let dev = check_jacobian(&g, &DVector::from_vec(vec![0.3])).unwrap();
        assert!(dev <= 1e-7, "deviation {dev}");
    }

    #[test]
    fn jacobian_check_detects_wrong_jacobian() {
        // slope claimed at twice the true value; deviation -> |H|/(1+2|H|)
        let g = scalar_fn(|x| 100.0 * x).with_jacobian(|_| DMatrix::from_vec(1, 1, vec![200.0]));
        let dev = check_jacobian(&g, &DVector::from_vec(vec![0.2])).unwrap();
        assert!((dev - 100.0 / 201.0).abs() < 1e-3, "deviation {dev}");
    }

    #[test]
    fn jacobian_check_requires_analytic() {
        let g = scalar_fn(|x| x);
        assert!(matches!(
            check_jacobian(&g, &DVector::zeros(1)),
            Err(Error::MissingJacobian)
        ));
    }

    #[test]
    fn evaluation_failure_on_nan() {
        let g = scalar_fn(|x| (x - 2.0).ln());
        let err = statistical_linearize(
            &g,
            &std_normal(),
            SigmaPointRule::Unscented { kappa: 2.0 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::EvaluationFailure(_)));
    }
}
