//! Covariance flow `dC/dt = -alpha C B C` with `B = A^T Γ^{-1} A`: the closed
//! form, its limit, the asymptotic profile and self-similar solutions.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, check_square, EkiError, Result};
use crate::linalg::{check_alpha, check_time, diagonalize_product, symmetrize, SpectralData};
use crate::ode::rk4_integrate;
use crate::problem::InverseProblem;

/// Mean-field dynamics.
pub const ALPHA_MEAN_FIELD: f64 = 1.0;
/// Deterministic ensemble (empirical moments).
pub const ALPHA_DETERMINISTIC: f64 = 2.0;

/// Leading-order coefficient of the Wiener-averaged stochastic ensemble.
pub fn alpha_averaged(ensemble_size: usize) -> f64 {
    (ensemble_size as f64 + 1.0) / ensemble_size as f64
}

/// Flow parameters together with the diagonalization of `C0 B`.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub alpha: f64,
    pub c0: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub spec: SpectralData,
    b: DMatrix<f64>,
}

impl FlowConfig {
    pub fn new(alpha: f64, c0: DMatrix<f64>, m0: DVector<f64>, prob: &InverseProblem) -> Result<Self> {
        check_alpha(alpha)?;
        prob.check_prior(&m0, &c0)?;
        let c0 = symmetrize(&c0);
        let b = prob.precision_gram();
        let spec = diagonalize_product(&c0, &b)?;
        Ok(Self { alpha, c0, m0, spec, b })
    }

    /// Same prior and problem, different `alpha` (the spectral data do not
    /// depend on it).
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn dim(&self) -> usize {
        self.c0.nrows()
    }

    /// Cached `A^T Γ^{-1} A`.
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn operator(&self) -> CovOperatorA {
        CovOperatorA { alpha: self.alpha, b: self.b.clone() }
    }
}

/// The quadratic operator `C -> alpha C B C` driving the covariance flow.
#[derive(Debug, Clone)]
pub struct CovOperatorA {
    pub alpha: f64,
    pub b: DMatrix<f64>,
}

pub fn apply_operator_a(op: &CovOperatorA, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square("operator argument", c, op.b.nrows())?;
    Ok(c * &op.b * c * op.alpha)
}

/// `C(t) = S E(t) S^{-1} C0` with `E(t) = diag(1 / (1 + alpha t mu_i))`.
pub fn covariance_at(cfg: &FlowConfig, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    let alpha = cfg.alpha;
    let e = cfg.spec.map_diag(|m| 1.0 / (1.0 + alpha * t * m));
    Ok(symmetrize(&(e * &cfg.c0)))
}

/// The same covariance through the resolvent form `C0 (E + alpha t B C0)^{-1}`.
pub fn covariance_at_resolvent(cfg: &FlowConfig, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    let n = cfg.dim();
    let k = DMatrix::identity(n, n) + cfg.b() * &cfg.c0 * (cfg.alpha * t);
    // C K = C0  <=>  K^T C^T = C0^T
    let ct = k.transpose().lu().solve(&cfg.c0.transpose()).ok_or(EkiError::Singular("E + alpha t B C0"))?;
    Ok(symmetrize(&ct.transpose()))
}

/// `C_inf = S E_inf S^{-1} C0`, `E_inf` zero on the informed directions.
pub fn covariance_limit(cfg: &FlowConfig) -> DMatrix<f64> {
    symmetrize(&(cfg.spec.map_diag(|m| if m > 0.0 { 0.0 } else { 1.0 }) * &cfg.c0))
}

/// `C_inf C0^{-1} = S E_inf S^{-1}` (an oblique projector).
pub fn limit_projector(spec: &SpectralData) -> DMatrix<f64> {
    spec.map_diag(|m| if m > 0.0 { 0.0 } else { 1.0 })
}

/// `lim t (C(t) - C_inf) = S diag(1 / (alpha mu_i), 0..) S^{-1} C0`.
pub fn asymptotic_profile(cfg: &FlowConfig) -> DMatrix<f64> {
    let alpha = cfg.alpha;
    symmetrize(&(cfg.spec.map_diag(|m| if m > 0.0 { 1.0 / (alpha * m) } else { 0.0 }) * &cfg.c0))
}

/// `C(t) = C_hat / (1 + alpha lambda t)` for `C_hat B C_hat = lambda C_hat`,
/// i.e. `A(C_hat) = alpha lambda C_hat`. With this scaling of `lambda` the
/// result is exactly the flow started at `C_hat`; the asymptotic profile has
/// `lambda = 1 / alpha`.
pub fn self_similar_evolution(op: &CovOperatorA, c_hat: &DMatrix<f64>, lambda: f64, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    let residual = (apply_operator_a(op, c_hat)? - c_hat * (op.alpha * lambda)).norm();
    let tol = 1e-8 * c_hat.norm().max(1.0);
    if residual > tol {
        return Err(EkiError::NotAnEigenpair { residual });
    }
    Ok(c_hat / (1.0 + op.alpha * lambda * t))
}

/// Step bound for the RK4 oracle: `min(1e-4, 0.01 / (alpha mu_1))`.
pub fn oracle_dt(cfg: &FlowConfig) -> f64 {
    let stiff = cfg.alpha * cfg.spec.mu_max();
    if stiff > 0.0 {
        (0.01 / stiff).min(1e-4)
    } else {
        1e-4
    }
}

/// Co-integrate `dC/dt = -alpha C B C`, `dx/dt = -C A^T Γ^{-1}(A x - y)` with
/// fixed-step RK4 from `(C0, x0)` to `t_end`.
pub fn integrate_moments_rk4(
    cfg: &FlowConfig,
    prob: &InverseProblem,
    x0: &DVector<f64>,
    t_end: f64,
    dt: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = cfg.dim();
    check_len("x0", x0, n)?;
    check_time(t_end)?;
    let b = cfg.b().clone();
    let at_gi = prob.at_gamma_inv();
    let a = prob.a.clone();
    let y = prob.y.clone();
    let alpha = cfg.alpha;
    let mut state = DVector::zeros(n * n + n);
    state.rows_mut(0, n * n).copy_from_slice(cfg.c0.as_slice());
    state.rows_mut(n * n, n).copy_from(x0);

    let rhs = move |_t: f64, s: &DVector<f64>| {
        let c = DMatrix::from_column_slice(n, n, &s.as_slice()[..n * n]);
        let x = DVector::from_column_slice(&s.as_slice()[n * n..]);
        let dc = -(&c * &b * &c) * alpha;
        let dx = -(&c * (&at_gi * (&a * &x - &y)));
        let mut out = DVector::zeros(n * n + n);
        out.rows_mut(0, n * n).copy_from_slice(dc.as_slice());
        out.rows_mut(n * n, n).copy_from(&dx);
        out
    };
    let end = rk4_integrate(rhs, state, 0.0, t_end, dt);
    let c = DMatrix::from_column_slice(n, n, &end.as_slice()[..n * n]);
    let x = DVector::from_column_slice(&end.as_slice()[n * n..]);
    Ok((c, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frobenius;
    use nalgebra::{dmatrix, dvector};

    fn example_22(alpha: f64) -> FlowConfig {
        // A = (0, 1), Γ = 1, C0 = [[a, b], [b, d]] with a=2, b=1, d=1
        let prob = InverseProblem::new(dmatrix![0.0, 1.0], dmatrix![1.0], dvector![0.0]).unwrap();
        FlowConfig::new(alpha, dmatrix![2.0, 1.0; 1.0, 1.0], dvector![0.0, 0.0], &prob).unwrap()
    }

    #[test]
    fn covariance_at_zero_is_prior() {
        let cfg = example_22(2.0);
        assert!(rel_frobenius(&covariance_at(&cfg, 0.0).unwrap(), &cfg.c0) < 1e-14);
    }

    #[test]
    fn example_22_covariance_matches_symbolic_formula() {
        let (a, b, d) = (2.0, 1.0, 1.0);
        let det = a * d - b * b;
        let alpha = 2.0;
        let t = 1.0;
        let oracle = dmatrix![a + alpha * t * det, b; b, d] / (1.0 + alpha * t * d);
        assert!(rel_frobenius(&oracle, &(dmatrix![4.0, 1.0; 1.0, 1.0] / 3.0)) < 1e-15);
        let cfg = example_22(alpha);
        assert!(rel_frobenius(&covariance_at(&cfg, t).unwrap(), &oracle) < 1e-12);
        assert!(rel_frobenius(&covariance_at_resolvent(&cfg, t).unwrap(), &oracle) < 1e-12);
    }

    #[test]
    fn example_22_limit_and_profile() {
        let cfg = example_22(2.0);
        let c_inf = covariance_limit(&cfg);
        assert!((c_inf - dmatrix![1.0, 0.0; 0.0, 0.0]).norm() < 1e-12);
        let c_hat = asymptotic_profile(&cfg);
        let oracle = dmatrix![1.0, 1.0; 1.0, 1.0] / 2.0;
        assert!((&c_hat - oracle).norm() < 1e-12);
        let op = cfg.operator();
        assert!((apply_operator_a(&op, &c_hat).unwrap() - &c_hat).norm() < 1e-12);
    }

    #[test]
    fn limit_trivial_cases() {
        let prob =
            InverseProblem::new(dmatrix![3.0, 1.0; 0.0, 2.0], DMatrix::identity(2, 2), dvector![0.0, 0.0]).unwrap();
        let cfg = FlowConfig::new(2.0, dmatrix![2.0, -1.0; -1.0, 2.0], dvector![0.0, 0.0], &prob).unwrap();
        assert!(covariance_limit(&cfg).norm() < 1e-12);

        let prob = InverseProblem::new(DMatrix::zeros(1, 2), DMatrix::identity(1, 1), dvector![0.0]).unwrap();
        let cfg = FlowConfig::new(2.0, dmatrix![2.0, -1.0; -1.0, 2.0], dvector![0.0, 0.0], &prob).unwrap();
        assert!(rel_frobenius(&covariance_limit(&cfg), &cfg.c0) < 1e-14);
        assert!(rel_frobenius(&covariance_at(&cfg, 5.0).unwrap(), &cfg.c0) < 1e-14);
    }

    #[test]
    fn identity_profile_is_scaled_identity() {
        let prob = InverseProblem::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        for alpha in [1.0, 1.25, 2.0] {
            let cfg = FlowConfig::new(alpha, DMatrix::identity(3, 3), DVector::zeros(3), &prob).unwrap();
            let c_hat = asymptotic_profile(&cfg);
            assert!((c_hat - DMatrix::identity(3, 3) / alpha).norm() < 1e-14);
        }
    }

    #[test]
    fn self_similar_examples() {
        let op = CovOperatorA { alpha: 2.0, b: DMatrix::identity(2, 2) };
        let id = DMatrix::<f64>::identity(2, 2);
        let c = self_similar_evolution(&op, &id, 1.0, 0.5).unwrap();
        assert!((c - &id * 0.5).norm() < 1e-15);
        // lambda = 0 requires A(C_hat) = 0
        let op0 = CovOperatorA { alpha: 2.0, b: DMatrix::zeros(2, 2) };
        assert_eq!(self_similar_evolution(&op0, &id, 0.0, 7.0).unwrap(), id);
        assert!(matches!(self_similar_evolution(&op, &id, 0.3, 1.0), Err(EkiError::NotAnEigenpair { .. })));
    }

    #[test]
    fn profile_is_self_similar_with_lambda_one_over_alpha() {
        let a = dmatrix![1.0, 2.0, 0.0; 0.0, 1.0, -1.0; 1.0, 0.0, 3.0];
        let prob = InverseProblem::new(a, DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        let c0 = dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, 0.2; 0.0, 0.2, 1.5];
        for alpha in [1.0, 2.0] {
            let cfg = FlowConfig::new(alpha, c0.clone(), DVector::zeros(3), &prob).unwrap();
            let c_hat = asymptotic_profile(&cfg);
            let from_hat = FlowConfig::new(alpha, c_hat.clone(), DVector::zeros(3), &prob).unwrap();
            for t in [0.1, 1.0, 10.0] {
                let s = self_similar_evolution(&cfg.operator(), &c_hat, 1.0 / alpha, t).unwrap();
                assert!(rel_frobenius(&s, &covariance_at(&from_hat, t).unwrap()) < 1e-8);
            }
        }
    }

    #[test]
    fn operator_of_zero_is_zero() {
        let op = CovOperatorA { alpha: 2.0, b: DMatrix::identity(2, 2) };
        assert_eq!(apply_operator_a(&op, &DMatrix::zeros(2, 2)).unwrap(), DMatrix::zeros(2, 2));
        assert!(apply_operator_a(&op, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn invalid_time_and_alpha_rejected() {
        assert!(covariance_at(&example_22(1.0), -1.0).is_err());
        assert!(example_22(1.0).with_alpha(0.5).is_err());
    }
}
