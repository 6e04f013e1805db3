//! Mean and residual flow `dx/dt = -C(t) A^T Γ^{-1} (A x - y)`.
//!
//! Every quantity driven by the covariance flow (ensemble mean, mean-field
//! mean, single particles, deviations, residuals) obeys this equation and
//! differs only in its initial value, so one solver serves all of them.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{limit_projector, FlowConfig};
use crate::error::{check_len, check_square, EkiError, Result};
use crate::linalg::{
    check_spd, check_time, gamma_projection, pseudo_inverse_gamma, weighted_least_squares, WeightedNorm,
};
use crate::problem::InverseProblem;

/// Value of the flow at time `t` started from `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSolution {
    pub t: f64,
    pub x: DVector<f64>,
    pub x0: DVector<f64>,
}

impl MeanSolution {
    pub fn at(cfg: &FlowConfig, prob: &InverseProblem, x0: &DVector<f64>, t: f64) -> Result<Self> {
        Ok(Self { t, x: mean_at(cfg, prob, x0, t)?, x0: x0.clone() })
    }
}

/// Long-time limit split into its noise-free part and the noise shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticLimit {
    pub x_dagger: DVector<f64>,
    pub noise_shift: DVector<f64>,
    pub x_infinity: DVector<f64>,
}

/// `(1 + alpha t mu)^{-1/alpha}` evaluated without cancellation.
fn decay(mu: f64, alpha: f64, t: f64) -> f64 {
    (-(alpha * t * mu).ln_1p() / alpha).exp()
}

/// `(1 - (1 + alpha t mu)^{-1/alpha}) / mu`, and `t` for `mu = 0`.
fn source_gain(mu: f64, alpha: f64, t: f64) -> f64 {
    if mu > 0.0 {
        -(-(alpha * t * mu).ln_1p() / alpha).exp_m1() / mu
    } else {
        t
    }
}

/// Closed-form solution
/// `x(t) = P(t)^{1/alpha} x0 + S diag(g_i(t)) S^{-1} C0 A^T Γ^{-1} y`
/// with `P(t) = C(t) C0^{-1}` and the time integral evaluated per eigenvalue.
pub fn mean_at(cfg: &FlowConfig, prob: &InverseProblem, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_time(t)?;
    check_len("x0", x0, cfg.dim())?;
    check_len("problem parameter dimension", &DVector::zeros(prob.n()), cfg.dim())?;
    let alpha = cfg.alpha;
    let spec = &cfg.spec;
    let source = &cfg.c0 * (prob.at_gamma_inv() * &prob.y);
    let z0 = &spec.s_inv * x0;
    let zs = &spec.s_inv * source;
    let coeffs = DVector::from_fn(spec.dim(), |i, _| {
        let mu = spec.mu[i];
        decay(mu, alpha, t) * z0[i] + source_gain(mu, alpha, t) * zs[i]
    });
    Ok(&spec.s * coeffs)
}

/// Split form for `y = A u_truth + eps`:
/// `x(t) = x0 + (E - P(t)^{1/alpha})(u_truth - x0) + S diag(g_i(t)) S^{-1} C0 A^T Γ^{-1} eps`.
pub fn solution_with_truth(cfg: &FlowConfig, prob: &InverseProblem, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_time(t)?;
    check_len("x0", x0, cfg.dim())?;
    let (u_truth, eps) = match (&prob.u_truth, &prob.eps) {
        (Some(u), Some(e)) => (u, e),
        _ => return Err(EkiError::MissingTruth),
    };
    let alpha = cfg.alpha;
    let spec = &cfg.spec;
    let zu = &spec.s_inv * (u_truth - x0);
    let ze = &spec.s_inv * (&cfg.c0 * (prob.at_gamma_inv() * eps));
    let coeffs = DVector::from_fn(spec.dim(), |i, _| {
        let mu = spec.mu[i];
        (1.0 - decay(mu, alpha, t)) * zu[i] + source_gain(mu, alpha, t) * ze[i]
    });
    Ok(x0 + &spec.s * coeffs)
}

/// `x_dagger = x0 + (E - C_inf C0^{-1})(u_truth - x0)` and
/// `noise_shift = (A^T Γ^{-1} A)^- A^T Γ^{-1} eps`. Without a known truth the
/// limit is evaluated from a least-squares preimage of the projected datum,
/// which gives the minimal-`C0`-norm solution of `A x = Π y`.
pub fn asymptotic_limit(cfg: &FlowConfig, prob: &InverseProblem, x0: &DVector<f64>) -> Result<AsymptoticLimit> {
    check_len("x0", x0, cfg.dim())?;
    let n = cfg.dim();
    let complement = DMatrix::identity(n, n) - limit_projector(&cfg.spec);
    match (&prob.u_truth, &prob.eps) {
        (Some(u), eps) => {
            let x_dagger = x0 + &complement * (u - x0);
            let noise_shift = match eps {
                Some(e) => pseudo_inverse_gamma(&cfg.spec, &cfg.c0) * (prob.at_gamma_inv() * e),
                None => DVector::zeros(n),
            };
            let x_infinity = &x_dagger + &noise_shift;
            Ok(AsymptoticLimit { x_dagger, noise_shift, x_infinity })
        }
        (None, _) => {
            let xi = weighted_least_squares(&prob.y, &prob.a, &prob.gamma)?;
            let x_infinity = x0 + &complement * (xi - x0);
            Ok(AsymptoticLimit { x_dagger: x_infinity.clone(), noise_shift: DVector::zeros(n), x_infinity })
        }
    }
}

/// `argmin { ||x - x0||_{C0} : A x = y_target }` from the KKT system
/// `[C0^{-1} A^T; A 0] [x; lambda] = [C0^{-1} x0; y_target]`.
///
/// The target is Γ-projected onto `ran(A)` first; a target that moves by more
/// than `1e-8 (1 + ||y_target||)` under projection is infeasible.
pub fn minimal_norm_solution(
    c0: &DMatrix<f64>,
    x0: &DVector<f64>,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    y_target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    check_square("C0", c0, n)?;
    check_len("x0", x0, n)?;
    check_len("y_target", y_target, m)?;
    check_spd("C0", c0)?;
    let projected = gamma_projection(y_target, a, gamma)?;
    let residual = (y_target - &projected).norm();
    if residual > 1e-8 * (1.0 + y_target.norm()) {
        return Err(EkiError::Infeasible { residual });
    }
    let c0_inv = WeightedNorm::new(c0.clone())?.inverse();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&c0_inv);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(&c0_inv * x0));
    rhs.rows_mut(n, m).copy_from(&projected);
    // Dependent rows of A make the multiplier non-unique; the SVD solve
    // still pins x.
    let svd = kkt.svd(true, true);
    let smax = svd.singular_values.max();
    let sol = svd.solve(&rhs, 1e-13 * smax * (n + m) as f64).map_err(|_| EkiError::Singular("KKT system"))?;
    Ok(sol.rows(0, n).into_owned())
}

/// Explicit constants for the rate bounds of the noise-free flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBounds {
    /// Bound on `||x(t) - x_dagger||`, equal to `k_param (1 / (mu_k t))^{1/alpha}`.
    pub param: f64,
    /// Bound on `||A x(t) - y||_Γ`, equal to `k_obs (mu_1 / t)^{1/alpha}`.
    pub obs: f64,
    pub k_param: f64,
    pub k_obs: f64,
}

/// Rate certificates for clean data `y = A xi`.
///
/// With `z = S^{-1}(x0 - xi)`, `s_i` the columns of `S` and `w_i = Γ^{-1/2} A s_i`,
/// the diagonalized error is `x(t) - x_dagger = sum_{i<=k} (1 + alpha t mu_i)^{-1/alpha} z_i s_i`.
/// Bounding `(1 + alpha t mu_i)^{-1/alpha} <= (alpha t mu_i)^{-1/alpha}` term by term:
///
/// * `k_param = sum_i |z_i| ||s_i|| (alpha mu_i / mu_k)^{-1/alpha}`
/// * `k_obs   = sum_i |z_i| ||w_i|| (alpha mu_i mu_1)^{-1/alpha}`
pub fn rate_certificates(cfg: &FlowConfig, prob: &InverseProblem, x0: &DVector<f64>, t: f64) -> Result<RateBounds> {
    check_time(t)?;
    check_len("x0", x0, cfg.dim())?;
    if let Some(eps) = &prob.eps {
        if eps.norm() > 0.0 {
            return Err(EkiError::NoisyData { residual: eps.norm() });
        }
    }
    let projected = prob.projected_data()?;
    let residual = (&prob.y - &projected).norm();
    if residual > 1e-10 * (1.0 + prob.y.norm()) {
        return Err(EkiError::NoisyData { residual });
    }
    let spec = &cfg.spec;
    let (Some(gap), true) = (spec.gap(), spec.rank_k > 0) else {
        return Ok(RateBounds { param: 0.0, obs: 0.0, k_param: 0.0, k_obs: 0.0 });
    };
    let alpha = cfg.alpha;
    let mu_1 = spec.mu_max();
    let xi = weighted_least_squares(&prob.y, &prob.a, &prob.gamma)?;
    let z = &spec.s_inv * (x0 - xi);
    let b = cfg.b();
    let mut k_param = 0.0;
    let mut k_obs = 0.0;
    for i in 0..spec.rank_k {
        let mu = spec.mu[i];
        let s_i = spec.s.column(i);
        let w_norm = (s_i.transpose() * b * s_i)[(0, 0)].max(0.0).sqrt();
        k_param += z[i].abs() * s_i.norm() * (alpha * mu / gap).powf(-1.0 / alpha);
        k_obs += z[i].abs() * w_norm * (alpha * mu * mu_1).powf(-1.0 / alpha);
    }
    let param = k_param * (1.0 / (gap * t)).powf(1.0 / alpha);
    let obs = k_obs * (mu_1 / t).powf(1.0 / alpha);
    Ok(RateBounds { param, obs, k_param, k_obs })
}

/// `u_MAP(t) = m0 + t C0 (E + t B C0)^{-1} A^T Γ^{-1} (y - A m0)`.
pub fn map_estimator(
    c0: &DMatrix<f64>,
    m0: &DVector<f64>,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    y: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_time(t)?;
    let (m, n) = a.shape();
    check_square("C0", c0, n)?;
    check_len("m0", m0, n)?;
    check_len("y", y, m)?;
    let weight = WeightedNorm::new(gamma.clone())?;
    let at_gi = weight.apply_inverse_mat(a).transpose();
    let k = DMatrix::identity(n, n) + &at_gi * a * c0 * t;
    let rhs = at_gi * (y - a * m0);
    let v = k.lu().solve(&rhs).ok_or(EkiError::Singular("E + t B C0"))?;
    Ok(m0 + c0 * v * t)
}

/// Replace `y` by its Γ-projection onto `ran(A)`; the flow never sees the
/// orthogonal part. A stored noise vector is projected along with it.
pub fn strip_orthogonal_data(prob: &InverseProblem) -> Result<InverseProblem> {
    let y_bar = prob.projected_data()?;
    let mut stripped = prob.with_data(y_bar)?;
    if let (Some(u), Some(e)) = (&prob.u_truth, &prob.eps) {
        let e_bar = gamma_projection(e, &prob.a, &prob.gamma)?;
        stripped.set_truth(u.clone(), e_bar)?;
    }
    Ok(stripped)
}
