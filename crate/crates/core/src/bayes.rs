//! Exact Gaussian posterior of the linear model, by two algebraic routes.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::covariance::{covariance_at, FlowConfig};
use crate::error::{check_len, check_square, EkiError, Result};
use crate::linalg::{check_spd, check_time, symmetrize};
use crate::mean::mean_at;
use crate::problem::InverseProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_square("covariance", &cov, mean.len())?;
        check_spd("covariance", &cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_prior(prior: &GaussianMeasure, prob: &InverseProblem) -> Result<()> {
    check_len("prior mean", &prior.mean, prob.n())
}

/// Resolvent form: `cov = C0 (E + B C0)^{-1}`,
/// `mean = (E + C0 B)^{-1} (m0 + C0 A^T Γ^{-1} y)`.
pub fn exact_posterior(prior: &GaussianMeasure, prob: &InverseProblem) -> Result<GaussianMeasure> {
    check_prior(prior, prob)?;
    let n = prior.dim();
    let b = prob.precision_gram();
    let c0 = &prior.cov;
    let k = DMatrix::identity(n, n) + &b * c0;
    // C0 (E + B C0)^{-1} = ((E + B C0)^{-T} C0)^T = ((E + C0 B)^{-1} C0)^T
    let kt = k.transpose().lu();
    let cov = symmetrize(&kt.solve(c0).ok_or(EkiError::Singular("E + C0 B"))?.transpose());
    let mean = kt.solve(&(&prior.mean + c0 * (prob.at_gamma_inv() * &prob.y))).ok_or(EkiError::Singular("E + C0 B"))?;
    Ok(GaussianMeasure { mean, cov })
}

/// Information form: `cov = (C0^{-1} + B)^{-1}`, `mean = cov (C0^{-1} m0 + A^T Γ^{-1} y)`.
pub fn exact_posterior_information(prior: &GaussianMeasure, prob: &InverseProblem) -> Result<GaussianMeasure> {
    check_prior(prior, prob)?;
    let prior_chol =
        Cholesky::new(symmetrize(&prior.cov)).ok_or(EkiError::NotPositiveDefinite { what: "prior covariance" })?;
    let precision = symmetrize(&(prior_chol.inverse() + prob.precision_gram()));
    let post_chol = Cholesky::new(precision).ok_or(EkiError::NotPositiveDefinite { what: "posterior precision" })?;
    let cov = symmetrize(&post_chol.inverse());
    let mean = post_chol.solve(&(prior_chol.solve(&prior.mean) + prob.at_gamma_inv() * &prob.y));
    Ok(GaussianMeasure { mean, cov })
}

/// `(|m(t) - mu_post|, |C(t) - Sigma_post|_F)` with the prior `(m0, C0)` of `cfg`.
pub fn posterior_gap(cfg: &FlowConfig, prob: &InverseProblem, t: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    let post = exact_posterior(&GaussianMeasure { mean: cfg.m0.clone(), cov: cfg.c0.clone() }, prob)?;
    let m = mean_at(cfg, prob, &cfg.m0, t)?;
    let c = covariance_at(cfg, t)?;
    Ok(((m - post.mean).norm(), (c - post.cov).norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn fig() -> (GaussianMeasure, InverseProblem) {
        let prior = GaussianMeasure::new(dvector![4.0, 4.0], dmatrix![2.0, -1.0; -1.0, 2.0]).unwrap();
        let prob =
            InverseProblem::new(dmatrix![4.0, 0.0; 0.0, 1.0], DMatrix::identity(2, 2), dvector![0.0, 0.0]).unwrap();
        (prior, prob)
    }

    #[test]
    fn zero_operator_keeps_prior() {
        let (prior, _) = fig();
        let prob = InverseProblem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), dvector![1.0, 1.0]).unwrap();
        let post = exact_posterior(&prior, &prob).unwrap();
        assert!((post.mean - &prior.mean).norm() < 1e-15);
        assert!((post.cov - &prior.cov).norm() < 1e-15);
    }

    #[test]
    fn uninformative_noise_keeps_prior() {
        let (prior, fig_prob) = fig();
        let prob = InverseProblem::new(fig_prob.a.clone(), DMatrix::identity(2, 2) * 1e12, dvector![1.0, 1.0]).unwrap();
        let post = exact_posterior(&prior, &prob).unwrap();
        assert!((post.mean - &prior.mean).norm() < 1e-6);
        assert!((post.cov - &prior.cov).norm() < 1e-6);
    }

    #[test]
    fn routes_agree_on_fig_setup() {
        let (prior, prob) = fig();
        let a = exact_posterior(&prior, &prob).unwrap();
        let b = exact_posterior_information(&prior, &prob).unwrap();
        assert!((&a.mean - &b.mean).norm() < 1e-10);
        assert!((&a.cov - &b.cov).norm() < 1e-10);
        // posterior contraction
        let diff = &prior.cov - &a.cov;
        assert!(crate::linalg::sym_eigen_desc(&diff).0.min() >= -1e-10);
    }

    #[test]
    fn gap_vanishes_only_for_mean_field() {
        let (prior, prob) = fig();
        let mf = FlowConfig::new(1.0, prior.cov.clone(), prior.mean.clone(), &prob).unwrap();
        let (gm, gc) = posterior_gap(&mf, &prob, 1.0).unwrap();
        assert!(gm <= 1e-9 && gc <= 1e-9);
        let det = mf.with_alpha(2.0).unwrap();
        let (gm, gc) = posterior_gap(&det, &prob, 1.0).unwrap();
        assert!(gm > 0.0 && gc > 0.0);
        // time rescaling matches the covariance but not the mean
        let (gm_half, gc_half) = posterior_gap(&det, &prob, 0.5).unwrap();
        assert!(gc_half < 1e-12);
        assert!(gm_half > 1e-3);
    }
}
