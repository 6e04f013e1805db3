use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, check_square, EkiError, Result};
use crate::linalg::{check_spd, gamma_projection, WeightedNorm};

/// Linear inverse problem `y = A u + noise` with Gaussian noise covariance Γ.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub a: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub y: DVector<f64>,
    pub u_truth: Option<DVector<f64>>,
    pub eps: Option<DVector<f64>>,
    gamma_norm: WeightedNorm,
}

impl InverseProblem {
    pub fn new(a: DMatrix<f64>, gamma: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || a.ncols() == 0 {
            return Err(EkiError::InvalidArgument("forward operator must be non-empty".into()));
        }
        check_square("Gamma", &gamma, m)?;
        check_len("y", &y, m)?;
        check_spd("Gamma", &gamma)?;
        let gamma_norm = WeightedNorm::new(gamma.clone())?;
        Ok(Self { a, gamma, y, u_truth: None, eps: None, gamma_norm })
    }

    /// Problem with known truth: `y = A u_truth + eps`.
    pub fn with_truth(a: DMatrix<f64>, gamma: DMatrix<f64>, u_truth: DVector<f64>, eps: DVector<f64>) -> Result<Self> {
        check_len("u_truth", &u_truth, a.ncols())?;
        check_len("eps", &eps, a.nrows())?;
        let y = &a * &u_truth + &eps;
        let mut prob = Self::new(a, gamma, y)?;
        prob.u_truth = Some(u_truth);
        prob.eps = Some(eps);
        Ok(prob)
    }

    /// Attach truth and noise to an existing datum, checking consistency.
    pub fn set_truth(&mut self, u_truth: DVector<f64>, eps: DVector<f64>) -> Result<()> {
        check_len("u_truth", &u_truth, self.n())?;
        check_len("eps", &eps, self.m())?;
        let mismatch = (&self.y - &self.a * &u_truth - &eps).norm();
        if mismatch > 1e-10 * (1.0 + self.y.norm()) {
            return Err(EkiError::InvalidArgument(format!("y != A u_truth + eps (mismatch {mismatch:.3e})")));
        }
        self.u_truth = Some(u_truth);
        self.eps = Some(eps);
        Ok(())
    }

    /// Parameter dimension.
    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// Observation dimension.
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn gamma_norm(&self) -> &WeightedNorm {
        &self.gamma_norm
    }

    /// `A^T Γ^{-1}` (n x m).
    pub fn at_gamma_inv(&self) -> DMatrix<f64> {
        self.gamma_norm.apply_inverse_mat(&self.a).transpose()
    }

    /// `B = A^T Γ^{-1} A`, symmetrized.
    pub fn precision_gram(&self) -> DMatrix<f64> {
        let b = self.at_gamma_inv() * &self.a;
        crate::linalg::symmetrize(&b)
    }

    /// `||v||_Γ^2` for an observation-space vector.
    pub fn obs_norm_sq(&self, v: &DVector<f64>) -> f64 {
        self.gamma_norm.norm_sq(v)
    }

    /// Γ-orthogonal projection of the datum onto `ran(A)`.
    pub fn projected_data(&self) -> Result<DVector<f64>> {
        gamma_projection(&self.y, &self.a, &self.gamma)
    }

    pub fn with_data(&self, y: DVector<f64>) -> Result<Self> {
        let mut p = Self::new(self.a.clone(), self.gamma.clone(), y)?;
        p.u_truth = self.u_truth.clone();
        p.eps = None;
        Ok(p)
    }

    pub fn check_prior(&self, m0: &DVector<f64>, c0: &DMatrix<f64>) -> Result<()> {
        check_len("m0", m0, self.n())?;
        check_square("C0", c0, self.n())?;
        check_spd("C0", c0)
    }
}
