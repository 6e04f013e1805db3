//! Dense linear algebra shared by the flows: weighted inner products, SPD
//! square roots, the real diagonalization of `C0 * B` for symmetric `C0 > 0`
//! and `B >= 0`, functions of the preconditioned covariance, and the
//! Γ-orthogonal projection onto `ran(A)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{check_len, check_square, EkiError, Result};

/// Relative Frobenius asymmetry accepted for "symmetric" inputs.
pub const TOL_SYM: f64 = 1e-12;
/// Eigenvalues of `C0 * B` at or below `TOL_RANK * mu_1` are treated as zero.
pub const TOL_RANK: f64 = 1e-10;
/// Negative eigenvalues of the symmetrized product below this (relative)
/// magnitude are rounding and get clamped to zero.
pub const TOL_EIG: f64 = 1e-10;
/// Negative eigenvalues beyond this relative magnitude mean `B` is indefinite.
const TOL_INDEFINITE: f64 = 1e-6;

pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / scale
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_symmetric(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_square(what, m, m.nrows())?;
    let asymmetry = relative_asymmetry(m);
    if asymmetry > TOL_SYM {
        return Err(EkiError::NotSymmetric { what, asymmetry });
    }
    Ok(())
}

/// Symmetric within [`TOL_SYM`] and all eigenvalues strictly positive.
pub fn check_spd(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(what, m)?;
    if m.nrows() == 0 || !m.iter().all(|v| v.is_finite()) {
        return Err(EkiError::NotPositiveDefinite { what });
    }
    let (values, _) = sym_eigen_desc(m);
    if values[values.len() - 1] <= 0.0 {
        return Err(EkiError::NotPositiveDefinite { what });
    }
    Ok(())
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and the
/// eigenvector columns permuted accordingly.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Flip each column so that its first non-negligible entry is positive.
/// Returns the applied signs.
pub fn fix_column_signs(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let peak = col.amax();
        let sign = col.iter().find(|v| v.abs() > 1e-12 * peak).map_or(1.0, |v| v.signum());
        if sign < 0.0 {
            col.neg_mut();
        }
        signs.push(sign);
    }
    signs
}

/// Symmetric square root `R` with `R * R = M` for SPD `M`.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_sqrt_with_inverse(m)?.0)
}

/// `(M^{1/2}, M^{-1/2})` from one eigendecomposition.
pub fn spd_sqrt_with_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_spd("matrix", m)?;
    let (values, q) = sym_eigen_desc(m);
    let root = DVector::from_iterator(values.len(), values.iter().map(|v| v.sqrt()));
    let inv_root = root.map(|v| 1.0 / v);
    let r = symmetrize(&(&q * DMatrix::from_diagonal(&root) * q.transpose()));
    let r_inv = symmetrize(&(&q * DMatrix::from_diagonal(&inv_root) * q.transpose()));
    Ok((r, r_inv))
}

/// Weight for the inner product `<x, y>_H = <x, H^{-1} y>`.
#[derive(Debug, Clone)]
pub struct WeightedNorm {
    pub h: DMatrix<f64>,
    hinv_factor: Cholesky<f64, Dyn>,
}

impl WeightedNorm {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        check_symmetric("weight", &h)?;
        let hinv_factor = Cholesky::new(symmetrize(&h)).ok_or(EkiError::NotPositiveDefinite { what: "weight" })?;
        Ok(Self { h, hinv_factor })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// `H^{-1} x`.
    pub fn apply_inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        self.hinv_factor.solve(x)
    }

    /// `H^{-1} X` column by column.
    pub fn apply_inverse_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.hinv_factor.solve(x)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.hinv_factor.inverse())
    }

    /// Lower Cholesky factor `L` with `H = L L^T`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.hinv_factor.l()
    }

    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.apply_inverse(x))
    }
}

pub fn weighted_inner(x: &DVector<f64>, y: &DVector<f64>, h: &WeightedNorm) -> Result<f64> {
    check_len("weighted_inner x", x, h.dim())?;
    check_len("weighted_inner y", y, h.dim())?;
    Ok(x.dot(&h.apply_inverse(y)))
}

/// Spectral data of `M = C0 * B`: `M = S diag(mu) S^{-1}` with `mu` sorted
/// descending, exactly zero past `rank_k`, and unit-norm columns of `S`
/// whose first non-negligible entry is positive.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub rank_k: usize,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Largest eigenvalue `mu_1` (zero for `B = 0`).
    pub fn mu_max(&self) -> f64 {
        if self.mu.is_empty() {
            0.0
        } else {
            self.mu[0]
        }
    }

    /// Smallest non-zero eigenvalue `mu_k`, the spectral gap.
    pub fn gap(&self) -> Option<f64> {
        self.rank_k.checked_sub(1).map(|i| self.mu[i])
    }

    /// `S diag(f(mu_i)) S^{-1}`.
    pub fn map_diag(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.mu.map(f);
        let mut sd = self.s.clone();
        for (mut col, v) in sd.column_iter_mut().zip(d.iter()) {
            col *= *v;
        }
        sd * &self.s_inv
    }

    /// `S diag(mu) S^{-1}`.
    pub fn reassemble(&self) -> DMatrix<f64> {
        self.map_diag(|m| m)
    }
}

/// Diagonalize `C0 * B` through the symmetric similarity
/// `C0^{1/2} B C0^{1/2} = Q diag(mu) Q^T`, so `S = C0^{1/2} Q` (columns
/// rescaled) and the spectrum is real by construction.
pub fn diagonalize_product(c0: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SpectralData> {
    let n = c0.nrows();
    check_spd("C0", c0)?;
    check_square("B", b, n)?;
    let (root, root_inv) = spd_sqrt_with_inverse(c0)?;
    let k = symmetrize(&(&root * b * &root));
    let (mut mu, q) = sym_eigen_desc(&k);

    let scale = mu.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for v in mu.iter_mut() {
        if *v < -TOL_INDEFINITE * scale {
            return Err(EkiError::NotPositiveSemidefinite { what: "B", value: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mu_1 = mu[0];
    let rank_k = if mu_1 > 0.0 { mu.iter().filter(|&&v| v > TOL_RANK * mu_1).count() } else { 0 };
    for v in mu.iter_mut().skip(rank_k) {
        *v = 0.0;
    }

    let mut s = &root * &q;
    let norms: Vec<f64> = s.column_iter().map(|c| c.norm()).collect();
    for (mut col, nrm) in s.column_iter_mut().zip(&norms) {
        col /= *nrm;
    }
    let signs = fix_column_signs(&mut s);
    // S^{-1} = diag(sign * norm) Q^T C0^{-1/2}, no general inverse needed.
    let mut s_inv = q.transpose() * &root_inv;
    for (i, mut row) in s_inv.row_iter_mut().enumerate() {
        row *= signs[i] * norms[i];
    }
    Ok(SpectralData { s, s_inv, mu, rank_k })
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(EkiError::InvalidArgument(format!("time must be finite and non-negative, got {t}")));
    }
    Ok(())
}

/// `(E + t M)^{-1} = S diag(1 / (1 + t mu_i)) S^{-1}` for `t >= 0`.
pub fn resolvent(spec: &SpectralData, t: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    Ok(spec.map_diag(|m| 1.0 / (1.0 + t * m)))
}

/// `(C(t) C0^{-1})^p = S diag((1 + alpha t mu_i)^{-p}) S^{-1}`.
pub fn precond_cov_power(spec: &SpectralData, t: f64, alpha: f64, p: f64) -> Result<DMatrix<f64>> {
    check_time(t)?;
    check_alpha(alpha)?;
    Ok(spec.map_diag(|m| (1.0 + alpha * t * m).powf(-p)))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(EkiError::InvalidArgument(format!("alpha must be finite and >= 1, got {alpha}")));
    }
    Ok(())
}

/// `(A^T Γ^{-1} A)^- := S D^+ S^{-1} C0`. Satisfies the two multiplicative
/// Penrose identities but is not symmetric in general.
pub fn pseudo_inverse_gamma(spec: &SpectralData, c0: &DMatrix<f64>) -> DMatrix<f64> {
    spec.map_diag(|m| if m > 0.0 { 1.0 / m } else { 0.0 }) * c0
}

/// Whitened SVD pieces used by the projection and least-squares routines.
struct WhitenedRange {
    l: DMatrix<f64>,
    u_r: DMatrix<f64>,
    sigma_r: DVector<f64>,
    v_r: DMatrix<f64>,
    y_white: DVector<f64>,
}

fn whitened_range(y: &DVector<f64>, a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<WhitenedRange> {
    let m = a.nrows();
    check_square("Gamma", gamma, m)?;
    check_len("y", y, m)?;
    let weight = WeightedNorm::new(gamma.clone())?;
    let l = weight.factor();
    let l_lu = l.clone().lu();
    let a_white = l_lu.solve(a).ok_or(EkiError::Singular("Gamma factor"))?;
    let y_white = l_lu.solve(y).ok_or(EkiError::Singular("Gamma factor"))?;
    let svd = a_white.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = 1e-12 * smax * (a.nrows().max(a.ncols()) as f64);
    let keep: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cut && smax > 0.0).collect();
    let u_r = DMatrix::from_fn(m, keep.len(), |r, c| u[(r, keep[c])]);
    let v_r = DMatrix::from_fn(a.ncols(), keep.len(), |r, c| v_t[(keep[c], r)]);
    let sigma_r = DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i]));
    Ok(WhitenedRange { l, u_r, sigma_r, v_r, y_white })
}

/// Γ-orthogonal projection of `y` onto `ran(A)`.
pub fn gamma_projection(y: &DVector<f64>, a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let w = whitened_range(y, a, gamma)?;
    let p = &w.u_r * (w.u_r.transpose() * &w.y_white);
    Ok(&w.l * p)
}

/// Minimum-Euclidean-norm minimizer of `||A x - y||_Γ`; a preimage of the
/// projected datum.
pub fn weighted_least_squares(y: &DVector<f64>, a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let w = whitened_range(y, a, gamma)?;
    let coeffs = (w.u_r.transpose() * &w.y_white).component_div(&w.sigma_r);
    Ok(&w.v_r * coeffs)
}

/// Orthonormal basis for the column space of `m` (rank-revealing SVD).
pub fn column_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| smax > 0.0 && svd.singular_values[i] > rel_tol * smax).collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// `||a - b||_F / max(||b||_F, floor)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
