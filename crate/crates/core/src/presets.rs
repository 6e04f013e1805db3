//! Named problem setups and seeded random instances.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::problem::InverseProblem;

/// Forward problem plus initial moments.
#[derive(Debug, Clone)]
pub struct Setup {
    pub prob: InverseProblem,
    pub m0: DVector<f64>,
    pub c0: DMatrix<f64>,
}

/// `A = diag(4, 1)`, `Γ = I`, `m0 = (4, 4)`, `C0 = [[2, -1], [-1, 2]]`, `y = 0`.
pub fn fig_covariances() -> Setup {
    Setup {
        prob: InverseProblem::new(dmatrix![4.0, 0.0; 0.0, 1.0], DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .expect("valid preset"),
        m0: dvector![4.0, 4.0],
        c0: dmatrix![2.0, -1.0; -1.0, 2.0],
    }
}

/// Rank-one observation `A = (0, 1)`, `Γ = 1`, `C0 = [[2, 1], [1, 1]]`.
pub fn profile_example() -> Setup {
    Setup {
        prob: InverseProblem::new(dmatrix![0.0, 1.0], dmatrix![1.0], dvector![1.0]).expect("valid preset"),
        m0: dvector![0.0, 0.0],
        c0: dmatrix![2.0, 1.0; 1.0, 1.0],
    }
}

/// `A = diag(100, 1)`, `y = 0`, `m0 = (100, 100)`, `C0 = [[25, -24], [-24, 25]]`.
pub fn nonmonotone_example() -> Setup {
    Setup {
        prob: InverseProblem::new(dmatrix![100.0, 0.0; 0.0, 1.0], DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .expect("valid preset"),
        m0: dvector![100.0, 100.0],
        c0: dmatrix![25.0, -24.0; -24.0, 25.0],
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `G G^T / n + floor I` with Gaussian `G`.
pub fn random_spd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n);
    let m = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * floor;
    (&m + m.transpose()) * 0.5
}

/// SPD matrix with the given eigenvalues and a random orthonormal basis.
pub fn random_spd_with_spectrum(rng: &mut impl Rng, eigenvalues: &[f64]) -> DMatrix<f64> {
    let n = eigenvalues.len();
    let q = gaussian_matrix(rng, n, n).qr().q();
    let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Gaussian `A` (m x n), SPD `Γ` and `C0`, Gaussian `m0` and `y`.
pub fn random_setup(n: usize, m: usize, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian_matrix(&mut rng, m, n);
    let gamma = random_spd(&mut rng, m, 0.5);
    let c0 = random_spd(&mut rng, n, 0.5);
    let m0 = gaussian_vector(&mut rng, n);
    let y = gaussian_vector(&mut rng, m);
    Setup { prob: InverseProblem::new(a, gamma, y).expect("random setup is valid"), m0, c0 }
}

/// Like [`random_setup`] but with clean data `y = A u_truth`.
pub fn random_clean_setup(n: usize, m: usize, seed: u64) -> Setup {
    let mut base = random_setup(n, m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let u = gaussian_vector(&mut rng, n);
    let prob = InverseProblem::with_truth(base.prob.a.clone(), base.prob.gamma.clone(), u, DVector::zeros(m))
        .expect("random setup is valid");
    base.prob = prob;
    base
}
