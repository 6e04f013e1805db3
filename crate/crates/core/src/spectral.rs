//! Eigenvalue/eigenvector dynamics of the covariance flow.
//!
//! The pair `(lambda_i, v_i)` of `C(t)` evolves by
//! `lambda_i' = -alpha lambda_i^2 |A v_i|_Γ^2` and
//! `v_i' = sum_{j non-degenerate} alpha lambda_i lambda_j / (lambda_j - lambda_i) <A v_i, A v_j>_Γ v_j`,
//! with `<A v_i, A v_j>_Γ = 0` enforced inside degenerate eigenspaces.

use nalgebra::{DMatrix, DVector};

use crate::covariance::FlowConfig;
use crate::error::{check_square, EkiError, Result};
use crate::linalg::{check_alpha, check_time, sym_eigen_desc, symmetrize};
use crate::ode::{rk4_step, step_count};
use crate::problem::InverseProblem;

/// Relative gap below which two eigenvalues are treated as one.
pub const TOL_DEGENERATE: f64 = 1e-8;

/// Eigenvalues sorted descending with matching orthonormal eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenState {
    pub lambdas: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub t: f64,
}

impl EigenState {
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        symmetrize(&(&self.vectors * DMatrix::from_diagonal(&self.lambdas) * self.vectors.transpose()))
    }

    /// `||V^T V - I||_F`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.dim();
        (self.vectors.transpose() * &self.vectors - DMatrix::identity(n, n)).norm()
    }

    fn sorted(lambdas: &DVector<f64>, vectors: &DMatrix<f64>, t: f64) -> Self {
        let n = lambdas.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| lambdas[j].total_cmp(&lambdas[i]));
        let mut v = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            v.set_column(dst, &vectors.column(src));
        }
        Self { lambdas: DVector::from_iterator(n, order.iter().map(|&i| lambdas[i])), vectors: v, t }
    }
}

/// Time at which two eigenvalue trajectories met or swapped order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingEvent {
    pub t: f64,
    /// Trajectory indices (initial ordering) of the pair.
    pub pair: (usize, usize),
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeTrajectory {
    pub states: Vec<EigenState>,
    pub crossings: Vec<CrossingEvent>,
}

impl DaeTrajectory {
    pub fn final_state(&self) -> &EigenState {
        self.states.last().expect("trajectory always holds the initial state")
    }

    /// Largest eigenvalue at every recorded time.
    pub fn lambda1(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.lambdas[0]).collect()
    }
}

/// Right-hand side data: `B = A^T Γ^{-1} A`, `alpha` and the absolute
/// degeneracy threshold.
#[derive(Debug, Clone)]
pub struct DaeSystem {
    pub b: DMatrix<f64>,
    pub alpha: f64,
    pub tol_degenerate: f64,
}

impl DaeSystem {
    /// Threshold `TOL_DEGENERATE * lambda_1(C0)`.
    pub fn new(cfg: &FlowConfig) -> Self {
        let lambda_1 = sym_eigen_desc(&cfg.c0).0[0];
        Self { b: cfg.b().clone(), alpha: cfg.alpha, tol_degenerate: TOL_DEGENERATE * lambda_1 }
    }

    /// `(lambda', V')` at `(lambdas, vectors)`; pairs closer than the
    /// degeneracy threshold do not couple.
    pub fn rhs(&self, lambdas: &DVector<f64>, vectors: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = lambdas.len();
        let gram = vectors.transpose() * &self.b * vectors;
        let dl = DVector::from_fn(n, |i, _| -self.alpha * lambdas[i] * lambdas[i] * gram[(i, i)]);
        let mut dv = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let gap = lambdas[j] - lambdas[i];
                if i == j || gap.abs() <= self.tol_degenerate {
                    continue;
                }
                let coef = self.alpha * lambdas[i] * lambdas[j] / gap * gram[(i, j)];
                let mut col = dv.column_mut(i);
                col.axpy(coef, &vectors.column(j), 1.0);
            }
        }
        (dl, dv)
    }

    /// Eigendecomposition of `C0`, rotated inside each degenerate eigenspace
    /// so that `<A v_i, A v_j>_Γ = 0` holds there.
    pub fn initial_state(&self, c0: &DMatrix<f64>) -> Result<EigenState> {
        let n = self.b.nrows();
        check_square("C0", c0, n)?;
        let (lambdas, mut v) = sym_eigen_desc(c0);
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && (lambdas[start] - lambdas[end]).abs() <= self.tol_degenerate {
                end += 1;
            }
            if end - start > 1 {
                let block = v.columns(start, end - start).into_owned();
                let (_, rot) = sym_eigen_desc(&(block.transpose() * &self.b * &block));
                v.columns_mut(start, end - start).copy_from(&(block * rot));
            }
            start = end;
        }
        crate::linalg::fix_column_signs(&mut v);
        Ok(EigenState { lambdas, vectors: v, t: 0.0 })
    }

    /// `max |lambda_i^2 <A v_i, A v_j>_Γ|` over degenerate pairs `i != j`.
    pub fn constraint_residual(&self, state: &EigenState) -> f64 {
        let gram = state.vectors.transpose() * &self.b * &state.vectors;
        let n = state.dim();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                if i != j && (state.lambdas[i] - state.lambdas[j]).abs() <= self.tol_degenerate {
                    worst = worst.max((state.lambdas[i].powi(2) * gram[(i, j)]).abs());
                }
            }
        }
        worst
    }
}

/// DAE right-hand side for `y = A u + noise` with weight `Γ`.
pub fn dae_rhs(
    state: &EigenState,
    prob: &InverseProblem,
    alpha: f64,
    tol_degenerate: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_alpha(alpha)?;
    check_square("eigenvectors", &state.vectors, prob.n())?;
    let sys = DaeSystem { b: prob.precision_gram(), alpha, tol_degenerate };
    Ok(sys.rhs(&state.lambdas, &state.vectors))
}

/// Modified Gram-Schmidt on the columns, in place.
pub fn modified_gram_schmidt(v: &mut DMatrix<f64>) {
    let n = v.ncols();
    for i in 0..n {
        for j in 0..i {
            let (done, mut rest) = v.columns_range_pair_mut(j, i);
            let proj = done.column(0).dot(&rest.column(0));
            rest.column_mut(0).axpy(-proj, &done.column(0), 1.0);
        }
        let nrm = v.column(i).norm();
        if nrm > 0.0 {
            v.column_mut(i).unscale_mut(nrm);
        }
    }
}

fn pack(lambdas: &DVector<f64>, vectors: &DMatrix<f64>) -> DVector<f64> {
    let n = lambdas.len();
    let mut x = DVector::zeros(n + n * n);
    x.rows_mut(0, n).copy_from(lambdas);
    x.rows_mut(n, n * n).copy_from_slice(vectors.as_slice());
    x
}

fn unpack(x: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    (x.rows(0, n).into_owned(), DMatrix::from_column_slice(n, n, x.rows(n, n * n).as_slice()))
}

/// RK4 on the DAE, recording a state at every grid time. Between grid
/// points steps are uniform with size at most `dt`; the eigenvectors are
/// re-orthonormalized after every step.
///
/// Trajectories keep their identity through the integration; recorded states
/// are sorted. A pair whose order flips, or whose gap drops below the
/// degeneracy threshold, is logged as a crossing and integration continues.
pub fn integrate_dae_on_grid(cfg: &FlowConfig, times: &[f64], dt: f64) -> Result<DaeTrajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(EkiError::InvalidArgument(format!("step size must be positive, got {dt}")));
    }
    for w in times.windows(2) {
        if w[1] < w[0] {
            return Err(EkiError::InvalidArgument("output times must be non-decreasing".into()));
        }
    }
    if let Some(&t) = times.first() {
        check_time(t)?;
    }
    let sys = DaeSystem::new(cfg);
    let n = cfg.dim();
    let init = sys.initial_state(&cfg.c0)?;
    let f = |_t: f64, x: &DVector<f64>| {
        let (l, v) = unpack(x, n);
        let (dl, dv) = sys.rhs(&l, &v);
        pack(&dl, &dv)
    };

    let mut lambdas = init.lambdas.clone();
    let mut vectors = init.vectors.clone();
    let mut t = 0.0;
    let mut states = Vec::with_capacity(times.len());
    let mut crossings = Vec::new();
    for &target in times {
        let steps = step_count(t, target, dt);
        let h = if steps > 0 { (target - t) / steps as f64 } else { 0.0 };
        for k in 0..steps {
            let now = t + k as f64 * h;
            let next = rk4_step(&f, now, &pack(&lambdas, &vectors), h);
            let (new_l, mut new_v) = unpack(&next, n);
            modified_gram_schmidt(&mut new_v);
            record_crossings(&lambdas, &new_l, sys.tol_degenerate, now + h, &mut crossings);
            lambdas = new_l;
            vectors = new_v;
        }
        t = target;
        states.push(EigenState::sorted(&lambdas, &vectors, t));
    }
    Ok(DaeTrajectory { states, crossings })
}

/// Uniform recording every `dt` on `[0, t_end]`, including `t = 0`.
pub fn integrate_dae(cfg: &FlowConfig, t_end: f64, dt: f64) -> Result<DaeTrajectory> {
    check_time(t_end)?;
    if dt.is_nan() || dt <= 0.0 {
        return Err(EkiError::InvalidArgument(format!("step size must be positive, got {dt}")));
    }
    let steps = step_count(0.0, t_end, dt);
    let h = if steps > 0 { t_end / steps as f64 } else { 0.0 };
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    integrate_dae_on_grid(cfg, &times, dt)
}

fn record_crossings(old: &DVector<f64>, new: &DVector<f64>, tol: f64, t: f64, out: &mut Vec<CrossingEvent>) {
    let n = old.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let before = old[i] - old[j];
            let after = new[i] - new[j];
            let flipped = before.signum() != after.signum() && before != 0.0 && after != 0.0;
            let merged = before.abs() > tol && after.abs() <= tol;
            if flipped || merged {
                out.push(CrossingEvent { t, pair: (i, j), gap: after });
            }
        }
    }
}

/// Eigenvalue bounds at time `t` from the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenvalueBounds {
    /// `lambda_i(0) / (alpha ||Γ^{-1/2} A||^2 t lambda_i(0) + 1)`.
    pub lower: DVector<f64>,
    /// `lambda_1(0) / (alpha ||A v_1(0)||_Γ^2 t lambda_1(0) + 1)`.
    pub lambda1_lower: f64,
    /// `lambda_n(0) / (alpha ||A v_n(0)||_Γ^2 t lambda_n(0) + 1)`.
    pub lambda_n_upper: f64,
}

impl EigenvalueBounds {
    /// Whether sorted eigenvalues `lambdas` satisfy all three families up to `tol`
    /// relative to `lambda_1`.
    pub fn holds(&self, lambdas: &DVector<f64>, tol: f64) -> bool {
        let n = lambdas.len();
        let slack = tol * lambdas[0].abs().max(1e-300);
        (0..n).all(|i| lambdas[i] >= self.lower[i] - slack)
            && lambdas[0] >= self.lambda1_lower - slack
            && lambdas[n - 1] <= self.lambda_n_upper + slack
    }
}

pub fn eigenvalue_bounds(state0: &EigenState, prob: &InverseProblem, alpha: f64, t: f64) -> Result<EigenvalueBounds> {
    check_time(t)?;
    check_alpha(alpha)?;
    check_square("eigenvectors", &state0.vectors, prob.n())?;
    let b = prob.precision_gram();
    let op_norm_sq = sym_eigen_desc(&b).0[0].max(0.0);
    let n = state0.dim();
    let bound = |l0: f64, k: f64| l0 / (alpha * k * t * l0 + 1.0);
    let quad = |i: usize| {
        let v = state0.vectors.column(i);
        (v.transpose() * &b * v)[(0, 0)].max(0.0)
    };
    Ok(EigenvalueBounds {
        lower: state0.lambdas.map(|l| bound(l, op_norm_sq)),
        lambda1_lower: bound(state0.lambdas[0], quad(0)),
        lambda_n_upper: bound(state0.lambdas[n - 1], quad(n - 1)),
    })
}

/// Discrete second differences of a uniformly sampled trajectory are all
/// at least `-1e-8 max |lambda|`. Fewer than three samples pass vacuously.
pub fn convexity_check(lambda1: &[f64]) -> bool {
    let scale = lambda1.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    lambda1.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -1e-8 * scale)
}
