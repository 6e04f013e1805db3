//! Particle-level EKI: deterministic and stochastic continuous-time
//! ensembles, the discrete Kalman iteration, and the subspace property.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, check_square, EkiError, Result};
use crate::linalg::{check_spd, check_time, column_space_basis, symmetrize, WeightedNorm};
use crate::ode::{rk4_step, step_count};
use crate::problem::InverseProblem;

/// Stream tags keep the draws of different stages of a run independent
/// even when they share a seed.
const STREAM_INIT: u64 = 0;
const STREAM_DIFFUSION: u64 = 1;
const STREAM_DISCRETE: u64 = 2;

/// Generator for particle `j` of stage `tag`.
pub fn particle_rng(seed: u64, tag: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | j as u64);
    rng
}

/// SplitMix64 finalizer; derives independent replicate seeds from one seed.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `n x J`, one particle per column.
    pub particles: DMatrix<f64>,
    pub seed: u64,
    pub stream: u64,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(EkiError::InvalidArgument(format!(
                "ensemble needs at least 2 particles, got {}",
                particles.ncols()
            )));
        }
        Ok(Self { particles, seed: 0, stream: 0 })
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    fn with_particles(&self, particles: DMatrix<f64>) -> Self {
        Self { particles, seed: self.seed, stream: self.stream }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub sigma_mode: SigmaMode,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    /// Keep every `record_stride`-th step (the final step is always kept).
    pub record_stride: usize,
}

impl SimConfig {
    pub fn deterministic(dt: f64, t_end: f64) -> Self {
        Self { sigma_mode: SigmaMode::Deterministic, dt, t_end, scheme: Scheme::Rk4, record_stride: 1 }
    }

    pub fn stochastic(dt: f64, t_end: f64) -> Self {
        Self { sigma_mode: SigmaMode::Stochastic, dt, t_end, scheme: Scheme::EulerMaruyama, record_stride: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EkiError::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        check_time(self.t_end)?;
        if self.record_stride == 0 {
            return Err(EkiError::InvalidArgument("record_stride must be at least 1".into()));
        }
        if self.sigma_mode == SigmaMode::Stochastic && self.scheme != Scheme::EulerMaruyama {
            return Err(EkiError::InvalidArgument("stochastic runs require the euler_maruyama scheme".into()));
        }
        Ok(())
    }
}

/// Recorded ensembles with their times.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
}

impl EnsembleTrajectory {
    pub fn last(&self) -> &DMatrix<f64> {
        self.states.last().expect("trajectory always holds the initial ensemble")
    }

    /// Empirical `(m, C)` at every record.
    pub fn moments(&self) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        self.states.iter().map(moments_of).collect()
    }
}

/// `J` i.i.d. draws from `N(m0, C0)`; particle `j` uses its own stream.
pub fn init_from_prior(m0: &DVector<f64>, c0: &DMatrix<f64>, j: usize, seed: u64) -> Result<Ensemble> {
    let n = m0.len();
    check_square("C0", c0, n)?;
    check_spd("C0", c0)?;
    let chol = Cholesky::new(symmetrize(c0)).ok_or(EkiError::NotPositiveDefinite { what: "C0" })?;
    let l = chol.l();
    let mut particles = DMatrix::zeros(n, j);
    for k in 0..j {
        let mut rng = particle_rng(seed, STREAM_INIT, k);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        particles.set_column(k, &(m0 + &l * z));
    }
    let mut ens = Ensemble::new(particles)?;
    ens.seed = seed;
    ens.stream = STREAM_INIT;
    Ok(ens)
}

/// Prior draws corrected by `u -> m0 + L0 L_hat^{-1} (u - m_hat)` so the
/// empirical moments equal `(m0, C0)` exactly. Needs `J > n`.
pub fn init_moment_matched(m0: &DVector<f64>, c0: &DMatrix<f64>, j: usize, seed: u64) -> Result<Ensemble> {
    let n = m0.len();
    if j <= n {
        return Err(EkiError::InvalidArgument(format!(
            "moment matching needs more particles than dimensions (J = {j}, n = {n})"
        )));
    }
    let mut ens = init_from_prior(m0, c0, j, seed)?;
    let (m_hat, c_hat) = moments_of(&ens.particles);
    let l_hat = Cholesky::new(c_hat).ok_or(EkiError::Singular("empirical covariance of the prior draws"))?.l();
    let l0 = Cholesky::new(symmetrize(c0)).ok_or(EkiError::NotPositiveDefinite { what: "C0" })?.l();
    let centered = DMatrix::from_fn(n, j, |r, c| ens.particles[(r, c)] - m_hat[r]);
    let white =
        l_hat.solve_lower_triangular(&centered).ok_or(EkiError::Singular("empirical covariance of the prior draws"))?;
    let mut particles = l0 * white;
    for mut col in particles.column_iter_mut() {
        col += m0;
    }
    ens.particles = particles;
    Ok(ens)
}

fn moments_of(u: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let j = u.ncols() as f64;
    let m = u.column_mean();
    let mut e = u.clone();
    for mut col in e.column_iter_mut() {
        col -= &m;
    }
    let c = symmetrize(&(&e * e.transpose() / j));
    (m, c)
}

/// `m = (1/J) sum u^j`, `C = (1/J) sum (u^j - m)(u^j - m)^T`.
pub fn empirical_moments(ens: &Ensemble) -> (DVector<f64>, DMatrix<f64>) {
    moments_of(&ens.particles)
}

/// Precomputed operators shared by all particle updates.
struct Drift {
    a: DMatrix<f64>,
    at_gi: DMatrix<f64>,
    y: DVector<f64>,
}

impl Drift {
    fn new(prob: &InverseProblem) -> Self {
        Self { a: prob.a.clone(), at_gi: prob.at_gamma_inv(), y: prob.y.clone() }
    }

    /// `-C A^T Γ^{-1} (A u^j - y)` for every column, with `C` from `u`.
    fn eval(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let (_, c) = moments_of(u);
        let mut r = &self.a * u;
        for mut col in r.column_iter_mut() {
            col -= &self.y;
        }
        -(c * (&self.at_gi * r))
    }
}

fn check_ensemble(ens: &Ensemble, prob: &InverseProblem) -> Result<()> {
    check_len("ensemble dimension", &DVector::zeros(ens.dim()), prob.n())
}

/// RK4 on the coupled `J n` system, the covariance being recomputed from
/// the particles in every stage.
pub fn run_deterministic(ens: &Ensemble, prob: &InverseProblem, sim: &SimConfig) -> Result<EnsembleTrajectory> {
    sim.validate()?;
    check_ensemble(ens, prob)?;
    if sim.sigma_mode != SigmaMode::Deterministic {
        return Err(EkiError::InvalidArgument("run_deterministic needs sigma_mode = deterministic".into()));
    }
    let (n, j) = ens.particles.shape();
    let drift = Drift::new(prob);
    let f = |_t: f64, x: &DVector<f64>| {
        let u = DMatrix::from_column_slice(n, j, x.as_slice());
        DVector::from_column_slice(drift.eval(&u).as_slice())
    };
    let steps = step_count(0.0, sim.t_end, sim.dt);
    let h = if steps > 0 { sim.t_end / steps as f64 } else { 0.0 };
    let mut x = DVector::from_column_slice(ens.particles.as_slice());
    let mut traj = EnsembleTrajectory { times: vec![0.0], states: vec![ens.particles.clone()] };
    for k in 0..steps {
        x = rk4_step(&f, k as f64 * h, &x, h);
        if (k + 1) % sim.record_stride == 0 || k + 1 == steps {
            traj.times.push((k + 1) as f64 * h);
            traj.states.push(DMatrix::from_column_slice(n, j, x.as_slice()));
        }
    }
    Ok(traj)
}

/// Euler-Maruyama for `du^j = -C A^T Γ^{-1}(A u^j - y) dt + C A^T Γ^{-1} noise_factor dW^j`.
/// Particle `j` draws its increments from its own stream of `seed`.
pub fn euler_maruyama(
    ens: &Ensemble,
    prob: &InverseProblem,
    noise_factor: &DMatrix<f64>,
    dt: f64,
    t_end: f64,
    record_stride: usize,
    seed: u64,
) -> Result<EnsembleTrajectory> {
    check_ensemble(ens, prob)?;
    if noise_factor.nrows() != prob.m() {
        return Err(EkiError::DimensionMismatch {
            context: "noise factor",
            expected: format!("{} rows", prob.m()),
            found: format!("{} rows", noise_factor.nrows()),
        });
    }
    let (n, j) = ens.particles.shape();
    let w = noise_factor.ncols();
    let drift = Drift::new(prob);
    let mut rngs: Vec<ChaCha8Rng> = (0..j).map(|k| particle_rng(seed, STREAM_DIFFUSION, k)).collect();
    let steps = step_count(0.0, t_end, dt);
    let h = if steps > 0 { t_end / steps as f64 } else { 0.0 };
    let sqrt_h = h.sqrt();
    let mut u = ens.particles.clone();
    let mut traj = EnsembleTrajectory { times: vec![0.0], states: vec![u.clone()] };
    let mut xi = DMatrix::zeros(w, j);
    for k in 0..steps {
        let (_, c) = moments_of(&u);
        for (col, rng) in rngs.iter_mut().enumerate() {
            for r in 0..w {
                xi[(r, col)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut r = &drift.a * &u;
        for mut col in r.column_iter_mut() {
            col -= &drift.y;
        }
        let gain = &c * &drift.at_gi;
        u -= &gain * r * h;
        u += gain * (noise_factor * &xi) * sqrt_h;
        if (k + 1) % record_stride.max(1) == 0 || k + 1 == steps {
            traj.times.push((k + 1) as f64 * h);
            traj.states.push(u.clone());
        }
    }
    debug_assert_eq!(u.nrows(), n);
    Ok(traj)
}

/// Stochastic EKI with `Σ = Γ`: the Wiener increments are mapped through a
/// Cholesky factor of `Γ`.
pub fn run_stochastic(ens: &Ensemble, prob: &InverseProblem, sim: &SimConfig, seed: u64) -> Result<EnsembleTrajectory> {
    sim.validate()?;
    if sim.sigma_mode != SigmaMode::Stochastic {
        return Err(EkiError::InvalidArgument("run_stochastic needs sigma_mode = stochastic".into()));
    }
    let root = prob.gamma_norm().factor();
    euler_maruyama(ens, prob, &root, sim.dt, sim.t_end, sim.record_stride, seed)
}

/// `R` stochastic replicates from moment-matched initial ensembles, run in
/// parallel. Replicate `r` uses `split_seed(seed, r)` for both stages; the
/// output order is the replicate order regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_stochastic_replicates(
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    j: usize,
    prob: &InverseProblem,
    sim: &SimConfig,
    seed: u64,
    replicates: usize,
) -> Result<Vec<EnsembleTrajectory>> {
    (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let s = split_seed(seed, r);
            let ens = init_moment_matched(m0, c0, j, s)?;
            run_stochastic(&ens, prob, sim, s)
        })
        .collect()
}

/// Replicate average of the empirical moments at every record.
pub fn average_moments(runs: &[EnsembleTrajectory]) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let r = runs.len() as f64;
    (0..first.times.len())
        .map(|k| {
            let (n, _) = first.states[k].shape();
            let mut m = DVector::zeros(n);
            let mut c = DMatrix::zeros(n, n);
            for run in runs {
                let (mk, ck) = moments_of(&run.states[k]);
                m += mk;
                c += ck;
            }
            (first.times[k], m / r, c / r)
        })
        .collect()
}

/// Gain `C A^T (A C A^T + Γ / tau)^{-1}` of the discrete iteration.
fn kalman_gain(c: &DMatrix<f64>, prob: &InverseProblem, tau: f64) -> Result<DMatrix<f64>> {
    let ca = c * prob.a.transpose();
    let s = symmetrize(&(&prob.a * &ca + &prob.gamma / tau));
    let chol = Cholesky::new(s).ok_or(EkiError::Singular("A C A^T + Γ / tau"))?;
    Ok(chol.solve(&ca.transpose()).transpose())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(EkiError::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// One step `u^j <- u^j - C A^T (A C A^T + Γ/tau)^{-1} (A u^j - y~^j)` with
/// `y~^j = y` or `y~^j ~ N(y, Γ/tau)`.
pub fn discrete_step(ens: &Ensemble, prob: &InverseProblem, tau: f64, mode: SigmaMode, seed: u64) -> Result<Ensemble> {
    check_tau(tau)?;
    check_ensemble(ens, prob)?;
    let (_, c) = empirical_moments(ens);
    let gain = kalman_gain(&c, prob, tau)?;
    let m = prob.m();
    let mut targets = DMatrix::from_fn(m, ens.size(), |r, _| prob.y[r]);
    if mode == SigmaMode::Stochastic {
        let root = prob.gamma_norm().factor() / tau.sqrt();
        for k in 0..ens.size() {
            let mut rng = particle_rng(seed, STREAM_DISCRETE, k);
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut col = targets.column_mut(k);
            col += &root * z;
        }
    }
    let resid = &prob.a * &ens.particles - targets;
    Ok(ens.with_particles(&ens.particles - gain * resid))
}

/// `steps` deterministic discrete updates of size `tau`.
pub fn iterate_discrete(ens: &Ensemble, prob: &InverseProblem, tau: f64, steps: usize) -> Result<Ensemble> {
    let mut cur = ens.clone();
    for _ in 0..steps {
        cur = discrete_step(&cur, prob, tau, SigmaMode::Deterministic, 0)?;
    }
    Ok(cur)
}

/// `argmin_u (tau/2)||A u - y||_Γ^2 + (1/2)||u - x||_C^2` over `x + ran(C)`,
/// from the normal equations in an orthonormal basis `Q` of `ran(C)`.
fn variational_update(c: &DMatrix<f64>, prob: &InverseProblem, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let q = column_space_basis(c, 1e-12);
    if q.ncols() == 0 {
        return Ok(x.clone());
    }
    let c_red = WeightedNorm::new(symmetrize(&(q.transpose() * c * &q)))?;
    let aq = &prob.a * &q;
    let w = prob.gamma_norm();
    let lhs = symmetrize(&((aq.transpose() * w.apply_inverse_mat(&aq)) * tau + c_red.inverse()));
    let rhs = -(aq.transpose() * w.apply_inverse(&(&prob.a * x - &prob.y))) * tau;
    let sol = Cholesky::new(lhs).ok_or(EkiError::Singular("variational normal equations"))?.solve(&rhs);
    Ok(x + q * sol)
}

/// `max_j ||argmin - discrete_step||` for the deterministic update.
pub fn variational_equivalence_check(ens: &Ensemble, prob: &InverseProblem, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let stepped = discrete_step(ens, prob, tau, SigmaMode::Deterministic, 0)?;
    let (_, c) = empirical_moments(ens);
    let mut worst = 0.0_f64;
    for k in 0..ens.size() {
        let x = ens.particles.column(k).into_owned();
        let v = variational_update(&c, prob, tau, &x)?;
        worst = worst.max((v - stepped.particles.column(k)).norm());
    }
    Ok(worst)
}

/// Same check applied to the empirical mean.
pub fn variational_equivalence_check_means(ens: &Ensemble, prob: &InverseProblem, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let stepped = discrete_step(ens, prob, tau, SigmaMode::Deterministic, 0)?;
    let (m, c) = empirical_moments(ens);
    let (m_next, _) = empirical_moments(&stepped);
    Ok((variational_update(&c, prob, tau, &m)? - m_next).norm())
}

/// Largest distance from any recorded particle to the affine span of the
/// initial ensemble.
pub fn subspace_check(traj: &EnsembleTrajectory) -> f64 {
    let u0 = &traj.states[0];
    let (m0, _) = moments_of(u0);
    let mut centered = u0.clone();
    for mut col in centered.column_iter_mut() {
        col -= &m0;
    }
    let q = column_space_basis(&centered, 1e-12);
    let mut worst = 0.0_f64;
    for u in &traj.states {
        for col in u.column_iter() {
            let d = col - &m0;
            let off = &d - &q * (q.transpose() * &d);
            worst = worst.max(off.norm());
        }
    }
    worst
}
