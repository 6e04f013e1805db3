//! Ensemble and residual spreads, their observation-space versions, the
//! spread decay bound, monotonicity detection and the Lyapunov function of
//! the mean flow.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::FlowConfig;
use crate::ensemble::{empirical_moments, Ensemble};
use crate::error::{check_len, EkiError, Result};
use crate::linalg::{weighted_least_squares, SpectralData};
use crate::mean::minimal_norm_solution;
use crate::problem::InverseProblem;

/// Discrete increases up to this size count as rounding.
pub const MONOTONE_TOL: f64 = 1e-9;

/// Spreads at one time. `fv_r` uses `A r^j = A (u^j - u_ref)`, so the
/// identity `fv_r = fv_e + |A m - y|_Γ^2 / 2` holds when `A u_ref = y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadRecord {
    pub t: f64,
    pub v_e: f64,
    pub v_r: f64,
    pub fv_e: f64,
    pub fv_r: f64,
    pub mean_residual_norm: f64,
    pub lyapunov: Option<f64>,
}

impl SpreadRecord {
    pub fn at(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn with_lyapunov(mut self, value: f64) -> Self {
        self.lyapunov = Some(value);
        self
    }
}

/// `V_e = (1/2J) sum |e^j|^2`, `V_r = (1/2J) sum |u^j - u_ref|^2` and the same
/// sums in the Γ-norm after applying `A`.
pub fn compute_spreads(particles: &DMatrix<f64>, prob: &InverseProblem, u_ref: &DVector<f64>) -> Result<SpreadRecord> {
    check_len("u_ref", u_ref, prob.n())?;
    check_len("particle dimension", &DVector::zeros(particles.nrows()), prob.n())?;
    let j = particles.ncols() as f64;
    let m = particles.column_mean();
    let w = prob.gamma_norm();
    let (mut v_e, mut v_r, mut fv_e, mut fv_r) = (0.0, 0.0, 0.0, 0.0);
    for u in particles.column_iter() {
        let e = u - &m;
        let r = u - u_ref;
        v_e += e.norm_squared();
        v_r += r.norm_squared();
        fv_e += w.norm_sq(&(&prob.a * e));
        fv_r += w.norm_sq(&(&prob.a * r));
    }
    let scale = 1.0 / (2.0 * j);
    Ok(SpreadRecord {
        t: 0.0,
        v_e: v_e * scale,
        v_r: v_r * scale,
        fv_e: fv_e * scale,
        fv_r: fv_r * scale,
        mean_residual_norm: (m - u_ref).norm(),
        lyapunov: None,
    })
}

/// Spreads of an ensemble with moments `(m, C)`, through the decomposition
/// identities: `V_e = tr(C)/2`, `fV_e = tr(B C)/2`.
pub fn spreads_from_moments(
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    prob: &InverseProblem,
    u_ref: &DVector<f64>,
) -> Result<SpreadRecord> {
    check_len("u_ref", u_ref, prob.n())?;
    check_len("mean", m, prob.n())?;
    let b = prob.precision_gram();
    let r = m - u_ref;
    let v_e = 0.5 * c.trace();
    let fv_e = 0.5 * (&b * c).trace();
    Ok(SpreadRecord {
        t: 0.0,
        v_e,
        v_r: v_e + 0.5 * r.norm_squared(),
        fv_e,
        fv_r: fv_e + 0.5 * prob.gamma_norm().norm_sq(&(&prob.a * &r)),
        mean_residual_norm: r.norm(),
        lyapunov: None,
    })
}

/// `m_dagger = argmin { |m - m_hat|_{C0} : A m = Π y }` with `m_hat` the
/// empirical mean of the initial ensemble.
pub fn canonical_reference(cfg: &FlowConfig, prob: &InverseProblem, ens0: &Ensemble) -> Result<DVector<f64>> {
    let (m_hat, _) = empirical_moments(ens0);
    let target = prob.projected_data()?;
    minimal_norm_solution(&cfg.c0, &m_hat, &prob.a, &prob.gamma, &target)
}

/// `1 / ((4/J) t + 1 / fV_e(0))`; zero once the initial spread is zero.
pub fn fwd_spread_bound(fv_e0: f64, ensemble_size: usize, t: f64) -> f64 {
    if fv_e0 <= 0.0 {
        return 0.0;
    }
    1.0 / (4.0 / ensemble_size as f64 * t + 1.0 / fv_e0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityEntry {
    pub quantity: &'static str,
    pub monotone: bool,
    /// Earliest `(t_k, t_{k+1})` with an increase above tolerance.
    pub first_violation: Option<(f64, f64)>,
    pub max_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub entries: Vec<MonotonicityEntry>,
}

impl MonotonicityReport {
    pub fn get(&self, quantity: &str) -> Option<&MonotonicityEntry> {
        self.entries.iter().find(|e| e.quantity == quantity)
    }

    pub fn is_monotone(&self, quantity: &str) -> Option<bool> {
        self.get(quantity).map(|e| e.monotone)
    }
}

fn scan(quantity: &'static str, times: &[f64], values: &[f64]) -> MonotonicityEntry {
    let mut first_violation = None;
    let mut max_increase = f64::NEG_INFINITY;
    for k in 1..values.len() {
        let inc = values[k] - values[k - 1];
        max_increase = max_increase.max(inc);
        if inc > MONOTONE_TOL && first_violation.is_none() {
            first_violation = Some((times[k - 1], times[k]));
        }
    }
    MonotonicityEntry { quantity, monotone: first_violation.is_none(), first_violation, max_increase }
}

/// Flags discrete increases above [`MONOTONE_TOL`] for every spread
/// quantity; `lyapunov` is included when every record carries it.
pub fn monotonicity_report(records: &[SpreadRecord]) -> Result<MonotonicityReport> {
    if records.len() < 2 {
        return Err(EkiError::InvalidArgument("monotonicity needs at least 2 records".into()));
    }
    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let column = |f: fn(&SpreadRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let mut entries = vec![
        scan("V_e", &times, &column(|r| r.v_e)),
        scan("V_r", &times, &column(|r| r.v_r)),
        scan("fV_e", &times, &column(|r| r.fv_e)),
        scan("fV_r", &times, &column(|r| r.fv_r)),
        scan("mean_residual_norm", &times, &column(|r| r.mean_residual_norm)),
    ];
    let lyap: Option<Vec<f64>> = records.iter().map(|r| r.lyapunov).collect();
    if let Some(values) = lyap {
        entries.push(scan("lyapunov", &times, &values));
    }
    Ok(MonotonicityReport { entries })
}

/// `L(m) = |S^{-1}(m - xi)|^2 / 2`.
pub fn lyapunov_value(m: &DVector<f64>, xi: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let s_inv = s.clone().try_inverse().ok_or(EkiError::Singular("S"))?;
    Ok(0.5 * (s_inv * (m - xi)).norm_squared())
}

/// Lyapunov function with `S^{-1}` and a least-squares preimage `xi` cached.
#[derive(Debug, Clone)]
pub struct LyapunovFunction {
    pub s_inv: DMatrix<f64>,
    pub xi: DVector<f64>,
}

impl LyapunovFunction {
    pub fn new(spec: &SpectralData, prob: &InverseProblem) -> Result<Self> {
        let xi = weighted_least_squares(&prob.y, &prob.a, &prob.gamma)?;
        Ok(Self { s_inv: spec.s_inv.clone(), xi })
    }

    pub fn with_preimage(spec: &SpectralData, xi: DVector<f64>) -> Self {
        Self { s_inv: spec.s_inv.clone(), xi }
    }

    pub fn value(&self, m: &DVector<f64>) -> f64 {
        0.5 * (&self.s_inv * (m - &self.xi)).norm_squared()
    }
}
