//! JSON experiment configuration with strict parsing and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{Scheme, SigmaMode, SimConfig};
use crate::error::EkiError;
use crate::linalg::{check_spd, check_symmetric};
use crate::presets::Setup;
use crate::problem::InverseProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FigCovariances,
    AsymptoticProfile,
    Nonmonotonicity,
    Rates,
    DaeSpectrum,
    Subspace,
    DiscreteVsContinuous,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::FigCovariances,
        ExperimentKind::AsymptoticProfile,
        ExperimentKind::Nonmonotonicity,
        ExperimentKind::Rates,
        ExperimentKind::DaeSpectrum,
        ExperimentKind::Subspace,
        ExperimentKind::DiscreteVsContinuous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FigCovariances => "fig-covariances",
            ExperimentKind::AsymptoticProfile => "asymptotic-profile",
            ExperimentKind::Nonmonotonicity => "nonmonotonicity",
            ExperimentKind::Rates => "rates",
            ExperimentKind::DaeSpectrum => "dae-spectrum",
            ExperimentKind::Subspace => "subspace",
            ExperimentKind::DiscreteVsContinuous => "discrete-vs-continuous",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::FigCovariances => {
                "deterministic, stochastic and mean-field moments against the exact posterior"
            }
            ExperimentKind::AsymptoticProfile => "covariance limit, asymptotic profile and self-similar evolution",
            ExperimentKind::Nonmonotonicity => "non-monotone mean and residual spread, monotone Lyapunov function",
            ExperimentKind::Rates => "log-log convergence slopes and rate certificates for alpha in {1, 2}",
            ExperimentKind::DaeSpectrum => "eigenvalue/eigenvector DAE against the closed-form covariance",
            ExperimentKind::Subspace => "particles stay in the affine span of the initial ensemble",
            ExperimentKind::DiscreteVsContinuous => "discrete Kalman iteration against MAP and the continuous flow",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "Gamma")]
    pub gamma: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_truth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    pub m0: Vec<f64>,
    #[serde(rename = "C0")]
    pub c0: Vec<Vec<f64>>,
}

fn default_alpha() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self { alpha: default_alpha() }
    }
}

fn default_sigma_mode() -> SigmaMode {
    SigmaMode::Deterministic
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_end() -> f64 {
    1.0
}
fn default_ensemble_size() -> usize {
    45
}
fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "default_sigma_mode")]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            sigma_mode: default_sigma_mode(),
            dt: default_dt(),
            t_end: default_t_end(),
            scheme: None,
            ensemble_size: default_ensemble_size(),
            replicates: default_replicates(),
        }
    }
}

impl SimSpec {
    /// Scheme defaults to RK4 for deterministic and Euler-Maruyama for
    /// stochastic runs.
    pub fn sim_config(&self, mode: SigmaMode) -> SimConfig {
        let scheme = self.scheme.unwrap_or(match mode {
            SigmaMode::Deterministic => Scheme::Rk4,
            SigmaMode::Stochastic => Scheme::EulerMaruyama,
        });
        SimConfig { sigma_mode: mode, dt: self.dt, t_end: self.t_end, scheme, record_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t_start: f64,
    pub t_end: f64,
    pub num_points: usize,
}

impl GridSpec {
    pub fn linear(&self) -> Vec<f64> {
        let n = self.num_points;
        let h = (self.t_end - self.t_start) / (n - 1) as f64;
        (0..n).map(|k| if k + 1 == n { self.t_end } else { self.t_start + k as f64 * h }).collect()
    }

    /// Log-spaced points between `t_start` and `t_end` (both positive).
    pub fn logarithmic(&self) -> Vec<f64> {
        let n = self.num_points;
        let (a, b) = (self.t_start.ln(), self.t_end.ln());
        (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub grid: GridSpec,
}

/// Configuration error naming the offending key path.
#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }

    fn from_eki(key: &str, err: EkiError) -> Self {
        Self::new(key, err.to_string())
    }
}

fn matrix(key: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(ConfigError::new(key, "matrix must be non-empty"));
    }
    if let Some(k) = rows.iter().position(|row| row.len() != c) {
        return Err(ConfigError::new(
            format!("{key}[{k}]"),
            format!("row has {} entries, expected {c}", rows[k].len()),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ConfigError::new(key, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(key: &str, v: &[f64], len: usize) -> Result<DVector<f64>, ConfigError> {
    if v.len() != len {
        return Err(ConfigError::new(key, format!("expected {len} entries, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ConfigError::new(key, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn spd(key: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>, ConfigError> {
    let m = matrix(key, rows)?;
    if m.shape() != (n, n) {
        return Err(ConfigError::new(key, format!("expected {n}x{n}, found {}x{}", m.nrows(), m.ncols())));
    }
    check_symmetric("matrix", &m).map_err(|e| ConfigError::from_eki(key, e))?;
    check_spd("matrix", &m).map_err(|e| ConfigError::from_eki(key, e))?;
    Ok(m)
}

impl ProblemSpec {
    pub fn to_setup(&self) -> Result<Setup, ConfigError> {
        let a = matrix("problem.A", &self.a)?;
        let (m, n) = a.shape();
        let gamma = spd("problem.Gamma", &self.gamma, m)?;
        let y = vector("problem.y", &self.y, m)?;
        let m0 = vector("problem.m0", &self.m0, n)?;
        let c0 = spd("problem.C0", &self.c0, n)?;
        let mut prob = InverseProblem::new(a, gamma, y).map_err(|e| ConfigError::from_eki("problem", e))?;
        match (&self.u_truth, &self.eps) {
            (Some(u), eps) => {
                let u = vector("problem.u_truth", u, n)?;
                let eps = match eps {
                    Some(e) => vector("problem.eps", e, m)?,
                    None => &prob.y - &prob.a * &u,
                };
                prob.set_truth(u, eps).map_err(|e| ConfigError::from_eki("problem.eps", e))?;
            }
            (None, Some(_)) => return Err(ConfigError::new("problem.eps", "eps requires u_truth")),
            (None, None) => {}
        }
        Ok(Setup { prob, m0, c0 })
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Setup, ConfigError> {
        let setup = self.problem.to_setup()?;
        if !(self.flow.alpha >= 1.0 && self.flow.alpha.is_finite()) {
            return Err(ConfigError::new(
                "flow.alpha",
                format!("alpha must be finite and >= 1, got {}", self.flow.alpha),
            ));
        }
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            return Err(ConfigError::new("sim.dt", "dt must be positive"));
        }
        if !(sim.t_end > 0.0 && sim.t_end.is_finite()) {
            return Err(ConfigError::new("sim.t_end", "t_end must be positive"));
        }
        if sim.ensemble_size < 2 {
            return Err(ConfigError::new("sim.ensemble_size", "at least 2 particles are required"));
        }
        if sim.replicates == 0 {
            return Err(ConfigError::new("sim.replicates", "at least one replicate is required"));
        }
        sim.sim_config(sim.sigma_mode).validate().map_err(|e| ConfigError::from_eki("sim.scheme", e))?;
        let g = &self.grid;
        if g.num_points < 2 {
            return Err(ConfigError::new("grid.num_points", format!("need at least 2 points, got {}", g.num_points)));
        }
        if !(g.t_start >= 0.0 && g.t_start.is_finite()) {
            return Err(ConfigError::new("grid.t_start", "t_start must be finite and non-negative"));
        }
        if !(g.t_end > g.t_start && g.t_end.is_finite()) {
            return Err(ConfigError::new("grid.t_end", "t_end must be finite and exceed t_start"));
        }
        if self.experiment == ExperimentKind::Rates && g.t_start <= 0.0 {
            return Err(ConfigError::new("grid.t_start", "rates use a logarithmic grid and need t_start > 0"));
        }
        Ok(setup)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(self.experiment.name()))
    }
}

/// Parse and validate; unknown keys are rejected.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Canonical JSON text (defaults filled in, fixed key order).
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "experiment": "fig-covariances",
        "problem": {"A": [[4, 0], [0, 1]], "Gamma": [[1, 0], [0, 1]], "y": [0, 0],
                    "m0": [4, 4], "C0": [[2, -1], [-1, 2]]},
        "grid": {"t_start": 0, "t_end": 1, "num_points": 11}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::FigCovariances);
        assert_eq!(cfg.flow.alpha, 2.0);
        assert_eq!(cfg.sim.ensemble_size, 45);
        assert_eq!(cfg.grid.linear().len(), 11);
    }

    #[test]
    fn indefinite_prior_names_key() {
        let text = MINIMAL.replace("[[2, -1], [-1, 2]]", "[[1, 2], [2, 1]]");
        assert_eq!(parse_config_str(&text).unwrap_err().key, "problem.C0");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MINIMAL.replace("\"y\": [0, 0]", "\"y\": [0, 0], \"bogus\": 1");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
        assert!(err.key.starts_with("problem"), "{err}");
    }

    #[test]
    fn short_grid_rejected() {
        let text = MINIMAL.replace("\"num_points\": 11", "\"num_points\": 1");
        assert_eq!(parse_config_str(&text).unwrap_err().key, "grid.num_points");
        let empty = MINIMAL.replace("\"num_points\": 11", "\"num_points\": 0");
        assert!(parse_config_str(&empty).is_err());
    }

    #[test]
    fn round_trip_is_canonical() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let text = serialize_config(&cfg);
        let again = parse_config_str(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, serialize_config(&again));
    }

    #[test]
    fn mismatched_truth_rejected() {
        let text = MINIMAL.replace("\"y\": [0, 0]", "\"y\": [0, 0], \"u_truth\": [1, 1], \"eps\": [0, 0]");
        assert_eq!(parse_config_str(&text).unwrap_err().key, "problem.eps");
    }
}
