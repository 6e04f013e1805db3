//! The registered experiments. Each one writes its tables into the output
//! directory and fills a [`Summary`] with checks and raw scalars.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{flatten, matrix_headers, to_vec, vector_headers, Summary, Table};
use super::HarnessError;
use crate::bayes::{exact_posterior, posterior_gap, GaussianMeasure};
use crate::covariance::{
    alpha_averaged, apply_operator_a, asymptotic_profile, covariance_at, covariance_limit, self_similar_evolution,
    FlowConfig,
};
use crate::diagnostics::{
    canonical_reference, compute_spreads, fwd_spread_bound, monotonicity_report, spreads_from_moments,
    LyapunovFunction, SpreadRecord, MONOTONE_TOL,
};
use crate::ensemble::{
    average_moments, discrete_step, empirical_moments, init_from_prior, init_moment_matched, run_deterministic,
    run_stochastic, run_stochastic_replicates, split_seed, variational_equivalence_check, Ensemble, EnsembleTrajectory,
    SigmaMode, SimConfig,
};
use crate::linalg::{rel_frobenius, sym_eigen_desc};
use crate::mean::{asymptotic_limit, map_estimator, mean_at, minimal_norm_solution, rate_certificates};
use crate::presets::Setup;
use crate::spectral::{convexity_check, eigenvalue_bounds, integrate_dae_on_grid, DaeSystem};

type Outcome = Result<(), HarnessError>;

/// Context shared by all experiments.
pub(crate) struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub setup: &'a Setup,
    pub dir: &'a Path,
    pub summary: &'a mut Summary,
}

impl Run<'_> {
    fn write(&mut self, name: &str, table: &Table) -> Outcome {
        table.write(&self.dir.join(name))?;
        self.summary.files.push(name.to_string());
        Ok(())
    }

    fn flow(&self, alpha: f64) -> Result<FlowConfig, HarnessError> {
        Ok(FlowConfig::new(alpha, self.setup.c0.clone(), self.setup.m0.clone(), &self.setup.prob)?)
    }

    fn n(&self) -> usize {
        self.setup.m0.len()
    }
}

pub(crate) fn dispatch(run: &mut Run<'_>) -> Outcome {
    match run.cfg.experiment {
        ExperimentKind::FigCovariances => fig_covariances(run),
        ExperimentKind::AsymptoticProfile => asymptotic_profile_experiment(run),
        ExperimentKind::Nonmonotonicity => nonmonotonicity(run),
        ExperimentKind::Rates => rates(run),
        ExperimentKind::DaeSpectrum => dae_spectrum(run),
        ExperimentKind::Subspace => subspace(run),
        ExperimentKind::DiscreteVsContinuous => discrete_vs_continuous(run),
    }
}

/// Roughly a hundred records per run.
fn stride_for(dt: f64, t_end: f64) -> usize {
    ((t_end / dt).ceil() as usize / 100).max(1)
}

fn moments_headers(n: usize) -> Vec<String> {
    let mut h = vector_headers("m", n);
    h.extend(matrix_headers("C", n, n));
    h
}

fn moments_row(m: &DVector<f64>, c: &DMatrix<f64>) -> Vec<f64> {
    let mut row = to_vec(m);
    row.extend(flatten(c));
    row
}

fn ensembles_table(runs: &[(&str, &EnsembleTrajectory)], n: usize) -> Table {
    let mut h = vec!["t".to_string(), "run".to_string(), "j".to_string()];
    h.extend(vector_headers("u", n));
    let mut table = Table::new(h);
    for (r, (_, traj)) in runs.iter().enumerate() {
        for (t, u) in traj.times.iter().zip(&traj.states) {
            for (j, col) in u.column_iter().enumerate() {
                let mut row = vec![*t, r as f64, j as f64];
                row.extend(col.iter());
                table.push(row);
            }
        }
    }
    table
}

fn spreads_headers() -> Vec<String> {
    ["t", "V_e", "V_r", "fV_e", "fV_r", "mean_residual_norm"].iter().map(|s| s.to_string()).collect()
}

fn spreads_row(r: &SpreadRecord) -> Vec<f64> {
    vec![r.t, r.v_e, r.v_r, r.fv_e, r.fv_r, r.mean_residual_norm]
}

/// Deterministic moment-matched particle run checked against the `alpha = 2`
/// closed form, with spread identities and the spread decay bound at every
/// record. Writes `ensembles.csv` and `spreads_file`.
fn particle_run(run: &mut Run<'_>, spreads_file: &str) -> Result<(Ensemble, EnsembleTrajectory), HarnessError> {
    let sim = &run.cfg.sim;
    let prob = &run.setup.prob;
    let j = sim.ensemble_size;
    let ens0 = if j > run.n() {
        init_moment_matched(&run.setup.m0, &run.setup.c0, j, run.cfg.seed)?
    } else {
        init_from_prior(&run.setup.m0, &run.setup.c0, j, run.cfg.seed)?
    };
    let det = SimConfig::deterministic(sim.dt, sim.t_end).with_stride(stride_for(sim.dt, sim.t_end));
    let traj = run_deterministic(&ens0, prob, &det)?;

    // The ensemble moments follow the alpha = 2 flow from the empirical moments.
    let (m_hat, c_hat) = empirical_moments(&ens0);
    let flow2 = FlowConfig::new(2.0, c_hat, m_hat.clone(), prob)?;
    let u_ref = canonical_reference(&flow2, prob, &ens0)?;
    let projected = prob.projected_data()?;
    let fv_e0 = compute_spreads(&ens0.particles, prob, &u_ref)?.fv_e;

    let mut table = Table::new(spreads_headers().into_iter().chain(["fV_e_bound".to_string()]).collect());
    let (mut worst_identity, mut worst_bound, mut worst_moment) = (0.0_f64, f64::NEG_INFINITY, 0.0_f64);
    for (t, u) in traj.times.iter().zip(&traj.states) {
        let rec = compute_spreads(u, prob, &u_ref)?.at(*t);
        let m = u.column_mean();
        let gap = &prob.a * &m - &projected;
        let id_v = rec.v_r - rec.v_e - 0.5 * (&m - &u_ref).norm_squared();
        let id_f = rec.fv_r - rec.fv_e - 0.5 * prob.obs_norm_sq(&gap);
        worst_identity = worst_identity.max(id_v.abs().max(id_f.abs()) / (1.0 + rec.v_r.max(rec.fv_r)));
        let bound = fwd_spread_bound(fv_e0, j, *t);
        worst_bound = worst_bound.max(rec.fv_e - bound);
        let exact = mean_at(&flow2, prob, &m_hat, *t)?;
        worst_moment = worst_moment.max((&m - &exact).norm() / (1.0 + exact.norm()));
        let mut row = spreads_row(&rec);
        row.push(bound);
        table.push(row);
    }
    run.write(spreads_file, &table)?;
    run.write("ensembles.csv", &ensembles_table(&[("deterministic", &traj)], run.n()))?;

    let s = &mut *run.summary;
    s.scalar("particle_spread_identity_max_residual", worst_identity);
    s.scalar("particle_spread_bound_max_excess", worst_bound);
    s.scalar("particle_mean_rel_err_vs_closed_form", worst_moment);
    s.check("spread_identities", worst_identity <= 1e-10);
    s.check("spread_decay_bound", worst_bound <= 1e-10 * (1.0 + fv_e0));
    s.check("particle_mean_matches_closed_form", worst_moment <= 1e-6);
    Ok((ens0, traj))
}

fn fig_covariances(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let alpha = run.cfg.flow.alpha;
    let flow = run.flow(alpha)?;
    let mf = run.flow(1.0)?;
    let n = run.n();
    let prior = GaussianMeasure::new(run.setup.m0.clone(), run.setup.c0.clone())?;
    let post = exact_posterior(&prior, prob)?;

    let mut h = vec!["t".to_string()];
    h.extend(moments_headers(n));
    h.extend(vector_headers("mf_m", n));
    h.extend(matrix_headers("mf_C", n, n));
    let mut table = Table::new(h);
    for t in run.cfg.grid.linear() {
        let mut row = vec![t];
        row.extend(moments_row(&mean_at(&flow, prob, &flow.m0, t)?, &covariance_at(&flow, t)?));
        row.extend(moments_row(&mean_at(&mf, prob, &mf.m0, t)?, &covariance_at(&mf, t)?));
        table.push(row);
    }
    run.write("trajectory.csv", &table)?;

    let (gm, gc) = posterior_gap(&mf, prob, 1.0)?;
    let post_norm = post.cov.norm();
    // The covariance alone matches the posterior at t = 1/alpha (time
    // rescaling), so the miss is measured on the pair of moments.
    let mean_norm = post.mean.norm().max(f64::MIN_POSITIVE);
    let (mut min_cov, mut min_cov_t) = (f64::INFINITY, 0.0);
    let (mut min_joint, mut min_joint_t) = (f64::INFINITY, 0.0);
    for k in 0..=10_000 {
        let t = k as f64 * 1e-3;
        let gc = (covariance_at(&flow, t)? - &post.cov).norm() / post_norm;
        let gm = (mean_at(&flow, prob, &flow.m0, t)? - &post.mean).norm() / mean_norm;
        if gc < min_cov {
            (min_cov, min_cov_t) = (gc, t);
        }
        if gc.max(gm) < min_joint {
            (min_joint, min_joint_t) = (gc.max(gm), t);
        }
    }
    let (gm_a, gc_a) = posterior_gap(&flow, prob, 1.0)?;
    {
        let s = &mut *run.summary;
        s.vector("posterior_mean", post.mean.as_slice());
        s.vector("posterior_cov", &flatten(&post.cov));
        s.scalar("alpha", alpha);
        s.scalar("mean_field_mean_gap_t1", gm);
        s.scalar("mean_field_cov_gap_t1", gc);
        s.scalar("flow_mean_gap_t1", gm_a);
        s.scalar("flow_cov_gap_t1", gc_a);
        s.scalar("flow_min_rel_cov_gap_0_10", min_cov);
        s.scalar("flow_min_rel_cov_gap_time", min_cov_t);
        s.scalar("flow_min_rel_joint_gap_0_10", min_joint);
        s.scalar("flow_min_rel_joint_gap_time", min_joint_t);
        s.check("mean_field_recovers_posterior", gm <= 1e-9 && gc <= 1e-9);
        if alpha != 1.0 {
            s.check("flow_misses_posterior", min_joint > 1e-3);
        }
    }

    particle_run(run, "spreads.csv")?;

    // Replicate-averaged stochastic moments against the averaged-alpha flow.
    let sim = &run.cfg.sim;
    let j = sim.ensemble_size;
    if j > n {
        let sto = SimConfig::stochastic(sim.dt, sim.t_end).with_stride(stride_for(sim.dt, sim.t_end));
        let runs = run_stochastic_replicates(
            &run.setup.m0,
            &run.setup.c0,
            j,
            prob,
            &sto,
            split_seed(run.cfg.seed, 1),
            sim.replicates,
        )?;
        let avg = average_moments(&runs);
        let averaged_flow = run.flow(alpha_averaged(j))?;
        let mut h = vec!["t".to_string()];
        h.extend(moments_headers(n));
        let mut table = Table::new(h);
        for (t, m, c) in &avg {
            let mut row = vec![*t];
            row.extend(moments_row(m, c));
            table.push(row);
        }
        run.write("stochastic.csv", &table)?;
        let (t_last, m_last, c_last) = avg.last().expect("at least the initial record");
        let c_ref = covariance_at(&averaged_flow, *t_last)?;
        let s = &mut *run.summary;
        s.scalar("stochastic_replicates", sim.replicates as f64);
        s.scalar("stochastic_cov_rel_err_vs_averaged_flow", rel_frobenius(c_last, &c_ref));
        s.scalar(
            "stochastic_mean_err_vs_averaged_flow",
            (m_last - mean_at(&averaged_flow, prob, &run.setup.m0, *t_last)?).norm(),
        );
        s.scalar("stochastic_cov_rel_gap_to_posterior", rel_frobenius(c_last, &post.cov));
    }
    Ok(())
}

fn asymptotic_profile_experiment(run: &mut Run<'_>) -> Outcome {
    let alpha = run.cfg.flow.alpha;
    let flow = run.flow(alpha)?;
    let n = run.n();
    let c_inf = covariance_limit(&flow);
    let c_hat = asymptotic_profile(&flow);
    let op = flow.operator();
    let b = flow.b().clone();
    let hat_norm = c_hat.norm();

    let t_big = 1e6;
    let scaled = (covariance_at(&flow, t_big)? - &c_inf) * t_big;
    let profile_err = if hat_norm > 0.0 { (&scaled - &c_hat).norm() / hat_norm } else { scaled.norm() };
    let fixed_point = (apply_operator_a(&op, &c_hat)? - &c_hat).norm();
    let annihilated = (&b * &c_inf).norm() / (1.0 + b.norm() * flow.c0.norm());

    // Self-similar solution against the resolvent formula started at the profile.
    let lambda = 1.0 / alpha;
    let mut h = vec!["t".to_string()];
    h.extend(matrix_headers("C", n, n));
    h.extend(matrix_headers("scaled", n, n));
    h.extend(matrix_headers("self_similar", n, n));
    let mut table = Table::new(h);
    let mut worst_ss = 0.0_f64;
    for t in run.cfg.grid.linear() {
        let c = covariance_at(&flow, t)?;
        let ss = self_similar_evolution(&op, &c_hat, lambda, t)?;
        let k = DMatrix::identity(n, n) + &b * &c_hat * (alpha * t);
        let direct =
            k.transpose().lu().solve(&c_hat).ok_or(crate::EkiError::Singular("E + alpha t B C_hat"))?.transpose();
        worst_ss = worst_ss.max((&ss - &direct).norm() / (1.0 + hat_norm));
        let mut row = vec![t];
        row.extend(flatten(&c));
        row.extend(flatten(&((&c - &c_inf) * t)));
        row.extend(flatten(&ss));
        table.push(row);
    }
    run.write("trajectory.csv", &table)?;

    let s = &mut *run.summary;
    s.scalar("alpha", alpha);
    s.vector("C_inf", &flatten(&c_inf));
    s.vector("C_hat", &flatten(&c_hat));
    s.scalar("profile_rel_err_t1e6", profile_err);
    s.scalar("profile_fixed_point_residual", fixed_point);
    s.scalar("limit_range_residual", annihilated);
    s.scalar("self_similar_max_err", worst_ss);
    s.scalar("rank_k", flow.spec.rank_k as f64);
    s.check("profile_limit", profile_err <= 1e-4);
    s.check("profile_fixed_point", fixed_point <= 1e-8 * hat_norm.max(1.0));
    s.check("limit_annihilated_by_forward_map", annihilated <= 1e-10);
    s.check("self_similar_evolution", worst_ss <= 1e-10);
    Ok(())
}

fn nonmonotonicity(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let alpha = run.cfg.flow.alpha;
    let flow = run.flow(alpha)?;
    let n = run.n();
    let projected = prob.projected_data()?;
    let u_ref = minimal_norm_solution(&flow.c0, &flow.m0, &prob.a, &prob.gamma, &projected)?;
    let lyap = LyapunovFunction::new(&flow.spec, prob)?;

    let mut records = Vec::new();
    let mut h = vec!["t".to_string()];
    h.extend(moments_headers(n));
    h.push("mean_norm".into());
    h.push("lyapunov".into());
    let mut traj = Table::new(h);
    let mut norm_increases = false;
    let mut prev_norm = f64::INFINITY;
    for t in run.cfg.grid.linear() {
        let m = mean_at(&flow, prob, &flow.m0, t)?;
        let c = covariance_at(&flow, t)?;
        let l = lyap.value(&m);
        records.push(spreads_from_moments(&m, &c, prob, &u_ref)?.at(t).with_lyapunov(l));
        norm_increases |= m.norm() > prev_norm + MONOTONE_TOL;
        prev_norm = m.norm();
        let mut row = vec![t];
        row.extend(moments_row(&m, &c));
        row.push(m.norm());
        row.push(l);
        traj.push(row);
    }
    run.write("trajectory.csv", &traj)?;
    let mut spreads = Table::new(spreads_headers().into_iter().chain(["lyapunov".to_string()]).collect());
    for r in &records {
        let mut row = spreads_row(r);
        row.push(r.lyapunov.unwrap_or(f64::NAN));
        spreads.push(row);
    }
    run.write("spreads.csv", &spreads)?;

    let report = monotonicity_report(&records)?;
    {
        let s = &mut *run.summary;
        s.scalar("alpha", alpha);
        s.vector("u_ref", u_ref.as_slice());
        for (name, key) in [
            ("mean_residual_norm", "mean_residual"),
            ("lyapunov", "lyapunov"),
            ("V_e", "v_e"),
            ("V_r", "v_r"),
            ("fV_e", "fv_e"),
            ("fV_r", "fv_r"),
        ] {
            let entry = report.get(name).expect("report covers every quantity");
            s.flag(&format!("{key}_monotone"), entry.monotone);
            s.scalar(&format!("{key}_max_increase"), entry.max_increase);
            if let Some((t0, t1)) = entry.first_violation {
                s.vector(&format!("{key}_first_increase_interval"), &[t0, t1]);
            }
        }
        s.flag("mean_norm_increases", norm_increases);
        let mono = |q: &str| report.is_monotone(q).unwrap_or(false);
        s.check("lyapunov_non_increasing", mono("lyapunov"));
        s.check("ensemble_spreads_monotone", mono("V_e") && mono("fV_e") && mono("fV_r"));
        s.check("mean_residual_not_monotone", !mono("mean_residual_norm") && !mono("V_r"));
    }

    particle_run(run, "particle_spreads.csv")?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn rates(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let times = run.cfg.grid.logarithmic();
    let mut h = vec!["t".to_string()];
    let alphas = [1.0, 2.0];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for alpha in alphas {
        let tag = format!("alpha{alpha}");
        h.extend([format!("err_{tag}"), format!("bound_{tag}"), format!("obs_err_{tag}"), format!("obs_bound_{tag}")]);
        let flow = run.flow(alpha)?;
        let limit = asymptotic_limit(&flow, prob, &flow.m0)?.x_infinity;
        let (mut err, mut bound, mut obs, mut obs_bound) = (vec![], vec![], vec![], vec![]);
        let mut certified = true;
        for &t in &times {
            let x = mean_at(&flow, prob, &flow.m0, t)?;
            let rb = rate_certificates(&flow, prob, &flow.m0, t)?;
            let e = (&x - &limit).norm();
            let o = prob.obs_norm_sq(&(&prob.a * &x - &prob.y)).sqrt();
            certified &= e <= rb.param * (1.0 + 1e-9) + 1e-14 && o <= rb.obs * (1.0 + 1e-9) + 1e-14;
            err.push(e);
            bound.push(rb.param);
            obs.push(o);
            obs_bound.push(rb.obs);
        }
        let positive = err.iter().all(|&e| e > 0.0);
        let slope = if positive { loglog_slope(&times, &err) } else { f64::NAN };
        let s = &mut *run.summary;
        s.scalar(&format!("slope_{tag}"), slope);
        s.scalar(&format!("expected_slope_{tag}"), -1.0 / alpha);
        s.check(&format!("slope_{tag}"), (slope + 1.0 / alpha).abs() <= 0.05);
        s.check(&format!("certificates_{tag}"), certified);
        cols.extend([err, bound, obs, obs_bound]);
    }
    let mut table = Table::new(h);
    for (k, t) in times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(cols.iter().map(|c| c[k]));
        table.push(row);
    }
    run.write("rates.csv", &table)
}

fn dae_spectrum(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let alpha = run.cfg.flow.alpha;
    let flow = run.flow(alpha)?;
    let n = run.n();
    let times = run.cfg.grid.linear();
    let traj = integrate_dae_on_grid(&flow, &times, run.cfg.sim.dt)?;
    let system = DaeSystem::new(&flow);
    let state0 = system.initial_state(&flow.c0)?;
    let scale = state0.lambdas[0].max(1.0);

    let mut h = vec!["t".to_string()];
    h.extend(vector_headers("lambda", n));
    h.extend(vector_headers("exact_lambda", n));
    h.extend(matrix_headers("V", n, n));
    let mut table = Table::new(h);
    let (mut worst_eig, mut worst_orth, mut worst_constraint) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut bounds_hold = true;
    for state in &traj.states {
        let exact = sym_eigen_desc(&covariance_at(&flow, state.t)?).0;
        worst_eig = worst_eig.max((&state.lambdas - &exact).amax());
        worst_orth = worst_orth.max(state.orthonormality_error());
        worst_constraint = worst_constraint.max(system.constraint_residual(state));
        let bounds = eigenvalue_bounds(&state0, prob, alpha, state.t)?;
        bounds_hold &= bounds.holds(&state.lambdas, 1e-9) && bounds.holds(&exact, 1e-9);
        let mut row = vec![state.t];
        row.extend(state.lambdas.iter());
        row.extend(exact.iter());
        row.extend(flatten(&state.vectors));
        table.push(row);
    }
    run.write("eigen.csv", &table)?;

    let convex = convexity_check(&traj.lambda1());
    let s = &mut *run.summary;
    s.scalar("alpha", alpha);
    s.scalar("eigenvalue_max_abs_err", worst_eig);
    s.scalar("orthonormality_max_err", worst_orth);
    s.scalar("constraint_max_residual", worst_constraint);
    s.scalar("crossings", traj.crossings.len() as f64);
    s.vector("final_lambdas", traj.final_state().lambdas.as_slice());
    s.check("eigenvalues_match_closed_form", worst_eig <= 1e-5 * scale);
    s.check("eigenvalue_bounds", bounds_hold);
    s.check("lambda1_convex", convex);
    s.check("orthonormal", worst_orth <= 1e-8);
    Ok(())
}

fn subspace(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let sim = &run.cfg.sim;
    let ens0 = init_from_prior(&run.setup.m0, &run.setup.c0, sim.ensemble_size, run.cfg.seed)?;
    let stride = stride_for(sim.dt, sim.t_end);
    let det = run_deterministic(&ens0, prob, &SimConfig::deterministic(sim.dt, sim.t_end).with_stride(stride))?;
    let sto = run_stochastic(
        &ens0,
        prob,
        &SimConfig::stochastic(sim.dt, sim.t_end).with_stride(stride),
        split_seed(run.cfg.seed, 1),
    )?;
    let scale = ens0.particles.column_iter().map(|c| c.norm()).fold(1.0_f64, f64::max);
    let d_det = crate::ensemble::subspace_check(&det);
    let d_sto = crate::ensemble::subspace_check(&sto);
    run.write("ensembles.csv", &ensembles_table(&[("deterministic", &det), ("stochastic", &sto)], run.n()))?;
    let s = &mut *run.summary;
    s.scalar("ensemble_size", sim.ensemble_size as f64);
    s.scalar("deterministic_span_distance", d_det);
    s.scalar("stochastic_span_distance", d_sto);
    s.check("deterministic_in_span", d_det <= 1e-8 * scale);
    s.check("stochastic_in_span", d_sto <= 1e-6 * scale);
    Ok(())
}

fn discrete_vs_continuous(run: &mut Run<'_>) -> Outcome {
    let prob = &run.setup.prob;
    let sim = &run.cfg.sim;
    let n = run.n();
    let ens0 = init_moment_matched(&run.setup.m0, &run.setup.c0, sim.ensemble_size, run.cfg.seed)?;
    let (m0, c0) = empirical_moments(&ens0);
    let flow = FlowConfig::new(2.0, c0.clone(), m0.clone(), prob)?;

    let one = discrete_step(&ens0, prob, 1.0, SigmaMode::Deterministic, 0)?;
    let map = map_estimator(&c0, &m0, &prob.a, &prob.gamma, &prob.y, 1.0)?;
    let map_err = (empirical_moments(&one).0 - &map).norm() / (1.0 + map.norm());

    let tau = sim.dt;
    let steps = (sim.t_end / tau).round() as usize;
    let stride = (steps / 100).max(1);
    let mut h = vec!["t".to_string()];
    h.extend(moments_headers(n));
    h.extend(vector_headers("exact_m", n));
    h.extend(matrix_headers("exact_C", n, n));
    let mut table = Table::new(h);
    let mut cur = ens0.clone();
    let mut push = |k: usize, ens: &Ensemble| -> Result<(DVector<f64>, DVector<f64>), HarnessError> {
        let t = k as f64 * tau;
        let (m, c) = empirical_moments(ens);
        let em = mean_at(&flow, prob, &m0, t)?;
        let mut row = vec![t];
        row.extend(moments_row(&m, &c));
        row.extend(moments_row(&em, &covariance_at(&flow, t)?));
        table.push(row);
        Ok((m, em))
    };
    push(0, &cur)?;
    let mut last = (m0.clone(), m0.clone());
    for k in 1..=steps {
        cur = discrete_step(&cur, prob, tau, SigmaMode::Deterministic, 0)?;
        if k % stride == 0 || k == steps {
            last = push(k, &cur)?;
        }
    }
    run.write("trajectory.csv", &table)?;
    let euler_err = (&last.0 - &last.1).norm();
    let var_one = variational_equivalence_check(&ens0, prob, 1.0)?;
    let var_tau = variational_equivalence_check(&ens0, prob, tau)?;
    let var_scale = 1.0 + ens0.particles.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);

    let s = &mut *run.summary;
    s.scalar("map_rel_err", map_err);
    s.scalar("steps", steps as f64);
    s.scalar("tau", tau);
    s.scalar("euler_mean_err", euler_err);
    s.scalar("variational_residual_tau1", var_one);
    s.scalar("variational_residual_tau", var_tau);
    s.check("one_step_is_map", map_err <= 1e-9);
    s.check("small_steps_follow_flow", euler_err <= 1e-3 * last.1.norm().max(1.0));
    s.check("variational_form", var_one.max(var_tau) <= 1e-8 * var_scale);
    Ok(())
}
