//! Classical fixed-step fourth-order Runge-Kutta on flat `f64` state vectors.
//! Used as the independent oracle for the closed forms and as the particle
//! integrator for deterministic ensembles.

use nalgebra::DVector;

/// One RK4 step of size `dt` from `(t, x)`.
pub fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    let k3 = f(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    let k4 = f(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Integrate from `t0` to `t1` with steps no larger than `dt`; the last step
/// is shortened to land on `t1` exactly.
pub fn rk4_integrate<F>(f: F, x0: DVector<f64>, t0: f64, t1: f64, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let steps = step_count(t0, t1, dt);
    let h = (t1 - t0) / steps as f64;
    let mut x = x0;
    for i in 0..steps {
        x = rk4_step(&f, t0 + i as f64 * h, &x, h);
    }
    x
}

/// Number of uniform steps of size at most `dt` covering `[t0, t1]`.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> usize {
    assert!(dt > 0.0, "step size must be positive");
    if t1 <= t0 {
        return 0;
    }
    ((t1 - t0) / dt - 1e-9).ceil().max(1.0) as usize
}
