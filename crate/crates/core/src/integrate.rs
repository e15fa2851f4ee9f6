//! Fixed-step integrators for the deterministic subsystems.
//!
//! The stochastic full model steps with Euler-Maruyama inside
//! [`crate::dynamics::step`]; the verification runs use classical RK4 here
//! so integrator error stays well below the behavior being checked.

use nalgebra::DVector;

/// One classical 4th-order Runge-Kutta step of `y' = f(t, y)`.
pub fn rk4_step<F>(f: &F, t: f64, y: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)));
    let k3 = f(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)));
    let k4 = f(t + dt, &(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Integrates from `t0` over `n_steps` of size `dt`, sampling every
/// `sample_every` steps (state at step 0 included). Returns (times, states).
pub fn rk4_integrate<F>(
    f: &F,
    t0: f64,
    y0: DVector<f64>,
    dt: f64,
    n_steps: usize,
    sample_every: usize,
) -> (Vec<f64>, Vec<DVector<f64>>)
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    assert!(sample_every >= 1);
    let mut times = Vec::with_capacity(n_steps / sample_every + 2);
    let mut states = Vec::with_capacity(n_steps / sample_every + 2);
    let mut y = y0;
    let mut t = t0;
    times.push(t);
    states.push(y.clone());
    for i in 0..n_steps {
        y = rk4_step(f, t, &y, dt);
        t = t0 + (i as f64 + 1.0) * dt;
        if (i + 1) % sample_every == 0 {
            times.push(t);
            states.push(y.clone());
        }
    }
    if !n_steps.is_multiple_of(sample_every) {
        times.push(t);
        states.push(y);
    }
    (times, states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_exponential_decay_fourth_order() {
        // y' = -y, y(0) = 1: error at t=1 scales like dt^4
        let f = |_t: f64, y: &DVector<f64>| -y.clone();
        let exact = (-1.0f64).exp();
        let mut errs = Vec::new();
        for &n in &[10usize, 20, 40] {
            let dt = 1.0 / n as f64;
            let (_, ys) = rk4_integrate(&f, 0.0, DVector::from_element(1, 1.0), dt, n, n);
            errs.push((ys.last().unwrap()[0] - exact).abs());
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!(r1 > 12.0 && r1 < 20.0, "ratio {r1}");
        assert!(r2 > 12.0 && r2 < 20.0, "ratio {r2}");
    }

    #[test]
    fn sampling_grid() {
        let f = |_t: f64, _y: &DVector<f64>| DVector::from_element(1, 1.0);
        let (ts, ys) = rk4_integrate(&f, 0.0, DVector::zeros(1), 0.1, 10, 2);
        assert_eq!(ts.len(), 6);
        assert!((ts[5] - 1.0).abs() < 1e-12);
        assert!((ys[5][0] - 1.0).abs() < 1e-12);
    }
}
