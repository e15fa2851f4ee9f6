//! The continuous-time coupled learning model and its stochastic integrator.
//!
//! State and laws (all in SI-style units, time in seconds):
//!
//! ```text
//! cursor        x' = C u                      q' = u
//! filters       chi' = -a chi + x             dx = -a chi + x
//!               dq'  = -a dq + u
//! forward       What' = gamma * eps * (Phi dq)^T,   eps = dx - What Phi dq
//! inverse       u' = -eta * ((Chat^T Chat + mu I) u - k_P Chat^T e_x) + xi
//! ```
//!
//! with `Chat = What Phi`, reaching error `e_x = x_des - x`, and `xi` a
//! zero-mean white exploration noise whose variance follows a per-session
//! schedule. Integration is Euler-Maruyama at a fixed step; the noise
//! increment per step is `sqrt(dt) * sigma(t) * z` so the injected
//! diffusion is step-size consistent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synergy::{MappingMatrix, SynergyBasis};

/// Exploration-noise variance schedule: per-session amplitudes with a
/// within-session exponential decay onto a positive floor,
/// `variance(session, k) = s_session[session] * (floor + exp(-decay_rate*k))`
/// where `k` is the sample index within the session.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub s_session: Vec<f64>,
    /// Within-session decay, per sample.
    pub decay_rate: f64,
    pub floor: f64,
    pub seed: u64,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.s_session.is_empty() {
            return Err(Error::InvalidConfig("noise schedule has no sessions".into()));
        }
        if self.s_session.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(Error::InvalidConfig(
                "session noise amplitudes must be non-negative".into(),
            ));
        }
        for w in self.s_session.windows(2) {
            if w[1] > w[0] + 1e-15 {
                return Err(Error::InvalidConfig(
                    "session noise amplitudes must be non-increasing".into(),
                ));
            }
        }
        // amplitude 0 (noise off) is allowed for frozen-learner runs;
        // persistent excitation of course requires a positive floor.
        if self.floor < 0.0 || self.decay_rate < 0.0 || !self.floor.is_finite() || !self.decay_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "noise floor and decay rate must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Noise variance at sample index `sample_idx` of session `session`.
    /// Sessions beyond the schedule reuse the last amplitude.
    pub fn variance(&self, session: usize, sample_idx: usize) -> f64 {
        let s = self.s_session[session.min(self.s_session.len() - 1)];
        s * (self.floor + (-self.decay_rate * sample_idx as f64).exp())
    }

    /// Draws the discrete white-noise signal `xi_k = sigma(k)/sqrt(dt) * z_k`
    /// for one session, as fed to the integrator. Used by the persistent
    /// excitation diagnostics; deterministic in `self.seed`.
    pub fn sample_signal(
        &self,
        session: usize,
        n_samples: usize,
        dim: usize,
        dt: f64,
    ) -> Vec<DVector<f64>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = StandardNormal;
        let inv_sqrt_dt = 1.0 / dt.sqrt();
        (0..n_samples)
            .map(|k| {
                let sd = self.variance(session, k).sqrt() * inv_sqrt_dt;
                DVector::from_fn(dim, |_, _| {
                    let z: f64 = normal.sample(&mut rng);
                    sd * z
                })
            })
            .collect()
    }
}

impl Default for NoiseSchedule {
    /// Eight sessions with geometrically decreasing amplitude.
    fn default() -> Self {
        NoiseSchedule {
            s_session: default_session_amplitudes(8, DEFAULT_S1, DEFAULT_SESSION_DECAY),
            decay_rate: 0.1,
            floor: 0.01,
            seed: 0,
        }
    }
}

/// `s1 * decay^(s-1)` for sessions s = 1..n.
pub fn default_session_amplitudes(n_sessions: usize, s1: f64, decay: f64) -> Vec<f64> {
    (0..n_sessions).map(|s| s1 * decay.powi(s as i32)).collect()
}

pub const DEFAULT_S1: f64 = 32.0;
pub const DEFAULT_SESSION_DECAY: f64 = 0.5;

/// Model rates and gains. The expected timescale ordering
/// `k_P << eta << gamma` (and `a` well above `k_P`) is checked by
/// [`ModelParams::timescale_warnings`] but deliberately not enforced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelParams {
    /// Forward learning rate (1/s).
    pub gamma: f64,
    /// Inverse learning rate (1/s).
    pub eta: f64,
    /// Regularizer weight.
    pub mu: f64,
    /// Proportional gain (1/s).
    pub k_p: f64,
    /// Filter constant (1/s).
    pub a: f64,
    pub noise: NoiseSchedule,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        // eta = 0 or gamma = 0 freeze the respective learner, which the
        // protocol uses as a control condition, so only a must be strictly
        // positive.
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("mu", self.mu),
            ("k_p", self.k_p),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !self.a.is_finite() || self.a <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "a must be positive, got {}",
                self.a
            )));
        }
        self.noise.validate()
    }

    /// Human-readable warnings when the singular-perturbation ordering does
    /// not hold. Callers surface these; the simulation still runs.
    pub fn timescale_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.k_p >= self.eta {
            w.push(format!(
                "timescale ordering violated: k_P = {} is not below eta = {}",
                self.k_p, self.eta
            ));
        }
        if self.eta >= self.gamma {
            w.push(format!(
                "timescale ordering violated: eta = {} is not below gamma = {}",
                self.eta, self.gamma
            ));
        }
        if self.a <= 10.0 * self.k_p {
            w.push(format!(
                "filter constant a = {} is not well above k_P = {}",
                self.a, self.k_p
            ));
        }
        w
    }

    /// Singular-perturbation parameters (eps_u, eps_delta, eps_w) =
    /// (k_P/eta, k_P/a, k_P/gamma).
    pub fn epsilons(&self) -> (f64, f64, f64) {
        (self.k_p / self.eta, self.k_p / self.a, self.k_p / self.gamma)
    }
}

impl Default for ModelParams {
    /// The fitted parameter point with this crate's default nuisance
    /// constants (filter pole, noise schedule).
    fn default() -> Self {
        ModelParams {
            gamma: 0.262,
            eta: 0.04522,
            mu: 0.3,
            k_p: 5e-3,
            a: DEFAULT_FILTER_A,
            noise: NoiseSchedule::default(),
        }
    }
}

pub const DEFAULT_FILTER_A: f64 = 1.2;

/// Default magnitude bound past which a state counts as diverged.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

/// Full simulation state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    /// Joint-velocity command (m, rad/s).
    pub u: DVector<f64>,
    /// Joint angles (m, rad).
    pub q: DVector<f64>,
    /// Cursor position (n, screen units).
    pub x: DVector<f64>,
    /// Cursor filter state (n); `dx = -a*chi + x` is derived, not stored.
    pub chi: DVector<f64>,
    /// Filtered joint increment (m).
    pub delta_q: DVector<f64>,
    /// Forward-model estimate (n×h).
    pub w_hat: DMatrix<f64>,
}

impl LearnerState {
    pub fn zeros(n: usize, m: usize, h: usize) -> Self {
        LearnerState {
            u: DVector::zeros(m),
            q: DVector::zeros(m),
            x: DVector::zeros(n),
            chi: DVector::zeros(n),
            delta_q: DVector::zeros(m),
            w_hat: DMatrix::zeros(n, h),
        }
    }

    /// Filtered cursor increment `dx = -a*chi + x`.
    pub fn delta_x(&self, a: f64) -> DVector<f64> {
        &self.x - &self.chi * a
    }

    /// Largest absolute entry across all state blocks, with its name.
    pub fn max_abs(&self) -> (f64, &'static str) {
        let blocks: [(&str, &[f64]); 5] = [
            ("u", self.u.as_slice()),
            ("q", self.q.as_slice()),
            ("x", self.x.as_slice()),
            ("chi", self.chi.as_slice()),
            ("delta_q", self.delta_q.as_slice()),
        ];
        let mut best = (0.0f64, "u");
        for (name, s) in blocks {
            for &v in s {
                let av = v.abs();
                if !av.is_finite() {
                    return (f64::INFINITY, name);
                }
                if av > best.0 {
                    best = (av, name);
                }
            }
        }
        for &v in self.w_hat.iter() {
            let av = v.abs();
            if !av.is_finite() {
                return (f64::INFINITY, "w_hat");
            }
            if av > best.0 {
                best = (av, "w_hat");
            }
        }
        best
    }
}

/// Cursor velocity `C u`.
pub fn cursor_rhs(mapping: &MappingMatrix, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != mapping.m() {
        return Err(Error::DimensionMismatch {
            context: "cursor_rhs input u",
            expected: mapping.m(),
            actual: u.len(),
        });
    }
    Ok(mapping.c() * u)
}

/// Filter derivatives and the derived increment:
/// `chi' = -a chi + x`, `dq' = -a dq + u`, `dx = -a chi + x` (= `chi'`).
pub fn filter_rhs(state: &LearnerState, a: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let chi_dot = &state.x - &state.chi * a;
    let delta_q_dot = &state.u - &state.delta_q * a;
    let delta_x = chi_dot.clone();
    (chi_dot, delta_q_dot, delta_x)
}

/// Forward-learning update `gamma * eps * (Phi dq)^T` with
/// `eps = dx - What Phi dq`; equals `-gamma` times the gradient of
/// `0.5 ||eps||^2` in `What`.
pub fn forward_rhs(
    state: &LearnerState,
    basis: &SynergyBasis,
    gamma: f64,
    a: f64,
) -> Result<DMatrix<f64>> {
    if state.delta_q.len() != basis.m() {
        return Err(Error::DimensionMismatch {
            context: "forward_rhs delta_q",
            expected: basis.m(),
            actual: state.delta_q.len(),
        });
    }
    if state.w_hat.ncols() != basis.h() {
        return Err(Error::DimensionMismatch {
            context: "forward_rhs w_hat columns",
            expected: basis.h(),
            actual: state.w_hat.ncols(),
        });
    }
    let z = basis.phi() * &state.delta_q; // h
    let eps = state.delta_x(a) - &state.w_hat * &z; // n
    Ok(eps * z.transpose() * gamma)
}

/// Inverse-learning drift
/// `-eta * ((Chat^T Chat + mu I) u - k_P Chat^T e_x)` with `Chat = What Phi`;
/// equals `-eta` times the gradient of
/// `0.5 ||Chat u - k_P e_x||^2 + (mu/2)||u||^2`. Noise is added by the
/// integrator, not here.
pub fn inverse_rhs(
    state: &LearnerState,
    basis: &SynergyBasis,
    params: &ModelParams,
    e_x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if e_x.len() != state.w_hat.nrows() {
        return Err(Error::DimensionMismatch {
            context: "inverse_rhs e_x",
            expected: state.w_hat.nrows(),
            actual: e_x.len(),
        });
    }
    if state.u.len() != basis.m() {
        return Err(Error::DimensionMismatch {
            context: "inverse_rhs u",
            expected: basis.m(),
            actual: state.u.len(),
        });
    }
    let c_hat = &state.w_hat * basis.phi(); // n×m
    let cu = &c_hat * &state.u; // n
    let grad = c_hat.transpose() * (cu - e_x * params.k_p) + &state.u * params.mu;
    Ok(grad * (-params.eta))
}

/// The unique zero of the inverse drift for frozen `What` and `e_x`:
/// `u* = k_P (Chat^T Chat + mu I)^{-1} Chat^T e_x`, computed through the
/// n×n system `(Chat Chat^T + mu I) y = e_x`, `u* = k_P Chat^T y`.
pub fn inverse_fixed_point(
    w_hat: &DMatrix<f64>,
    basis: &SynergyBasis,
    mu: f64,
    k_p: f64,
    e_x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let c_hat = w_hat * basis.phi();
    let n = c_hat.nrows();
    let gram = &c_hat * c_hat.transpose() + DMatrix::identity(n, n) * mu;
    let y = gram
        .lu()
        .solve(e_x)
        .ok_or_else(|| Error::DegenerateData("singular inverse-model Gram matrix".into()))?;
    Ok(c_hat.transpose() * y * k_p)
}

/// Known-map feedback law `u_des = k_P C^+ e_x` (minimum-norm joint
/// velocity achieving cursor velocity `k_P e_x`). A comparison oracle,
/// not part of the learning loop.
pub fn feedback_oracle(
    mapping: &MappingMatrix,
    k_p: f64,
    e_x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let c = mapping.c();
    let n = c.nrows();
    let svd = c.clone().svd(true, true);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > (c.nrows().max(c.ncols()) as f64) * f64::EPSILON * svd.singular_values.max())
        .count();
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    let pinv = svd
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::DegenerateData(e.to_string()))?;
    Ok(pinv * e_x * k_p)
}

/// Everything a single Euler-Maruyama step needs besides the state.
pub struct StepInputs<'a> {
    pub mapping: &'a MappingMatrix,
    pub params: &'a ModelParams,
    pub x_des: &'a DVector<f64>,
    pub divergence_bound: f64,
}

impl<'a> StepInputs<'a> {
    pub fn new(mapping: &'a MappingMatrix, params: &'a ModelParams, x_des: &'a DVector<f64>) -> Self {
        StepInputs {
            mapping,
            params,
            x_des,
            divergence_bound: DEFAULT_DIVERGENCE_BOUND,
        }
    }
}

/// Advances the full state one step of size `dt`. All drifts are evaluated
/// at the current state; noise (std `noise_std`, per component) enters only
/// the `u` equation as `sqrt(dt) * noise_std * z`. `t` is used for error
/// reporting only.
pub fn step<R: Rng>(
    state: &mut LearnerState,
    inputs: &StepInputs,
    noise_std: f64,
    dt: f64,
    t: f64,
    rng: &mut R,
) -> Result<()> {
    debug_assert!(dt > 0.0);
    let params = inputs.params;
    let basis = inputs.mapping.basis();

    let e_x = inputs.x_des - &state.x;
    let u_dot = inverse_rhs(state, basis, params, &e_x)?;
    let (chi_dot, delta_q_dot, _) = filter_rhs(state, params.a);
    let w_dot = forward_rhs(state, basis, params.gamma, params.a)?;
    let x_dot = cursor_rhs(inputs.mapping, &state.u)?;

    // q and x integrate the same (current) u so x - x0 = C (q - q0) holds
    // on the discrete grid as well.
    state.q.axpy(dt, &state.u, 1.0);
    state.x.axpy(dt, &x_dot, 1.0);
    state.chi.axpy(dt, &chi_dot, 1.0);
    state.delta_q.axpy(dt, &delta_q_dot, 1.0);
    state.w_hat += w_dot * dt;

    let normal = StandardNormal;
    let sqrt_dt = dt.sqrt();
    for i in 0..state.u.len() {
        let z: f64 = normal.sample(rng);
        state.u[i] += dt * u_dot[i] + sqrt_dt * noise_std * z;
    }

    let (mag, component) = state.max_abs();
    if mag > inputs.divergence_bound {
        return Err(Error::Diverged {
            t,
            component,
            magnitude: mag,
            bound: inputs.divergence_bound,
        });
    }
    Ok(())
}
