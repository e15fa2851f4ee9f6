//! TOML run configuration: a flat, documented schema merged with CLI
//! overrides (flags win). Every artifact embeds the resolved config for
//! provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use bomi_core::dynamics::{
    default_session_amplitudes, ModelParams, NoiseSchedule, DEFAULT_FILTER_A,
    DEFAULT_SESSION_DECAY, DEFAULT_S1,
};
use bomi_core::protocol::{default_kp_schedule, ExperimentConfig, DEFAULT_TARGETS};
use bomi_core::synergy::DEFAULT_MAP_SCALE;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all internal streams derive from it.
    pub seed: u64,
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub synergy: SynergySection,
    pub fitting: FittingSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            experiment: ExperimentSection::default(),
            model: ModelSection::default(),
            noise: NoiseSection::default(),
            synergy: SynergySection::default(),
            fitting: FittingSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub sessions: usize,
    pub trials_per_session: usize,
    pub targets: Vec<Vec<f64>>,
    pub stop_radius: f64,
    pub trial_timeout_s: f64,
    pub sim_rate_hz: f64,
    pub record_rate_hz: f64,
    /// Explicit per-session gains; empty means kp1 * kp_decay^(s-1).
    pub kp_schedule: Vec<f64>,
    pub kp1: f64,
    pub kp_decay: f64,
    pub start_pos: Vec<f64>,
    pub w_hat_init_std: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            sessions: 8,
            trials_per_session: 60,
            targets: DEFAULT_TARGETS.iter().map(|t| t.to_vec()).collect(),
            stop_radius: 0.15,
            trial_timeout_s: 2.0,
            sim_rate_hz: 100.0,
            record_rate_hz: 50.0,
            kp_schedule: Vec::new(),
            kp1: 5e-3,
            kp_decay: 0.8,
            start_pos: vec![2.5, 2.5],
            w_hat_init_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    pub filter_a: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            gamma: 0.262,
            eta: 0.04522,
            mu: 0.3,
            filter_a: DEFAULT_FILTER_A,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Explicit per-session amplitudes; empty means s1 * session_decay^(s-1).
    pub s_session: Vec<f64>,
    pub s1: f64,
    pub session_decay: f64,
    pub floor: f64,
    pub decay_rate: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            s_session: Vec::new(),
            s1: DEFAULT_S1,
            session_decay: DEFAULT_SESSION_DECAY,
            floor: 0.01,
            decay_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynergySection {
    pub m: usize,
    pub h: usize,
    pub latent_dim: usize,
    pub n_samples: usize,
    pub map_scale: f64,
    /// Optional CSV of posture samples; when set it replaces the synthetic
    /// generator.
    pub posture_csv: Option<String>,
    pub posture_rate_hz: f64,
}

impl Default for SynergySection {
    fn default() -> Self {
        SynergySection {
            m: 19,
            h: 4,
            latent_dim: 4,
            n_samples: 2000,
            map_scale: DEFAULT_MAP_SCALE,
            posture_csv: None,
            posture_rate_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FittingSection {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub coarse_step: f64,
    pub fine_step: f64,
    pub smoothing_window: usize,
    /// Skip the grid search (η fit only).
    pub skip_gamma: bool,
    /// η used by the γ search; None means the fitted η̂.
    pub eta_fixed: Option<f64>,
}

impl Default for FittingSection {
    fn default() -> Self {
        FittingSection {
            gamma_lo: 0.0,
            gamma_hi: 10.0,
            coarse_step: 0.1,
            fine_step: 0.002,
            smoothing_window: 10,
            skip_gamma: false,
            eta_fixed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Desk-scale parameters for the stability checks (must satisfy the
    /// timescale ordering).
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    pub k_p: f64,
    pub a: f64,
    pub reduced_inits: usize,
    pub reduced_horizon: f64,
    pub boundary_horizon: f64,
    pub boundary_amplitude_factor: f64,
    pub scan_amplitudes: Vec<f64>,
    pub scan_seeds: usize,
    pub scan_horizon: f64,
    pub pe_window_s: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            gamma: 2.0,
            eta: 0.2,
            mu: 0.3,
            k_p: 0.02,
            a: 10.0,
            reduced_inits: 50,
            reduced_horizon: 60.0,
            boundary_horizon: 80.0,
            boundary_amplitude_factor: 1.0,
            scan_amplitudes: vec![0.1, 0.2, 0.4],
            scan_seeds: 10,
            scan_horizon: 500.0,
            pe_window_s: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("invalid config: {e}"))
            }
        }
    }

    /// Resolved noise schedule (explicit list wins over the generator).
    pub fn noise_schedule(&self) -> NoiseSchedule {
        let s_session = if self.noise.s_session.is_empty() {
            default_session_amplitudes(
                self.experiment.sessions.max(1),
                self.noise.s1,
                self.noise.session_decay,
            )
        } else {
            self.noise.s_session.clone()
        };
        NoiseSchedule {
            s_session,
            decay_rate: self.noise.decay_rate,
            floor: self.noise.floor,
            seed: self.seed,
        }
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            gamma: self.model.gamma,
            eta: self.model.eta,
            mu: self.model.mu,
            k_p: self.kp_schedule()[0],
            a: self.model.filter_a,
            noise: self.noise_schedule(),
        }
    }

    pub fn kp_schedule(&self) -> Vec<f64> {
        if self.experiment.kp_schedule.is_empty() {
            if (self.experiment.kp1 - 5e-3).abs() < 1e-15
                && (self.experiment.kp_decay - 0.8).abs() < 1e-15
            {
                default_kp_schedule(self.experiment.sessions.max(1))
            } else {
                (0..self.experiment.sessions.max(1))
                    .map(|s| self.experiment.kp1 * self.experiment.kp_decay.powi(s as i32))
                    .collect()
            }
        } else {
            self.experiment.kp_schedule.clone()
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            n_sessions: self.experiment.sessions,
            trials_per_session: self.experiment.trials_per_session,
            targets: self.experiment.targets.clone(),
            stop_radius: self.experiment.stop_radius,
            trial_timeout: self.experiment.trial_timeout_s,
            sim_rate: self.experiment.sim_rate_hz,
            record_rate: self.experiment.record_rate_hz,
            k_p_schedule: self.kp_schedule(),
            start_pos: self.experiment.start_pos.clone(),
            w_hat_init_std: self.experiment.w_hat_init_std,
            seed: self.seed,
        }
    }

    pub fn verify_params(&self) -> ModelParams {
        ModelParams {
            gamma: self.verify.gamma,
            eta: self.verify.eta,
            mu: self.verify.mu,
            k_p: self.verify.k_p,
            a: self.verify.a,
            noise: self.noise_schedule(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_rejected() {
        let res: Result<RunConfig, _> = toml::from_str("definitely_not_a_key = 1");
        assert!(res.is_err());
    }

    #[test]
    fn kp_schedule_generated() {
        let cfg = RunConfig::default();
        let kp = cfg.kp_schedule();
        assert_eq!(kp.len(), 8);
        assert!((kp[0] - 5e-3).abs() < 1e-15);
        assert!(kp.windows(2).all(|w| w[1] < w[0]));
    }
}
