//! Experiment orchestration: sessions, trials, targets, the
//! end-of-movement rule, and record IO.
//!
//! A run is `n_sessions` sessions of `trials_per_session` reaches. Each
//! trial presents a target drawn uniformly from the configured set, never
//! repeating the immediately preceding one, and ends when the cursor
//! enters the stop radius or the timeout elapses, whichever is earlier.
//! The learner state (`What`, joint angles) carries across trials; the
//! cursor resets to the start position at each session start.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step, LearnerState, ModelParams, StepInputs};
use crate::error::{Error, Result};
use crate::synergy::MappingMatrix;

/// The four screen targets used throughout (screen units).
pub const DEFAULT_TARGETS: [[f64; 2]; 4] =
    [[0.5, 4.5], [2.5, 0.5], [2.5, 2.5], [4.5, 4.5]];

/// `k_P(s) = 5e-3 * 0.8^(s-1)`: order 1e-3, decreasing over sessions.
pub fn default_kp_schedule(n_sessions: usize) -> Vec<f64> {
    (0..n_sessions).map(|s| 5e-3 * 0.8f64.powi(s as i32)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub n_sessions: usize,
    pub trials_per_session: usize,
    /// Target points, each of screen dimension n.
    pub targets: Vec<Vec<f64>>,
    /// End-of-movement radius (screen units).
    pub stop_radius: f64,
    /// End-of-movement timeout (seconds).
    pub trial_timeout: f64,
    /// Simulation rate (Hz).
    pub sim_rate: f64,
    /// Recording rate (Hz); must divide the simulation rate.
    pub record_rate: f64,
    /// Per-session proportional gains; must cover n_sessions.
    pub k_p_schedule: Vec<f64>,
    /// Cursor position at each session start.
    pub start_pos: Vec<f64>,
    /// Std of the optional random initial What (0 = start from zeros).
    pub w_hat_init_std: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_sessions: 8,
            trials_per_session: 60,
            targets: DEFAULT_TARGETS.iter().map(|t| t.to_vec()).collect(),
            stop_radius: 0.15,
            trial_timeout: 2.0,
            sim_rate: 100.0,
            record_rate: 50.0,
            k_p_schedule: default_kp_schedule(8),
            start_pos: vec![2.5, 2.5],
            w_hat_init_std: 0.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn n(&self) -> usize {
        self.start_pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 || self.trials_per_session == 0 {
            return Err(Error::InvalidConfig("need at least one session and trial".into()));
        }
        if !self.stop_radius.is_finite() || self.stop_radius <= 0.0 {
            return Err(Error::InvalidConfig("stop radius must be positive".into()));
        }
        if !self.trial_timeout.is_finite() || self.trial_timeout <= 0.0 {
            return Err(Error::InvalidConfig("trial timeout must be positive".into()));
        }
        if self.sim_rate <= 0.0 || self.record_rate <= 0.0 {
            return Err(Error::InvalidConfig("rates must be positive".into()));
        }
        let ratio = self.sim_rate / self.record_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "record rate {} must divide sim rate {}",
                self.record_rate, self.sim_rate
            )));
        }
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidConfig("start position is empty".into()));
        }
        let mut distinct: Vec<&Vec<f64>> = Vec::new();
        for t in &self.targets {
            if t.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "target {t:?} has dimension {} != {}",
                    t.len(),
                    n
                )));
            }
            if !distinct.contains(&t) {
                distinct.push(t);
            }
        }
        if distinct.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 distinct targets".into(),
            ));
        }
        if self.k_p_schedule.len() < self.n_sessions {
            return Err(Error::InvalidConfig(format!(
                "k_P schedule covers {} sessions, need {}",
                self.k_p_schedule.len(),
                self.n_sessions
            )));
        }
        if self.k_p_schedule.iter().any(|&k| !k.is_finite() || k <= 0.0) {
            return Err(Error::InvalidConfig("k_P schedule must be positive".into()));
        }
        for w in self.k_p_schedule.windows(2) {
            if w[1] > w[0] + 1e-15 {
                return Err(Error::InvalidConfig(
                    "k_P schedule must be non-increasing".into(),
                ));
            }
        }
        if !self.w_hat_init_std.is_finite() || self.w_hat_init_std < 0.0 {
            return Err(Error::InvalidConfig("w_hat_init_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn decimation(&self) -> usize {
        (self.sim_rate / self.record_rate).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sim_rate
    }

    pub fn max_steps_per_trial(&self) -> usize {
        (self.trial_timeout * self.sim_rate).round() as usize
    }

    pub fn target_vec(&self, idx: usize) -> DVector<f64> {
        DVector::from_vec(self.targets[idx].clone())
    }
}

/// Per-trial time series and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub session_idx: usize,
    pub trial_idx: usize,
    pub start_pos: DVector<f64>,
    pub target: DVector<f64>,
    /// Seconds from trial start, on the simulation grid.
    pub times: Vec<f64>,
    pub cursor_traj: Vec<DVector<f64>>,
    pub joint_traj: Vec<DVector<f64>>,
    pub w_hat_final: DMatrix<f64>,
    /// None marks a timeout.
    pub reach_time: Option<f64>,
    pub final_error: f64,
}

/// Simulation dependencies shared by all trials of a run.
pub struct SimDeps<'a> {
    pub mapping: &'a MappingMatrix,
    pub params: &'a ModelParams,
}

/// Runs one reach. Resets u and the filters (χ to its equilibrium x/a so
/// δx = C δq holds exactly from the first step), steps the dynamics until
/// the stop rule fires, and records at the configured rate plus the final
/// step. `session_sample` is the within-session sample counter driving the
/// noise schedule; it advances by one per simulation step.
#[allow(clippy::too_many_arguments)]
pub fn run_trial<R: Rng>(
    state: &mut LearnerState,
    target: &DVector<f64>,
    cfg: &ExperimentConfig,
    deps: &SimDeps,
    session_idx: usize,
    trial_idx: usize,
    session_sample: &mut usize,
    rng: &mut R,
) -> Result<TrialRecord> {
    let dt = cfg.dt();
    let decim = cfg.decimation();
    let max_steps = cfg.max_steps_per_trial();

    state.u.fill(0.0);
    state.delta_q.fill(0.0);
    state.chi = &state.x / deps.params.a;

    let start_pos = state.x.clone();
    let mut times = vec![0.0];
    let mut cursor_traj = vec![state.x.clone()];
    let mut joint_traj = vec![state.q.clone()];

    let mut reach_time = None;
    if (&state.x - target).norm() <= cfg.stop_radius {
        reach_time = Some(0.0);
    } else {
        let inputs = StepInputs::new(deps.mapping, deps.params, target);
        for k in 1..=max_steps {
            let noise_std = deps
                .params
                .noise
                .variance(session_idx, *session_sample)
                .sqrt();
            let t = k as f64 * dt;
            match step(state, &inputs, noise_std, dt, t, rng) {
                Ok(()) => {}
                Err(e) => {
                    *session_sample += 1;
                    return Err(e);
                }
            }
            *session_sample += 1;

            let reached = (&state.x - target).norm() <= cfg.stop_radius;
            if k % decim == 0 || reached || k == max_steps {
                times.push(t);
                cursor_traj.push(state.x.clone());
                joint_traj.push(state.q.clone());
            }
            if reached {
                reach_time = Some(t);
                break;
            }
        }
    }

    let final_error = (cursor_traj.last().unwrap() - target).norm();
    Ok(TrialRecord {
        session_idx,
        trial_idx,
        start_pos,
        target: target.clone(),
        times,
        cursor_traj,
        joint_traj,
        w_hat_final: state.w_hat.clone(),
        reach_time,
        final_error,
    })
}

/// Runs the whole experiment. Target draws and exploration noise use
/// separate streams derived from `cfg.seed`, so the target sequence is
/// identical across model variants run at the same seed. On divergence the
/// completed trials are retained inside the error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mapping: &MappingMatrix,
    base_params: &ModelParams,
) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    base_params.validate()?;
    let n = cfg.n();
    let m = mapping.m();
    let h = mapping.basis().h();
    if mapping.n() != n {
        return Err(Error::DimensionMismatch {
            context: "mapping rows vs screen dimension",
            expected: n,
            actual: mapping.n(),
        });
    }

    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5_5a5a_1234_5678);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0f0f_f0f0_8765_4321);

    let mut state = LearnerState::zeros(n, m, h);
    if cfg.w_hat_init_std > 0.0 {
        use rand_distr::{Distribution, StandardNormal};
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151_1515_aaaa_bbbb);
        let normal = StandardNormal;
        state.w_hat = DMatrix::from_fn(n, h, |_, _| {
            let z: f64 = normal.sample(&mut init_rng);
            cfg.w_hat_init_std * z
        });
    }

    let mut records = Vec::with_capacity(cfg.n_sessions * cfg.trials_per_session);
    let mut prev_target: Option<usize> = None;

    for s in 0..cfg.n_sessions {
        state.x = DVector::from_vec(cfg.start_pos.clone());
        let mut session_sample = 0usize;
        let params = ModelParams {
            k_p: cfg.k_p_schedule[s],
            ..base_params.clone()
        };
        let deps = SimDeps { mapping, params: &params };

        for tr in 0..cfg.trials_per_session {
            let idx = draw_target(&cfg.targets, prev_target, &mut target_rng);
            let target = cfg.target_vec(idx);
            match run_trial(
                &mut state,
                &target,
                cfg,
                &deps,
                s,
                tr,
                &mut session_sample,
                &mut noise_rng,
            ) {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    return Err(Error::ExperimentDiverged {
                        session: s,
                        trial: tr,
                        source: Box::new(e),
                        records,
                    })
                }
            }
            prev_target = Some(idx);
        }
    }
    Ok(records)
}

fn draw_target<R: Rng>(targets: &[Vec<f64>], prev: Option<usize>, rng: &mut R) -> usize {
    let choices: Vec<usize> = (0..targets.len())
        .filter(|&i| match prev {
            Some(p) => targets[i] != targets[p],
            None => true,
        })
        .collect();
    choices[rng.random_range(0..choices.len())]
}

// ---------------------------------------------------------------------------
// Record IO: CSV body + JSON sidecar, lossless at record resolution.
// ---------------------------------------------------------------------------

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrialMeta {
    session: usize,
    trial: usize,
    start_pos: Vec<f64>,
    target: Vec<f64>,
    reach_time: Option<f64>,
    final_error: f64,
    /// Row-major n×h estimate at trial end.
    w_hat: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RecordsSidecar {
    schema_version: u32,
    n: usize,
    m: usize,
    h: usize,
    seed: Option<u64>,
    config: Option<ExperimentConfig>,
    trials: Vec<TrialMeta>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes records as CSV (`session,trial,t,x1..xn,q1..qm`) plus a JSON
/// sidecar `<path>.meta.json` carrying the config echo, seed, schema
/// version, and per-trial What snapshots. Numeric text round-trips
/// bit-exactly (shortest representation).
pub fn export_records(
    records: &[TrialRecord],
    config: Option<&ExperimentConfig>,
    path: &Path,
) -> Result<()> {
    let (n, m, h) = match records.first() {
        Some(r) => (r.target.len(), r.joint_traj[0].len(), r.w_hat_final.ncols()),
        None => (0, 0, 0),
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["session".to_string(), "trial".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("q{i}")));
    w.write_record(&header)?;
    for r in records {
        for (i, t) in r.times.iter().enumerate() {
            let mut row = vec![
                r.session_idx.to_string(),
                r.trial_idx.to_string(),
                t.to_string(),
            ];
            row.extend(r.cursor_traj[i].iter().map(|v| v.to_string()));
            row.extend(r.joint_traj[i].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let sidecar = RecordsSidecar {
        schema_version: RECORD_SCHEMA_VERSION,
        n,
        m,
        h,
        seed: config.map(|c| c.seed),
        config: config.cloned(),
        trials: records
            .iter()
            .map(|r| TrialMeta {
                session: r.session_idx,
                trial: r.trial_idx,
                start_pos: r.start_pos.iter().copied().collect(),
                target: r.target.iter().copied().collect(),
                reach_time: r.reach_time,
                final_error: r.final_error,
                w_hat: (0..r.w_hat_final.nrows())
                    .map(|i| r.w_hat_final.row(i).iter().copied().collect())
                    .collect(),
            })
            .collect(),
    };
    let mut f = std::fs::File::create(meta_path(path))?;
    f.write_all(serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads records written by [`export_records`]. Returns the records and
/// the config echo when present.
pub fn import_records(path: &Path) -> Result<(Vec<TrialRecord>, Option<ExperimentConfig>)> {
    let sidecar: RecordsSidecar = {
        let text = std::fs::read_to_string(meta_path(path))?;
        serde_json::from_str(&text)?
    };
    if sidecar.schema_version != RECORD_SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch(format!(
            "sidecar schema {} (supported: {})",
            sidecar.schema_version, RECORD_SCHEMA_VERSION
        )));
    }
    let n = sidecar.n;
    let m = sidecar.m;
    let expected_cols = 3 + n + m;

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    // rows grouped by consecutive (session, trial)
    type Row = (f64, Vec<f64>, Vec<f64>);
    let mut rows_by_trial: Vec<((usize, usize), Vec<Row>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != expected_cols {
            return Err(Error::SchemaVersionMismatch(format!(
                "record row has {} columns, expected {}",
                rec.len(),
                expected_cols
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::SchemaVersionMismatch(format!("bad float {s:?}: {e}")))
        };
        let session: usize = rec[0]
            .parse()
            .map_err(|_| Error::SchemaVersionMismatch("bad session index".into()))?;
        let trial: usize = rec[1]
            .parse()
            .map_err(|_| Error::SchemaVersionMismatch("bad trial index".into()))?;
        let t = parse(&rec[2])?;
        let x: Vec<f64> = (0..n).map(|i| parse(&rec[3 + i])).collect::<Result<_>>()?;
        let q: Vec<f64> = (0..m).map(|i| parse(&rec[3 + n + i])).collect::<Result<_>>()?;
        match rows_by_trial.last_mut() {
            Some((key, rows)) if *key == (session, trial) => rows.push((t, x, q)),
            _ => rows_by_trial.push(((session, trial), vec![(t, x, q)])),
        }
    }

    if rows_by_trial.len() != sidecar.trials.len() {
        return Err(Error::SchemaVersionMismatch(format!(
            "CSV has {} trials, sidecar has {}",
            rows_by_trial.len(),
            sidecar.trials.len()
        )));
    }

    let mut records = Vec::with_capacity(sidecar.trials.len());
    for (((session, trial), rows), meta) in rows_by_trial.into_iter().zip(sidecar.trials) {
        if session != meta.session || trial != meta.trial {
            return Err(Error::SchemaVersionMismatch(format!(
                "trial ordering mismatch at session {session}, trial {trial}"
            )));
        }
        let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let cursor_traj: Vec<DVector<f64>> =
            rows.iter().map(|r| DVector::from_vec(r.1.clone())).collect();
        let joint_traj: Vec<DVector<f64>> =
            rows.iter().map(|r| DVector::from_vec(r.2.clone())).collect();
        let h = sidecar.h;
        let w_hat_final = DMatrix::from_fn(meta.w_hat.len(), h, |r, c| meta.w_hat[r][c]);
        records.push(TrialRecord {
            session_idx: session,
            trial_idx: trial,
            start_pos: DVector::from_vec(meta.start_pos),
            target: DVector::from_vec(meta.target),
            times,
            cursor_traj,
            joint_traj,
            w_hat_final,
            reach_time: meta.reach_time,
            final_error: meta.final_error,
        });
    }
    Ok((records, sidecar.config))
}
