//! Subcommand implementations. Every artifact goes under the configured
//! output directory and embeds the resolved config for provenance; reruns
//! with the same inputs are byte-identical.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use bomi_core::error::{Error, Result};
use bomi_core::fitting::{fit_eta, fit_gamma, FitResult, GammaFitConfig};
use bomi_core::metrics::{
    fme_series, group_and_smooth, reaching_error, right_subspace_angles, MetricSeries,
};
use bomi_core::plot::{line_chart, trajectory_figure, Series, TrajectoryPanel};
use bomi_core::protocol::{export_records, import_records, run_experiment, TrialRecord};
use bomi_core::synergy::{
    build_mapping, build_synergy_basis, mapping_from_seed, MappingMatrix, MappingScheme,
    PostureDataset,
};
use bomi_core::verify::{
    exponential_decay_rate, lyapunov_check_boundary, lyapunov_check_full, lyapunov_check_reduced,
    pe_gramian, realized_delta_q_pe, simulate_boundary_layer, simulate_full_row, simulate_reduced,
    noise_neighborhood_scan, Excitation, RowSystem, ScanConfig, PE_THRESHOLD,
};

use crate::config::RunConfig;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut f = std::fs::File::create(self.path(name))?;
        f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Builds the true mapping from the configured posture source (CSV when
/// given, otherwise the synthetic generator keyed by the master seed).
pub fn mapping_from_config(cfg: &RunConfig) -> Result<MappingMatrix> {
    let syn = &cfg.synergy;
    match &syn.posture_csv {
        Some(path) => {
            let data = PostureDataset::from_csv_path(Path::new(path), syn.posture_rate_hz)?;
            let basis = build_synergy_basis(&data, syn.h)?;
            build_mapping(
                &basis,
                &MappingScheme::FirstRows {
                    n: cfg.experiment.start_pos.len(),
                    scale: syn.map_scale,
                },
            )
        }
        None => mapping_from_seed(
            cfg.seed,
            syn.m,
            syn.h,
            syn.latent_dim,
            syn.n_samples,
            cfg.experiment.start_pos.len(),
            syn.map_scale,
        ),
    }
}

fn session_means(records: &[TrialRecord], series: &MetricSeries, n_sessions: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n_sessions];
    let mut cnt = vec![0usize; n_sessions];
    for (r, &(_, v)) in records.iter().zip(series.values.iter()) {
        acc[r.session_idx] += v;
        cnt[r.session_idx] += 1;
    }
    acc.iter()
        .zip(&cnt)
        .map(|(a, &c)| if c > 0 { a / c as f64 } else { f64::NAN })
        .collect()
}

/// Largest principal angle (radians) between the learned and true map's
/// dominant right subspaces at the end of each session.
fn session_mode_angles(records: &[TrialRecord], mapping: &MappingMatrix) -> Result<Vec<f64>> {
    let n = mapping.n();
    let mut out = Vec::new();
    let mut last_of_session: Vec<&TrialRecord> = Vec::new();
    for r in records {
        match last_of_session.last() {
            Some(prev) if prev.session_idx == r.session_idx => {
                *last_of_session.last_mut().unwrap() = r;
            }
            _ => last_of_session.push(r),
        }
    }
    for r in last_of_session {
        let c_hat = &r.w_hat_final * mapping.basis().phi();
        let angles = right_subspace_angles(&c_hat, mapping.c(), n)?;
        out.push(*angles.last().unwrap());
    }
    Ok(out)
}

fn write_kv_csv(path: &Path, rows: &[(f64, f64)], header: (&str, &str)) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([header.0, header.1])?;
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateSummary<'a> {
    seed: u64,
    config: &'a RunConfig,
    n_trials: usize,
    reached_fraction: f64,
    session_mean_re: Vec<f64>,
    fme_first: f64,
    fme_last: f64,
    session_mode_angles_rad: Vec<f64>,
    timescale_warnings: Vec<String>,
}

pub fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    let exp_cfg = ctx.cfg.experiment_config();
    exp_cfg.validate()?;
    let params = ctx.cfg.model_params();
    params.validate()?;
    let mapping = mapping_from_config(&ctx.cfg)?;

    let records = match run_experiment(&exp_cfg, &mapping, &params) {
        Ok(r) => r,
        Err(Error::ExperimentDiverged { session, trial, source, records }) => {
            // keep what we have, then surface the divergence
            export_records(&records, Some(&exp_cfg), &ctx.path("records_partial.csv"))?;
            return Err(Error::ExperimentDiverged {
                session,
                trial,
                source,
                records: Vec::new(),
            });
        }
        Err(e) => return Err(e),
    };

    export_records(&records, Some(&exp_cfg), &ctx.path("records.csv"))?;

    let re = reaching_error(&records)?;
    re.export_csv(&ctx.path("re.csv"))?;
    let grouped = group_and_smooth(&re, &records, ctx.cfg.fitting.smoothing_window)?;
    grouped.export_csv(&ctx.path("re_grouped.csv"))?;
    let fme = fme_series(&records, mapping.w())?;
    fme.export_csv(&ctx.path("fme.csv"))?;

    let angles = session_mode_angles(&records, &mapping)?;
    let angle_rows: Vec<(f64, f64)> = angles
        .iter()
        .enumerate()
        .map(|(s, &a)| ((s + 1) as f64, a))
        .collect();
    write_kv_csv(&ctx.path("mode_angles.csv"), &angle_rows, ("session", "angle_rad"))?;

    // basis export for provenance
    mapping
        .basis()
        .export_csv(&ctx.path("synergy_basis.csv"), None)?;

    let reached = records.iter().filter(|r| r.reach_time.is_some()).count();
    let summary = SimulateSummary {
        seed: ctx.cfg.seed,
        config: &ctx.cfg,
        n_trials: records.len(),
        reached_fraction: reached as f64 / records.len() as f64,
        session_mean_re: session_means(&records, &re, exp_cfg.n_sessions),
        fme_first: fme.values.first().map(|&(_, v)| v).unwrap_or(f64::NAN),
        fme_last: fme.values.last().map(|&(_, v)| v).unwrap_or(f64::NAN),
        session_mode_angles_rad: angles,
        timescale_warnings: params.timescale_warnings(),
    };
    ctx.write_json("summary.json", &summary)?;
    println!(
        "simulate: {} trials, {} sessions; mean RE session 1 = {:.3}, session {} = {:.3}; FME end = {:.4}",
        records.len(),
        exp_cfg.n_sessions,
        summary.session_mean_re.first().unwrap_or(&f64::NAN),
        exp_cfg.n_sessions,
        summary.session_mean_re.last().unwrap_or(&f64::NAN),
        summary.fme_last
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn cmd_fit(ctx: &Ctx, reference: &Path, gamma_range: Option<(f64, f64)>) -> Result<()> {
    let (records, cfg_echo) = import_records(reference)?;
    if records.is_empty() {
        return Err(Error::EmptyGroup("reference file has no trials".into()));
    }
    // replaying candidates requires the reference protocol (and its seed)
    let exp_cfg = cfg_echo.unwrap_or_else(|| ctx.cfg.experiment_config());
    let mapping = mapping_from_seed(
        exp_cfg.seed,
        ctx.cfg.synergy.m,
        ctx.cfg.synergy.h,
        ctx.cfg.synergy.latent_dim,
        ctx.cfg.synergy.n_samples,
        exp_cfg.n(),
        ctx.cfg.synergy.map_scale,
    )?;

    let re = reaching_error(&records)?;
    let grouped = group_and_smooth(&re, &records, ctx.cfg.fitting.smoothing_window)?;
    let eta = fit_eta(&grouped)?;

    let mut result = FitResult {
        eta_hat: eta.eta_hat,
        alpha_hat: eta.alpha_hat,
        c_hat: eta.c_hat,
        r_squared: eta.r_squared,
        eta_warnings: eta.warnings.clone(),
        gamma_hat: None,
        gamma_objective_curve: Vec::new(),
    };

    if !ctx.cfg.fitting.skip_gamma {
        let range = gamma_range.unwrap_or((ctx.cfg.fitting.gamma_lo, ctx.cfg.fitting.gamma_hi));
        let gcfg = GammaFitConfig {
            range,
            coarse_step: ctx.cfg.fitting.coarse_step,
            fine_step: ctx.cfg.fitting.fine_step,
        };
        let eta_fixed = ctx.cfg.fitting.eta_fixed.unwrap_or(eta.eta_hat);
        let base = ctx.cfg.model_params();
        let gamma = fit_gamma(&records, &exp_cfg, &mapping, &base, eta_fixed, &gcfg)?;
        write_kv_csv(
            &ctx.path("gamma_curve.csv"),
            &gamma.curve,
            ("gamma", "objective"),
        )?;
        result.gamma_hat = Some(gamma.gamma_hat);
        result.gamma_objective_curve = gamma.curve;
    }

    #[derive(Serialize)]
    struct FitArtifact<'a> {
        seed: u64,
        config: &'a RunConfig,
        reference: String,
        gamma_search_range: Option<(f64, f64)>,
        result: &'a FitResult,
    }
    ctx.write_json(
        "fit.json",
        &FitArtifact {
            seed: ctx.cfg.seed,
            config: &ctx.cfg,
            reference: reference.display().to_string(),
            gamma_search_range: if ctx.cfg.fitting.skip_gamma {
                None
            } else {
                Some(gamma_range.unwrap_or((ctx.cfg.fitting.gamma_lo, ctx.cfg.fitting.gamma_hi)))
            },
            result: &result,
        },
    )?;
    println!(
        "fit: eta_hat = {:.5} (R^2 = {:.4}), gamma_hat = {}",
        result.eta_hat,
        result.r_squared,
        result
            .gamma_hat
            .map(|g| format!("{g:.3}"))
            .unwrap_or_else(|| "skipped".into())
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CheckEntry {
    name: String,
    required: bool,
    passed: bool,
    details: serde_json::Value,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    config: &'a RunConfig,
    quick: bool,
    all_required_passed: bool,
    checks: Vec<CheckEntry>,
}

pub fn cmd_verify(ctx: &Ctx, quick: bool) -> Result<bool> {
    let vp = ctx.cfg.verify_params();
    vp.validate()?;
    let vs = &ctx.cfg.verify;
    let mut checks: Vec<CheckEntry> = Vec::new();

    // scale-1 channel: the analysis is scale-free, unit rows keep rates tame
    let probe = mapping_from_seed(
        ctx.cfg.seed,
        ctx.cfg.synergy.m,
        ctx.cfg.synergy.h,
        ctx.cfg.synergy.latent_dim,
        ctx.cfg.synergy.n_samples,
        2,
        1.0,
    )?;
    let row = RowSystem::from_mapping(&probe, 0);

    // -- persistent excitation of the configured noise schedule
    let dt = 1.0 / ctx.cfg.experiment.sim_rate_hz;
    let n_samples = (3.0 * vs.pe_window_s / dt).ceil() as usize;
    let noise = ctx.cfg.noise_schedule();
    let xi = noise.sample_signal(0, n_samples, ctx.cfg.synergy.m, dt);
    let xi_rep = pe_gramian(&xi, dt, vs.pe_window_s, PE_THRESHOLD)?;
    checks.push(CheckEntry {
        name: "pe_noise_schedule".into(),
        required: true,
        passed: xi_rep.pe_satisfied,
        details: serde_json::to_value(&xi_rep)?,
    });

    // -- PE of the realized filtered joint increment
    let model_params = ctx.cfg.model_params();
    let sim_mapping = mapping_from_config(&ctx.cfg)?;
    let dq_rep = realized_delta_q_pe(
        &sim_mapping,
        &model_params,
        (4.0 * vs.pe_window_s).max(8.0),
        vs.pe_window_s,
        PE_THRESHOLD,
        ctx.cfg.seed,
    )?;
    checks.push(CheckEntry {
        name: "pe_realized_delta_q".into(),
        required: true,
        passed: dq_rep.pe_satisfied,
        details: serde_json::to_value(&dq_rep)?,
    });

    // -- reduced system: convergence + Lyapunov bound
    {
        let n_inits = if quick { 10 } else { vs.reduced_inits };
        let m = row.basis.m();
        let mut all_ok = true;
        let mut worst_final: f64 = 0.0;
        let mut worst_violation = f64::NEG_INFINITY;
        let mut alpha1 = 0.0;
        for (u0, e0) in bomi_core::verify::random_reduced_inits(m, n_inits, ctx.cfg.seed ^ 0xd00d)
        {
            let traj = simulate_reduced(&vp, &row.c_row(), &u0, e0, vs.reduced_horizon)?;
            let rep = lyapunov_check_reduced(&traj);
            alpha1 = rep.alpha1;
            worst_final = worst_final.max(traj.final_norm());
            worst_violation = worst_violation.max(rep.max_violation);
            let v_monotone = (1..traj.times.len()).all(|i| traj.v_at(i) <= traj.v_at(i - 1) + 1e-9);
            all_ok &= traj.final_norm() < 1e-4 && rep.passed && v_monotone;
        }
        checks.push(CheckEntry {
            name: "reduced_system_stability".into(),
            required: true,
            passed: all_ok,
            details: serde_json::json!({
                "inits": n_inits,
                "horizon": vs.reduced_horizon,
                "worst_final_norm": worst_final,
                "worst_v_dot_violation": worst_violation,
                "alpha1": alpha1,
            }),
        });
    }

    if !quick {
        // -- boundary layer: exponential decay under PE, stationary without
        let wt0 = DVector::from_vec(vec![0.8, -0.5, 0.3, 0.6]);
        let wt0 = if row.basis.h() == 4 {
            wt0
        } else {
            DVector::from_fn(row.basis.h(), |i, _| 0.5 + 0.1 * i as f64)
        };
        let zeros = DVector::zeros(row.basis.m());
        let traj = simulate_boundary_layer(
            &vp,
            &row.basis,
            &wt0,
            &zeros,
            &zeros,
            &Excitation::MultiSine {
                amplitude: vs.boundary_amplitude_factor * vp.a,
            },
            vs.boundary_horizon,
        )?;
        let norms = traj.w_tilde_norms();
        let (lambda, r2) = exponential_decay_rate(&traj.taus, &norms, 0.1);

        // V_b monotonicity holds for the autonomous layer; check it on an
        // undriven run with a filter mismatch.
        let mut u_frozen = DVector::zeros(row.basis.m());
        u_frozen[0] = 0.9;
        let auto = simulate_boundary_layer(
            &vp,
            &row.basis,
            &wt0,
            &u_frozen,
            &zeros,
            &Excitation::None,
            vs.boundary_horizon.min(40.0),
        )?;
        let lyap = lyapunov_check_boundary(&auto);

        let frozen = simulate_boundary_layer(
            &vp,
            &row.basis,
            &wt0,
            &zeros,
            &zeros,
            &Excitation::None,
            vs.boundary_horizon.min(20.0),
        )?;
        let stationary = frozen.w_tilde.iter().all(|w| w == &wt0);

        checks.push(CheckEntry {
            name: "boundary_layer_stability".into(),
            required: true,
            passed: lambda > 0.0 && r2 > 0.95 && stationary && lyap.passed,
            details: serde_json::json!({
                "decay_rate": lambda,
                "log_fit_r2": r2,
                "stationary_without_excitation": stationary,
                "v_b_max_violation": lyap.max_violation,
            }),
        });

        // -- noise-neighborhood scan
        let scan_cfg = ScanConfig {
            amplitudes: vs.scan_amplitudes.clone(),
            seeds_per_amplitude: vs.scan_seeds,
            horizon: vs.scan_horizon,
            e_bar_init: vp.k_p * 2.5,
        };
        let scan = noise_neighborhood_scan(&vp, &row, &scan_cfg)?;
        let rows: Vec<(f64, f64)> = scan
            .points
            .iter()
            .map(|p| (p.amplitude, p.mean_steady_norm))
            .collect();
        write_kv_csv(&ctx.path("noise_scan.csv"), &rows, ("amplitude", "steady_norm"))?;
        let ratios_ok = scan
            .successive_ratios
            .iter()
            .all(|&r| (1.0..=4.0).contains(&r));
        checks.push(CheckEntry {
            name: "full_system_noise_scaling".into(),
            required: true,
            passed: scan.zero_noise_final_norm < 1e-4 && ratios_ok,
            details: serde_json::to_value(&scan)?,
        });

        // -- eps_w sweep: faster forward learning should not grow the
        // steady state (informational trend check)
        let gammas: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|f| f * vp.gamma).collect();
        let sweep = bomi_core::verify::epsilon_w_sweep(
            &vp,
            &row,
            &gammas,
            vs.scan_amplitudes[0],
            vs.scan_horizon * 0.6,
            3,
        )?;
        write_kv_csv(&ctx.path("eps_w_sweep.csv"), &sweep, ("eps_w", "steady_norm"))?;
        let trend_ok = sweep.first().map(|f| f.1).unwrap_or(0.0) * 1.10
            >= sweep.last().map(|l| l.1).unwrap_or(0.0);
        checks.push(CheckEntry {
            name: "eps_w_sweep_trend".into(),
            required: false,
            passed: trend_ok,
            details: serde_json::json!({ "points": sweep }),
        });

        // -- composite Lyapunov function along a zero-noise full run
        let full = simulate_full_row(
            &vp,
            &row,
            &DVector::zeros(row.basis.h()),
            vp.k_p * 2.5,
            0.0,
            vs.scan_horizon,
            0,
        )?;
        let rep = lyapunov_check_full(&full);
        checks.push(CheckEntry {
            name: "composite_lyapunov_full_deterministic".into(),
            required: false,
            passed: rep.passed,
            details: serde_json::json!({
                "max_violation": rep.max_violation,
                "tolerance": rep.tolerance,
            }),
        });
    }

    // -- timescale ordering of the fitted model parameters (informational)
    let warnings = model_params.timescale_warnings();
    checks.push(CheckEntry {
        name: "timescale_ordering_model_params".into(),
        required: false,
        passed: warnings.is_empty(),
        details: serde_json::json!({ "warnings": warnings }),
    });
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let all_required_passed = checks.iter().filter(|c| c.required).all(|c| c.passed);
    let report = VerifyReport {
        seed: ctx.cfg.seed,
        config: &ctx.cfg,
        quick,
        all_required_passed,
        checks,
    };
    ctx.write_json("verify_report.json", &report)?;
    for c in &report.checks {
        println!(
            "verify: {} [{}] {}",
            c.name,
            if c.required { "required" } else { "info" },
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(all_required_passed)
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

fn read_kv_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::SchemaVersionMismatch(format!(
                "{}: expected 2 columns",
                path.display()
            )));
        }
        let k: f64 = rec[0]
            .parse()
            .map_err(|_| Error::SchemaVersionMismatch("bad numeric key".into()))?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| Error::SchemaVersionMismatch("bad numeric value".into()))?;
        out.push((k, v));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn cmd_plot(ctx: &Ctx, input: Option<&Path>) -> Result<()> {
    let dir = input.unwrap_or(&ctx.out).to_path_buf();
    let mut made = Vec::new();

    // RE: raw + grouped when available
    let mut re_series = Vec::new();
    if dir.join("re.csv").exists() {
        re_series.push(Series {
            label: "RE (raw)".into(),
            points: read_kv_csv(&dir.join("re.csv"))?,
        });
    }
    if dir.join("re_grouped.csv").exists() {
        re_series.push(Series {
            label: "RE (grouped+smoothed)".into(),
            points: read_kv_csv(&dir.join("re_grouped.csv"))?,
        });
    }
    if dir.join("re.csv").exists() || dir.join("re_grouped.csv").exists() {
        let svg = line_chart("Reaching error over trials", "trial index k", "RE (screen units)", &re_series);
        write_text(&ctx.path("fig_re.svg"), &svg)?;
        made.push("fig_re.svg");
    }

    if dir.join("fme.csv").exists() {
        let svg = line_chart(
            "Forward model error over trials",
            "trial index k",
            "FME",
            &[Series {
                label: "FME".into(),
                points: read_kv_csv(&dir.join("fme.csv"))?,
            }],
        );
        write_text(&ctx.path("fig_fme.svg"), &svg)?;
        made.push("fig_fme.svg");
    }

    if dir.join("mode_angles.csv").exists() {
        let svg = line_chart(
            "Right-subspace angle between learned and true mapping",
            "session",
            "largest principal angle (rad)",
            &[Series {
                label: "angle".into(),
                points: read_kv_csv(&dir.join("mode_angles.csv"))?,
            }],
        );
        write_text(&ctx.path("fig_modes.svg"), &svg)?;
        made.push("fig_modes.svg");
    }

    if dir.join("gamma_curve.csv").exists() {
        let svg = line_chart(
            "Gamma grid-search objective",
            "gamma",
            "joint-trajectory mismatch",
            &[Series {
                label: "objective".into(),
                points: read_kv_csv(&dir.join("gamma_curve.csv"))?,
            }],
        );
        write_text(&ctx.path("fig_gamma.svg"), &svg)?;
        made.push("fig_gamma.svg");
    }

    if dir.join("records.csv").exists() {
        let (records, cfg_echo) = import_records(&dir.join("records.csv"))?;
        if !records.is_empty() {
            let n_sessions = records.iter().map(|r| r.session_idx).max().unwrap() + 1;
            // up to four panels, spread across sessions
            let selected: Vec<usize> = if n_sessions <= 4 {
                (0..n_sessions).collect()
            } else {
                vec![0, n_sessions / 3, 2 * n_sessions / 3, n_sessions - 1]
            };
            let targets: Vec<(f64, f64)> = cfg_echo
                .map(|c| c.targets.iter().map(|t| (t[0], t[1])).collect())
                .unwrap_or_default();
            let panels: Vec<TrajectoryPanel> = selected
                .iter()
                .map(|&s| TrajectoryPanel {
                    label: format!("session {}", s + 1),
                    paths: records
                        .iter()
                        .filter(|r| r.session_idx == s)
                        .map(|r| {
                            r.cursor_traj
                                .iter()
                                .map(|x| (x[0], x[1]))
                                .collect::<Vec<_>>()
                        })
                        .collect(),
                    targets: targets.clone(),
                })
                .collect();
            let svg = trajectory_figure("Cursor trajectories", &panels);
            write_text(&ctx.path("fig_trajectories.svg"), &svg)?;
            made.push("fig_trajectories.svg");
        }
    }

    if made.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no plottable CSV artifacts found in {}",
            dir.display()
        )));
    }
    println!("plot: wrote {}", made.join(", "));
    Ok(())
}
