//! CLI-level acceptance: byte-identical artifacts on re-runs (criterion 9),
//! exit codes, and the machine-readable error path.

use std::path::Path;
use std::process::Command;

fn bomi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bomi"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// Small-but-fittable protocol: 180 short trials give every (start, end)
/// group enough occurrences for the grouped exponential fit, while the
/// 0.5 s timeout keeps simulation cheap.
fn small_fit_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[experiment]\n\
         sessions = 3\n\
         trials_per_session = 60\n\
         trial_timeout_s = 0.5\n\
         [fitting]\n\
         coarse_step = 0.1\n\
         fine_step = 0.05\n",
    )
    .unwrap();
    path
}

fn assert_identical(a: &Path, b: &Path, names: &[&str]) {
    for name in names {
        let fa = read(&a.join(name));
        let fb = read(&b.join(name));
        assert_eq!(fa, fb, "artifact {name} differs between identical runs");
    }
}

/// Criterion 9: simulate re-run with the same config and seed produces
/// byte-identical CSV/JSON artifacts.
#[test]
fn criterion_9_simulate_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("run1");
    let out2 = tmp.path().join("run2");
    for out in [&out1, &out2] {
        let status = bomi()
            .args(["simulate", "--sessions", "2", "--trials", "8", "--seed", "7"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_identical(
        &out1,
        &out2,
        &[
            "records.csv",
            "records.csv.meta.json",
            "re.csv",
            "re_grouped.csv",
            "fme.csv",
            "mode_angles.csv",
            "synergy_basis.csv",
            "summary.json",
        ],
    );
    println!("ACCEPTANCE 9a PASS: simulate artifacts byte-identical across reruns");
}

/// Criterion 9 for fit and plot: identical reports and figures on re-run.
#[test]
fn criterion_9_fit_and_plot_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_fit_config(tmp.path());
    let sim = tmp.path().join("sim");
    let status = bomi()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "3"])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());

    let fit1 = tmp.path().join("fit1");
    let fit2 = tmp.path().join("fit2");
    for out in [&fit1, &fit2] {
        let status = bomi()
            .arg("fit")
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "3", "--gamma-range", "0", "0.4", "--reference"])
            .arg(sim.join("records.csv"))
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_identical(&fit1, &fit2, &["fit.json", "gamma_curve.csv"]);

    let plot1 = tmp.path().join("plot1");
    let plot2 = tmp.path().join("plot2");
    for out in [&plot1, &plot2] {
        let status = bomi()
            .arg("plot")
            .arg("--input")
            .arg(&sim)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_identical(
        &plot1,
        &plot2,
        &["fig_re.svg", "fig_fme.svg", "fig_modes.svg", "fig_trajectories.svg"],
    );
    println!("ACCEPTANCE 9b PASS: fit and plot artifacts byte-identical across reruns");
}

/// Criterion 9 for verify: identical reports, and --quick exits 0 fast.
#[test]
fn criterion_9_verify_quick_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("v1");
    let out2 = tmp.path().join("v2");
    let start = std::time::Instant::now();
    for out in [&out1, &out2] {
        let status = bomi()
            .args(["verify", "--quick", "--seed", "1"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "verify --quick must pass");
    }
    let per_run = start.elapsed().as_secs_f64() / 2.0;
    assert_identical(&out1, &out2, &["verify_report.json"]);
    assert!(per_run < 10.0, "verify --quick took {per_run:.1} s per run");
    println!("ACCEPTANCE 9c PASS: verify --quick byte-identical, {per_run:.1} s per run");
}

#[test]
fn missing_reference_is_machine_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let output = bomi()
        .args(["fit", "--reference", "/nonexistent/records.csv"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let json: serde_json::Value = serde_json::from_str(stderr.trim()).expect("stderr is JSON");
    assert!(json["error"]["kind"].is_string());
    assert!(out.join("error.json").exists());
}

#[test]
fn invalid_target_list_rejected_before_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.toml");
    std::fs::write(&cfg_path, "[experiment]\ntargets = [[1.0, 1.0]]\n").unwrap();
    let out = tmp.path().join("out");
    let start = std::time::Instant::now();
    let output = bomi()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("invalid_config"), "stderr: {stderr}");
    // validation fires before any stepping
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(!out.join("records.csv").exists());
}

#[test]
fn misordered_timescales_emit_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("misordered.toml");
    // eta > gamma breaks the expected ordering k_P << eta << gamma
    std::fs::write(&cfg, "[model]\neta = 1.0\ngamma = 0.2\n").unwrap();
    let out = tmp.path().join("out");
    let output = bomi()
        .args(["verify", "--quick"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("timescale ordering violated"),
        "stderr: {stderr}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("verify_report.json")).unwrap())
            .unwrap();
    let entry = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "timescale_ordering_model_params")
        .unwrap();
    assert_eq!(entry["passed"], false);
}

#[test]
fn sessions_and_trials_flags_thread_through() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let status = bomi()
        .args(["simulate", "--sessions", "1", "--trials", "5", "--seed", "2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_trials"], 5);
}

#[test]
fn gamma_range_echoed_in_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg_text = std::fs::read_to_string(small_fit_config(tmp.path())).unwrap();
    // coarser grid so the full [0, 10] interval stays cheap
    cfg_text = cfg_text.replace("coarse_step = 0.1", "coarse_step = 1.0");
    cfg_text = cfg_text.replace("fine_step = 0.05", "fine_step = 0.5");
    let cfg = tmp.path().join("echo.toml");
    std::fs::write(&cfg, cfg_text).unwrap();

    let sim = tmp.path().join("sim");
    assert!(bomi()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "9"])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap()
        .success());
    let fit = tmp.path().join("fit");
    assert!(bomi()
        .arg("fit")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "9", "--gamma-range", "0", "10", "--reference"])
        .arg(sim.join("records.csv"))
        .arg("--out")
        .arg(&fit)
        .status()
        .unwrap()
        .success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["gamma_search_range"][0], 0.0);
    assert_eq!(report["gamma_search_range"][1], 10.0);
    assert!(report["result"]["eta_hat"].is_number());
    assert!(report["result"]["gamma_hat"].is_number());
}

#[test]
fn skip_gamma_gives_eta_only_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_fit_config(tmp.path());
    let sim = tmp.path().join("sim");
    assert!(bomi()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "9"])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap()
        .success());
    let fit = tmp.path().join("fit");
    assert!(bomi()
        .arg("fit")
        .arg("--config")
        .arg(&cfg)
        .args(["--skip-gamma", "--reference"])
        .arg(sim.join("records.csv"))
        .arg("--out")
        .arg(&fit)
        .status()
        .unwrap()
        .success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert!(report["result"]["eta_hat"].is_number());
    assert!(report["result"]["gamma_hat"].is_null());
    assert!(!fit.join("gamma_curve.csv").exists());
}
