//! `bomi` — simulate, fit, verify, and plot a synergy-based motor-learning
//! model for a body-machine interface.
//!
//! Exit codes: 0 success, 1 verification-check failure, 2 error (invalid
//! config, IO, divergence). Errors are also emitted as machine-readable
//! JSON on stderr and as `error.json` in the output directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bomi_core::error::Error;
use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "bomi",
    version,
    about = "Synergy-based motor-learning toolkit for body-machine interfaces"
)]
struct Cli {
    /// TOML configuration file; CLI flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment protocol and emit records and metric CSVs.
    Simulate {
        /// Session count override.
        #[arg(long)]
        sessions: Option<usize>,
        /// Trials-per-session override.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Fit eta (exponential RE fit) and gamma (grid search) to reference
    /// records.
    Fit {
        /// Records CSV produced by `simulate` (with its .meta.json sidecar).
        #[arg(long)]
        reference: PathBuf,
        /// Gamma search interval.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        gamma_range: Option<Vec<f64>>,
        /// Fit eta only.
        #[arg(long)]
        skip_gamma: bool,
    },
    /// Run the stability verification suite.
    Verify {
        /// Reduced-system and PE checks only.
        #[arg(long)]
        quick: bool,
    },
    /// Draw SVG figures from previously emitted CSV artifacts.
    Plot {
        /// Directory holding the CSVs (defaults to --out).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::DegenerateData(_) => "degenerate_data",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::InvalidConfig(_) => "invalid_config",
        Error::Diverged { .. } => "diverged",
        Error::ExperimentDiverged { .. } => "diverged",
        Error::ZeroTrueMapping => "zero_true_mapping",
        Error::EmptyGroup(_) => "empty_group",
        Error::FitDiverged(_) => "fit_diverged",
        Error::WindowTooLong { .. } => "window_too_long",
        Error::SchemaVersionMismatch(_) => "schema_mismatch",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn emit_error(out_dir: &std::path::Path, e: &Error) {
    let payload = serde_json::json!({
        "error": { "kind": error_kind(e), "message": e.to_string() }
    });
    let text = serde_json::to_string_pretty(&payload).unwrap();
    eprintln!("{text}");
    let _ = std::fs::write(out_dir.join("error.json"), text + "\n");
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(msg) => {
            let e = Error::InvalidConfig(msg);
            emit_error(&cli.out, &e);
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        emit_error(&cli.out, &Error::Io(e));
        return ExitCode::from(2);
    }

    // subcommand-level overrides
    match &cli.command {
        Command::Simulate { sessions, trials } => {
            if let Some(s) = sessions {
                cfg.experiment.sessions = *s;
            }
            if let Some(t) = trials {
                cfg.experiment.trials_per_session = *t;
            }
        }
        Command::Fit { skip_gamma: true, .. } => {
            cfg.fitting.skip_gamma = true;
        }
        _ => {}
    }

    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };

    let outcome = match &cli.command {
        Command::Simulate { .. } => commands::cmd_simulate(&ctx).map(|()| true),
        Command::Fit { reference, gamma_range, .. } => {
            let range = gamma_range.as_ref().map(|v| (v[0], v[1]));
            commands::cmd_fit(&ctx, reference, range).map(|()| true)
        }
        Command::Verify { quick } => commands::cmd_verify(&ctx, *quick),
        Command::Plot { input } => commands::cmd_plot(&ctx, input.as_deref()).map(|()| true),
    };

    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1), // verification checks failed
        Err(e) => {
            emit_error(&cli.out, &e);
            ExitCode::from(2)
        }
    }
}
