//! Configuration, orchestration and output for the `wqcp` experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{CliError, CliResult};
pub use experiments::run_experiment;
pub use manifest::RunManifest;

/// Environment variable consulted when `--out` is absent.
pub const OUT_DIR_ENV: &str = "WQCP_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "wqcp-out";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

/// Command-line overrides folded into the config before it is echoed.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, workers: Option<usize>) {
    if let Some(mc) = cfg.monte_carlo.as_mut() {
        if let Some(seed) = seed {
            mc.base_seed = seed;
        }
        if workers.is_some() {
            mc.workers = workers;
        }
    }
}

/// `--out` (or its environment fallback), then `output.dir`, then the default.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Loads the config, applies overrides and runs it; returns the exit code.
pub fn run_from_file(
    kind: ExperimentKind,
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> CliResult<RunManifest> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.resolve_kind(kind)?;
    apply_overrides(&mut cfg, seed, workers);
    let dir = resolve_out_dir(out, &cfg);
    run_experiment(&cfg, &dir)
}

pub fn exit_code(result: &CliResult<RunManifest>) -> i32 {
    match result {
        Ok(m) if m.error.is_some() => EXIT_ERROR,
        Ok(m) if m.all_pass() => EXIT_PASS,
        Ok(_) => EXIT_CHECK_FAILED,
        Err(_) => EXIT_ERROR,
    }
}
