//! The `mvnad` command-line pipeline as a library: every subcommand is a
//! plain function so tests can drive it without spawning processes.

pub mod calib;
pub mod config;
pub mod error;
pub mod eval;
pub mod ps;
pub mod report;
pub mod synth;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{Config, RunConfig};
pub use error::{CliError, CliResult};

use error::io_err;

/// Reads the optional config file, applies `--seed`, and validates.
pub fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.set("run.seed", s)?;
    }
    RunConfig::from_config(cfg)
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub(crate) fn checkpoint_path(run_dir: &Path, category: &str) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{category}.ckpt"))
}

/// Provenance preamble shared by text artifacts: `# key=value` lines.
pub(crate) fn preamble(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}
