//! Run directories: `<runs root>/<timestamp>-<config hash>/{outputs,meta}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RUNS_ROOT_ENV: &str = "DEFECTGEN_RUNS_ROOT";

pub struct RunDir {
    pub root: PathBuf,
    pub outputs: PathBuf,
    pub meta: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    config_hash: &'a str,
    version: &'a str,
    started: String,
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_file(path, text)
}

impl RunDir {
    /// Creates a fresh run directory and records the resolved config and
    /// command line under `meta/`.
    pub fn create(command: &str, config_hash: &str, config: Option<&RunConfig>) -> CliResult<Self> {
        let base = std::env::var_os(RUNS_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let now = chrono::Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S");
        let mut root = base.join(format!("{stamp}-{config_hash}"));
        let mut n = 1;
        while root.exists() {
            root = base.join(format!("{stamp}-{config_hash}-{n}"));
            n += 1;
        }
        let outputs = root.join("outputs");
        let meta = root.join("meta");
        for d in [&outputs, &meta] {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
        }
        let run = Self { root, outputs, meta };
        if let Some(cfg) = config {
            write_file(&run.meta.join("config.toml"), cfg.to_toml())?;
        }
        write_json(
            &run.meta.join("run.json"),
            &RunRecord {
                command,
                args: std::env::args().skip(1).collect(),
                config_hash,
                version: env!("CARGO_PKG_VERSION"),
                started: now.to_rfc3339(),
            },
        )?;
        Ok(run)
    }
}
