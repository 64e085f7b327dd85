//! Per-run manifest: everything needed to replay a run, plus wall times.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use timba::Result;

use crate::config::BenchConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: BenchConfig,
    pub git_describe: Option<String>,
    pub started_unix_s: u64,
    /// Seconds per named phase, in completion order of their names.
    pub wall_times_s: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    started: Option<Instant>,
}

/// `git describe --always --dirty` of the working directory, if any.
pub fn git_describe() -> Option<String> {
    let out = Command::new("git").args(["describe", "--always", "--dirty", "--tags"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

impl Manifest {
    pub fn new(command: &str, config: &BenchConfig) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            seed: config.seed,
            config: config.clone(),
            git_describe: git_describe(),
            started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_times_s: BTreeMap::new(),
            outputs: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    /// Runs `f`, recording its wall time under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.wall_times_s.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes `manifest.json` into `dir`, stamping the total wall time.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        if let Some(t) = self.started {
            self.wall_times_s.insert("total".into(), t.elapsed().as_secs_f64());
        }
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
