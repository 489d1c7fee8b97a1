use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a command: arguments, seed, scenario and files.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub master_seed: u64,
    pub jobs: Option<usize>,
    pub scenario_hash: String,
    pub scenario: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: u64, jobs: Option<usize>, scenario: &zonefuse::Scenario) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().collect(),
            master_seed,
            jobs,
            scenario_hash: scenario.hash(),
            scenario: serde_json::from_str(&scenario.to_json()).expect("scenario is JSON"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            summary: serde_json::Map::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary value serializes"));
    }

    /// Writes via a sibling temp file and rename so readers never see a partial manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}
