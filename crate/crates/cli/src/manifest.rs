use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::commands::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    ConfigError,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

/// Written as `manifest.json` for every run, whatever its outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Flags as given.
    pub arguments: Value,
    /// Settings actually used, defaults filled in.
    pub resolved: serde_json::Map<String, Value>,
    pub status: Status,
    pub error: Option<String>,
    pub checks: Vec<Check>,
    pub timings: Vec<Stage>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, arguments: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            arguments,
            resolved: serde_json::Map::new(),
            status: Status::Pass,
            error: None,
            checks: Vec::new(),
            timings: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn resolve(&mut self, key: &str, value: impl Serialize) {
        self.resolved
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
        if !passed && self.status == Status::Pass {
            self.status = Status::Fail;
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let clock = Instant::now();
        let out = f(self);
        self.timings.push(Stage {
            name: stage.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    pub fn fail_config(&mut self, message: String) {
        self.status = Status::ConfigError;
        self.error = Some(message);
    }

    pub fn record_error(&mut self, e: &CliError) {
        self.error = Some(e.to_string());
        self.status = if e.is_config() { Status::ConfigError } else { Status::Fail };
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        if self.status == Status::Fail {
            if let Some(e) = &self.error {
                out.push(e.clone());
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)
    }
}
