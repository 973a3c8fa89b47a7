//! Output directory handling and the `report.json` bundle.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable bound, e.g. `<= 0.001` or `in [0.9, 1.3]`.
    pub bound: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
}

/// Everything a run wrote and checked. The config and seed are embedded so
/// the run can be repeated from the report alone.
#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub command: String,
    pub seed: u64,
    /// The effective config file, unset keys omitted.
    pub config: Value,
    pub files: Vec<String>,
    pub stats: Map<String, Value>,
    pub checks: Vec<Check>,
    pub status: Status,
}

impl ReportBundle {
    pub fn new(command: &str, seed: u64, config: &RunConfig) -> Self {
        let mut config = serde_json::to_value(config).unwrap_or(Value::Null);
        strip_nulls(&mut config);
        Self {
            command: command.to_string(),
            seed,
            config,
            files: Vec::new(),
            stats: Map::new(),
            checks: Vec::new(),
            status: Status::Pass,
        }
    }

    pub fn stat(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.stats.insert(key.to_string(), v);
    }

    pub fn check_max(&mut self, name: &str, value: f64, bound: f64) {
        self.push(name, value, format!("<= {bound:e}"), value <= bound);
    }

    pub fn check_range(&mut self, name: &str, value: f64, lo: Option<f64>, hi: Option<f64>) {
        let pass = lo.is_none_or(|l| value >= l) && hi.is_none_or(|h| value <= h);
        let bound = match (lo, hi) {
            (Some(l), Some(h)) => format!("in [{l}, {h}]"),
            (Some(l), None) => format!(">= {l}"),
            (None, Some(h)) => format!("<= {h}"),
            (None, None) => "any".to_string(),
        };
        self.push(name, value, bound, pass);
    }

    /// A check that failed outright (the value is not meaningful).
    pub fn fail(&mut self, name: &str, reason: &str) {
        self.push(name, f64::NAN, reason.to_string(), false);
    }

    fn push(&mut self, name: &str, value: f64, bound: String, pass: bool) {
        if !pass {
            self.status = Status::Fail;
        }
        self.checks.push(Check { name: name.to_string(), value, bound, pass });
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

fn strip_nulls(v: &mut Value) {
    if let Value::Object(map) = v {
        map.retain(|_, x| !x.is_null());
        map.values_mut().for_each(strip_nulls);
        map.retain(|_, x| !matches!(x, Value::Object(m) if m.is_empty()));
    }
}

/// Single writer for one output directory; records every file it creates.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `report.json` (listing itself) and returns the bundle.
    pub fn finish(mut self, mut report: ReportBundle) -> anyhow::Result<ReportBundle> {
        self.files.push(REPORT_FILE.to_string());
        report.files = self.files;
        let text = serde_json::to_string_pretty(&report)?;
        let path = self.dir.join(REPORT_FILE);
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(report)
    }
}
