//! Machine-readable run reports. Wall-clock timing is kept out of the report
//! so that reruns with the same configuration produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub tolerance: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            estimate: None,
            se: None,
            tolerance: None,
            verdict: Verdict::from_bool(pass),
        }
    }

    pub fn with_estimate(mut self, e: Estimate) -> Self {
        self.estimate = Some(e.mean);
        self.se = Some(e.se);
        self
    }

    pub fn with_value(mut self, v: f64) -> Self {
        self.estimate = Some(v);
        self
    }

    pub fn with_tolerance(mut self, t: f64) -> Self {
        self.tolerance = Some(t);
        self
    }

    pub fn pass(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub details: serde_json::Value,
}

impl RunReport {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: "smpdefault",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            seed: config.numerics.seed,
            config: config.clone(),
            checks: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(Check::pass)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<dir>/<name>` and returns its path.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, self.to_json()?)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub subcommand: String,
    pub seconds: f64,
}

pub fn write_timing(dir: &Path, subcommand: &str, seconds: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let t = Timing {
        subcommand: subcommand.to_string(),
        seconds,
    };
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&t)? + "\n")?;
    Ok(())
}
