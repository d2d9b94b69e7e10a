//! Run directory layout: atomic file writes, the manifest and its checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const ERROR: &str = "error.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Writes `name` inside `dir` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(path)
}

/// Collects the files of one run and writes them atomically.
pub struct RunDir {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(RunDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir, name, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Buffers a writer-based export and stores it atomically.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

/// A derived constant and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub provenance: String,
}

impl Constant {
    pub fn exact(value: f64, provenance: impl Into<String>) -> Self {
        Constant { value: Some(value), se: None, provenance: provenance.into() }
    }

    pub fn estimate(value: f64, se: f64, provenance: impl Into<String>) -> Self {
        Constant { value: Some(value), se: Some(se), provenance: provenance.into() }
    }

    pub fn unavailable(reason: impl Into<String>) -> Self {
        Constant { value: None, se: None, provenance: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Info,
}

/// One estimate compared with its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    pub tolerance: String,
    pub status: Status,
}

impl Check {
    pub fn info(name: impl Into<String>, estimate: f64, se: Option<f64>) -> Self {
        Check { name: name.into(), estimate, se, target: None, tolerance: "-".into(), status: Status::Info }
    }

    /// `|estimate - target| <= z se`.
    pub fn within_se(name: impl Into<String>, estimate: f64, se: f64, target: f64, z: f64) -> Self {
        let pass = (estimate - target).abs() <= z * se;
        Check {
            name: name.into(),
            estimate,
            se: Some(se),
            target: Some(target),
            tolerance: format!("{z} SE"),
            status: if pass { Status::Pass } else { Status::Fail },
        }
    }

    /// `|estimate - target| <= tol`.
    pub fn within_abs(name: impl Into<String>, estimate: f64, target: f64, tol: f64) -> Self {
        let pass = (estimate - target).abs() <= tol;
        Check::flag(name, estimate, Some(target), format!("abs {tol:e}"), pass)
    }

    /// `|estimate - target| <= tol |target|`.
    pub fn within_rel(name: impl Into<String>, estimate: f64, target: f64, tol: f64) -> Self {
        let pass = (estimate - target).abs() <= tol * target.abs();
        Check::flag(name, estimate, Some(target), format!("rel {tol}"), pass)
    }

    pub fn flag(
        name: impl Into<String>,
        estimate: f64,
        target: Option<f64>,
        tolerance: impl Into<String>,
        pass: bool,
    ) -> Self {
        Check {
            name: name.into(),
            estimate,
            se: None,
            target,
            tolerance: tolerance.into(),
            status: if pass { Status::Pass } else { Status::Fail },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub config: RunConfig,
    pub constants: BTreeMap<String, Constant>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}
