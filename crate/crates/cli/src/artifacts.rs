//! On-disk layout of a run directory and the small JSON manifests in it.

use std::fs;
use std::path::{Path, PathBuf};

use akd_core::model::{load_checkpoint, Checkpoint};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TEACHER_PREFIX: &str = "teacher";
pub const STUDENT_PREFIX: &str = "student";

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn teachers(&self) -> PathBuf {
        self.root.join("teachers")
    }

    pub fn member(&self, i: usize) -> PathBuf {
        self.teachers().join(format!("member{i}"))
    }

    pub fn teacher_manifest(&self) -> PathBuf {
        self.teachers().join("manifest.json")
    }

    pub fn teacher_epoch(&self, i: usize, epoch: usize) -> PathBuf {
        self.member(i).join(format!("{TEACHER_PREFIX}_ep{epoch}.ckpt"))
    }

    /// The early-stopped model of a member (the final one without a rule).
    pub fn teacher_designated(&self, i: usize) -> PathBuf {
        self.member(i).join(format!("{TEACHER_PREFIX}_designated.ckpt"))
    }

    pub fn student(&self) -> PathBuf {
        self.root.join("student")
    }

    pub fn student_manifest(&self) -> PathBuf {
        self.student().join("manifest.json")
    }

    pub fn student_epoch(&self, epoch: usize) -> PathBuf {
        self.student().join(format!("{STUDENT_PREFIX}_ep{epoch}.ckpt"))
    }

    pub fn student_final(&self) -> PathBuf {
        self.student().join(format!("{STUDENT_PREFIX}_final.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub member: usize,
    pub seed: u64,
    pub epochs: usize,
    pub designated_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherManifest {
    pub config_hash: String,
    pub beta: Vec<f64>,
    pub members: Vec<MemberEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentManifest {
    pub config_hash: String,
    pub loss: String,
    pub seed: u64,
    pub epochs: usize,
    /// Teacher epoch distilled from, per member; empty without a teacher.
    pub teacher_epochs: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("{}: unreadable ({e})", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Errors with every missing path listed when any is absent.
pub fn require_files(what: &str, paths: &[PathBuf]) -> CliResult<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what}: {}", missing.join(", "))))
    }
}

pub fn load(path: &Path, expected_hash: &str) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.config_hash != expected_hash {
        eprintln!(
            "warning: {} was produced by config {} (current {})",
            path.display(),
            short(&ck.config_hash),
            short(expected_hash)
        );
    }
    Ok(ck)
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
