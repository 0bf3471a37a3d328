//! Artifact collection and the on-disk layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Files produced by one command, keyed by relative path, plus a human-readable
/// summary for stdout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    pub files: BTreeMap<String, String>,
    pub summary: Vec<String>,
    /// Set when any configuration diverged in every run.
    pub all_runs_diverged: bool,
    /// Set when a checked tolerance was exceeded.
    pub breach: bool,
}

impl Artifacts {
    pub fn csv(&mut self, name: &str, header: &str) -> &mut String {
        let entry = self.files.entry(name.to_string()).or_default();
        if entry.is_empty() {
            entry.push_str(header);
            entry.push('\n');
        }
        entry
    }

    pub fn row(&mut self, name: &str, header: &str, fields: std::fmt::Arguments<'_>) {
        let csv = self.csv(name, header);
        csv.write_fmt(fields).expect("writing to a String");
        csv.push('\n');
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.canonical().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn manifest(artifacts: &Artifacts, config: &ExperimentConfig) -> String {
    let files: Vec<&String> = artifacts.files.keys().collect();
    let value = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "scenario": config.scenario.name(),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "git_describe": git_describe(),
        "files": files,
    });
    let mut text = serde_json::to_string_pretty(&value).expect("manifest serializes");
    text.push('\n');
    text
}

/// Writes every artifact under `dir` plus `manifest.json`.
pub fn emit_plot_data(artifacts: &Artifacts, config: &ExperimentConfig, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in &artifacts.files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, body)?;
    }
    std::fs::write(dir.join("manifest.json"), manifest(artifacts, config))
}
