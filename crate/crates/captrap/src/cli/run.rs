//! Run directories and provenance manifests. Every pipeline invocation gets
//! a fresh directory under the workspace root holding each stage's artifacts
//! plus a manifest of their digests, so a finished run can be audited and two
//! runs can be compared file by file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::poison::sha256_hex;

use super::CliError;

/// Environment variable overriding where run directories are created.
pub const HOME_ENV: &str = "CAPTRAP_HOME";
const DEFAULT_HOME: &str = "captrap-runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Written as manifest.json at the end of a run. `timing_secs` is advisory
/// and excluded from the identity hash; everything else pins the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub timing_secs: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timing_secs: BTreeMap::new(),
        }
    }

    /// Digest over everything except timing. Two runs of one config agree
    /// here iff every recorded artifact agrees.
    pub fn identity_hash(&self) -> String {
        let stripped = Self {
            timing_secs: BTreeMap::new(),
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&stripped).expect("manifest serializes").as_bytes())
    }

    /// Records a file or directory that must already exist under `run_dir`.
    pub fn record(&mut self, name: &str, run_dir: &Path, relative: &str) -> Result<(), CliError> {
        let full = run_dir.join(relative);
        let sha256 = hash_path(&full)?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry { path: relative.replace('\\', "/"), sha256 },
        );
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(run_dir.join("manifest.json"), text)
            .map_err(|e| CliError::Stage(format!("write manifest: {e}")))
    }

    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }

    /// Re-hashes every recorded artifact. Returns the names that no longer
    /// match, empty meaning the run directory is intact.
    pub fn verify(&self, run_dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for (name, entry) in &self.artifacts {
            let full = run_dir.join(&entry.path);
            match hash_path(&full) {
                Ok(h) if h == entry.sha256 => {}
                _ => bad.push(name.clone()),
            }
        }
        Ok(bad)
    }
}

/// sha256 of a file, or of a directory tree (stable walk order, each entry
/// contributing its relative path and content digest).
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let meta = fs::metadata(path)
        .map_err(|e| CliError::Stage(format!("hash {}: {e}", path.display())))?;
    if meta.is_file() {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Stage(format!("hash {}: {e}", path.display())))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut lines = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::Stage(format!("hash {}: {e}", dir.display())))?
            .map(|r| r.map(|d| d.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Stage(format!("hash {}: {e}", dir.display())))?;
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                stack.push(entry);
            } else {
                let rel = entry
                    .strip_prefix(path)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                let bytes = fs::read(&entry)
                    .map_err(|e| CliError::Stage(format!("hash {}: {e}", entry.display())))?;
                lines.push(format!("{rel}:{}", sha256_hex(&bytes)));
            }
        }
    }
    lines.sort();
    Ok(sha256_hex(lines.join("\n").as_bytes()))
}

/// Workspace root for run directories: $CAPTRAP_HOME or ./captrap-runs.
pub fn runs_home() -> PathBuf {
    match std::env::var_os(HOME_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_HOME),
    }
}

/// Creates run-YYYYMMDD-HHMMSS-<hash8> under the workspace root, suffixing
/// on collision so concurrent runs never share a directory.
pub fn create_run_dir(config_hash: &str) -> Result<PathBuf, CliError> {
    create_run_dir_in(&runs_home(), config_hash)
}

pub fn create_run_dir_in(home: &Path, config_hash: &str) -> Result<PathBuf, CliError> {
    create_prefixed_dir(home, "run", config_hash)
}

pub fn create_prefixed_dir(
    home: &Path,
    prefix: &str,
    config_hash: &str,
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(home)
        .map_err(|e| CliError::Stage(format!("create {}: {e}", home.display())))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stamp = format_utc(secs);
    let tag = &config_hash[..8.min(config_hash.len())];
    for attempt in 0..1000u32 {
        let name = if attempt == 0 {
            format!("{prefix}-{stamp}-{tag}")
        } else {
            format!("{prefix}-{stamp}-{tag}-{attempt}")
        };
        let dir = home.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Stage(format!("create {}: {e}", dir.display()))),
        }
    }
    Err(CliError::Stage("run directory collision not resolvable".into()))
}

/// YYYYMMDD-HHMMSS for a unix timestamp, proleptic Gregorian. Days-to-date
/// by Howard Hinnant's civil_from_days.
pub fn format_utc(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (h, m, s) = (rem / 3600, (rem / 60) % 60, rem % 60);

    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = if month <= 2 { y + 1 } else { y };

    format!("{year:04}{month:02}{d:02}-{h:02}{m:02}{s:02}")
}

/// Copies `src` (file) into the run directory under `relative`.
pub fn stage_file(src: &Path, run_dir: &Path, relative: &str) -> Result<(), CliError> {
    let dst = run_dir.join(relative);
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Stage(format!("create {}: {e}", parent.display())))?;
    }
    fs::copy(src, &dst)
        .map_err(|e| CliError::Stage(format!("copy {} -> {}: {e}", src.display(), dst.display())))?;
    Ok(())
}
