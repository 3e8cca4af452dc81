//! Run directories and manifests. Every stage writes its outputs into a
//! fresh directory together with `manifest.json` (config snapshot, seeds,
//! and a content hash for every artifact it produced or consumed) and the
//! resolved `config.toml`. A downstream stage re-hashes everything its
//! parent recorded before touching it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub created: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Run directory this stage consumed, if any.
    pub parent: Option<PathBuf>,
    /// Produced and inherited artifacts by role.
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let f = File::open(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r
            .read(&mut buf)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// A stage's output directory while it is being filled.
pub struct Run {
    pub dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    /// Creates `<root>/<stage>-<timestamp>-<config hash prefix>`.
    pub fn create(root: &Path, stage: &str, config: &RunConfig, parent: Option<&Loaded>) -> CliResult<Self> {
        let hash = config.hash();
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f").to_string();
        let dir = root.join(format!("{stage}-{stamp}-{}", &hash[..12]));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Artifact(format!("{}: {e}", dir.display())))?;
        let dir = dir
            .canonicalize()
            .map_err(|e| CliError::Artifact(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("config.toml"), config.to_toml())
            .map_err(|e| CliError::Artifact(format!("{}: {e}", dir.display())))?;
        let manifest = Manifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created: chrono::Local::now().to_rfc3339(),
            config_hash: hash,
            seed: config.seed,
            config: config.clone(),
            parent: parent.map(|p| p.dir.clone()),
            artifacts: parent.map(|p| p.manifest.artifacts.clone()).unwrap_or_default(),
        };
        Ok(Self { dir, manifest })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Hashes `file` (already written inside the run directory) and
    /// records it under `role`.
    pub fn record(&mut self, role: &str, file: &str) -> CliResult<()> {
        let path = self.path(file);
        let sha256 = sha256_file(&path)?;
        self.manifest.artifacts.insert(role.to_string(), Artifact { path, sha256 });
        Ok(())
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let p = self.path(MANIFEST);
        std::fs::write(&p, text).map_err(|e| CliError::Artifact(format!("{}: {e}", p.display())))?;
        Ok(self.dir)
    }
}

/// A finished, verified upstream run.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Loaded {
    /// Reads the manifest in `dir` and re-hashes every recorded artifact.
    pub fn open(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p)
            .map_err(|e| CliError::Artifact(format!("{}: {e}; is this a run directory?", p.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", p.display())))?;
        for (role, a) in &manifest.artifacts {
            let actual = sha256_file(&a.path)?;
            if actual != a.sha256 {
                return Err(CliError::Artifact(format!(
                    "{} ({role}) changed since it was recorded: expected sha256 {}, found {actual}",
                    a.path.display(),
                    a.sha256
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Path of a required artifact.
    pub fn artifact(&self, role: &str) -> CliResult<&Path> {
        self.manifest
            .artifacts
            .get(role)
            .map(|a| a.path.as_path())
            .ok_or_else(|| {
                CliError::Artifact(format!(
                    "{} ({} stage) has no `{role}` artifact; run the stage that produces it first",
                    self.dir.display(),
                    self.manifest.stage
                ))
            })
    }
}
