use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// One per command invocation. `settings` holds the fully layered inputs, so
/// `ctxlm replay` can rerun the command without the original config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub corpus_hash: Option<String>,
    pub output_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: BTreeMap<String, Artifact>,
    pub settings: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Collects artifacts while a command runs and writes the manifest at the end.
pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(
        command: &str,
        output_dir: &Path,
        settings: &impl Serialize,
    ) -> anyhow::Result<Self> {
        std::fs::create_dir_all(output_dir)
            .with_context(|| format!("creating {}", output_dir.display()))?;
        Ok(Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_path: None,
                seed: None,
                corpus_hash: None,
                output_dir: output_dir.to_path_buf(),
                started_at: now(),
                finished_at: String::new(),
                artifacts: BTreeMap::new(),
                settings: serde_json::to_value(settings)?,
            },
        })
    }

    pub fn artifact_hash(&self, key: &str) -> Option<&str> {
        self.manifest.artifacts.get(key).map(|a| a.sha256.as_str())
    }

    pub fn config_path(&mut self, path: Option<&Path>) -> &mut Self {
        self.manifest.config_path = path.map(Path::to_path_buf);
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn corpus_hash(&mut self, hash: &str) -> &mut Self {
        self.manifest.corpus_hash = Some(hash.to_string());
        self
    }

    /// Writes `contents` to `name` inside the output directory and records it.
    pub fn write(
        &mut self,
        key: &str,
        name: &str,
        contents: impl AsRef<[u8]>,
    ) -> anyhow::Result<PathBuf> {
        let path = self.manifest.output_dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(key, &path)?;
        Ok(path)
    }

    /// Records a file written elsewhere.
    pub fn record(&mut self, key: &str, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.artifacts.insert(
            key.to_string(),
            Artifact {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        self.manifest.finished_at = now();
        let path = self.manifest.output_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

pub fn load_manifest(path: &Path) -> anyhow::Result<RunManifest> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
