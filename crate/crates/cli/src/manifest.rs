use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// A contiguous range of input lines, `start` inclusive and `end` exclusive
/// (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &SplitRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub created_at: String,
    pub config: ResolvedConfig,
    pub input: Option<PathBuf>,
    pub input_lines: Option<usize>,
    /// Record file, or the directory of a split run.
    pub output: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub parallel: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitRange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<usize>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ResolvedConfig, parallel: usize) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: config.clone(),
            input: None,
            input_lines: None,
            output: None,
            outputs: Vec::new(),
            parallel,
            splits: Vec::new(),
            sweep: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifests serialize");
        fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        anyhow::ensure!(
            manifest.schema_version == MANIFEST_SCHEMA_VERSION,
            "manifest {} has schema version {}, expected {MANIFEST_SCHEMA_VERSION}",
            path.display(),
            manifest.schema_version
        );
        Ok(manifest)
    }
}

/// `<file>.manifest.json` next to an output file.
pub fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    output.with_file_name(name)
}
