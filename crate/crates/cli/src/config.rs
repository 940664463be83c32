//! Versioned configuration documents read by the commands.

use std::path::{Path, PathBuf};

use localsdf::fit::{FitConfig, RefineConfig};
use localsdf::io::peek_version;
use localsdf::metrics::EvalProtocol;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RUN_VERSION: u64 = 1;
pub const REFINE_RUN_VERSION: u64 = 1;
pub const PROTOCOL_VERSION: u64 = 1;
pub const KEPT_VERSION: u64 = 1;
pub const SUMMARY_VERSION: u64 = 1;

/// Input of `localsdf fit`. Relative paths resolve against the directory
/// of the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u64,
    pub scene: PathBuf,
    /// Pre-drawn training samples; drawn from the scene when absent.
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default)]
    pub fit: FitConfig,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
    /// Optional kept-index list when compacting.
    #[serde(default)]
    pub kept: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.scene);
        join(&mut self.checkpoint);
        for p in [&mut self.samples, &mut self.report, &mut self.kept].into_iter().flatten() {
            join(p);
        }
    }
}

/// Input of `localsdf refine`: optimizer settings plus how the surface and
/// free-space point sets are drawn from the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineRun {
    pub version: u64,
    pub refine: RefineConfig,
    pub n_surface: usize,
    pub n_positive: usize,
    /// Free-space points satisfy `sdf > positive_margin`.
    pub positive_margin: f64,
    pub sample_seed: u64,
}

impl Default for RefineRun {
    fn default() -> Self {
        Self {
            version: REFINE_RUN_VERSION,
            refine: RefineConfig::default(),
            n_surface: 4_096,
            n_positive: 4_096,
            positive_margin: 0.005,
            sample_seed: 0,
        }
    }
}

/// Output of `localsdf downsample --kept-out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeptList {
    pub version: u64,
    pub n_before: usize,
    pub kept: Vec<usize>,
}

/// Parses a document after checking its top-level `version`.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, what: &str, expected: u64) -> anyhow::Result<T> {
    let version = peek_version(text).map_err(|e| anyhow::anyhow!("invalid {what}: {e}"))?;
    if version != expected {
        anyhow::bail!("unsupported {what} version {version} (expected {expected})");
    }
    serde_json::from_str(text).map_err(|e| anyhow::anyhow!("invalid {what}: {e}"))
}

/// Protocol documents carry `version` next to the protocol fields, so the
/// field set is checked by removing it and parsing the remainder strictly.
pub fn parse_protocol(text: &str) -> anyhow::Result<EvalProtocol> {
    let version = peek_version(text).map_err(|e| anyhow::anyhow!("invalid protocol: {e}"))?;
    if version != PROTOCOL_VERSION {
        anyhow::bail!("unsupported protocol version {version} (expected {PROTOCOL_VERSION})");
    }
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("version");
    }
    serde_json::from_value(value).map_err(|e| anyhow::anyhow!("invalid protocol: {e}"))
}
