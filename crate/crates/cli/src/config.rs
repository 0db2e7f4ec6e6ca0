//! TOML configuration. Command-line flags override the file, which overrides
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub key_file: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub mining: MiningSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub detection: DetectionSection,
    /// Worker threads; 0 or absent means one per core.
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
    pub world: Option<PathBuf>,
    pub bridge_program: Option<PathBuf>,
    pub model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningSection {
    pub k: Option<usize>,
    pub bidirectional: Option<bool>,
    pub cap: Option<usize>,
    pub seed: Option<u64>,
    pub gap_min: Option<f64>,
    pub composite_min: Option<f64>,
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub features_per_doc: Option<usize>,
    pub pool_size: Option<usize>,
    pub anchor_size: Option<usize>,
    pub temperature: Option<f64>,
    pub sentence_level: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub alpha: Option<f64>,
    pub candidates: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub min_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    pub threshold: Option<f64>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
