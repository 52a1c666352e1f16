//! Experiment configuration: a TOML file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stegact::data::{ClipSpec, Dataset, SyntheticCounts, SyntheticSpec};
use stegact::metrics::AttackerConfig;
use stegact::network::NetworkConfig;
use stegact::stego::HiderConfig;
use stegact::training::TrainConfig;
use stegact::{Error, Result};

pub const DATA_ROOT_ENV: &str = "STEGACT_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization, shuffling and pairing.
    pub seed: u64,
    /// Dataset directory (with `manifest.jsonl`) or a manifest file. When
    /// unset, the synthetic dataset below is generated in memory.
    pub data: Option<PathBuf>,
    /// Clip sampling for manifest data; defaults to what the dataset
    /// directory records, else the standard spec.
    pub clip: Option<ClipSpec>,
    pub synthetic: SyntheticSpec,
    pub counts: SyntheticCounts,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub hider: HiderConfig,
    pub attacker: AttackerConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Push the top-level seed into every component and fill the data root
    /// from the environment when unset.
    pub fn resolve(mut self) -> Result<Self> {
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.attacker.seed = self.seed;
        if self.data.is_none() {
            self.data = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        }
        self.synthetic.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.hider.validate()?;
        if let Some(c) = &self.clip {
            c.validate()?;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// First 12 hex digits of SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            None => Dataset::synthetic(&self.synthetic, &self.counts),
            Some(root) => {
                let manifest = if root.is_dir() { root.join("manifest.jsonl") } else { root.clone() };
                let clip = match &self.clip {
                    Some(c) => c.clone(),
                    None => recorded_clip(&manifest).unwrap_or_default(),
                };
                Dataset::from_manifest(&manifest, clip)
            }
        }
    }
}

/// The clip spec `gendata` writes next to its manifest.
fn recorded_clip(manifest: &Path) -> Option<ClipSpec> {
    let meta = manifest.parent()?.join("dataset.json");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(meta).ok()?).ok()?;
    serde_json::from_value(v.get("clip")?.clone()).ok()
}
