//! Experiment manifest: one JSON file describing a whole pipeline run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sif_core::mutate::MutationSpec;
use sif_core::rng::derive_seed;
use sif_core::safd::DistillConfig;
use sif_core::sda::SdaConfig;
use sif_core::vlm::{DecodeConfig, ModelConfig};
use sif_core::wmark::WatermarkParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Root of every random choice not pinned explicitly below.
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelSection,
    /// Key file; defaults to `<out>/key.json`.
    pub key: Option<String>,
    pub watermark: WatermarkParams,
    pub unrelated: UnrelatedSection,
    pub forge: ForgeSection,
    pub decode: DecodeConfig,
    pub mutations: Vec<MutationSpec>,
    pub sda: SdaConfig,
    /// JSON-lines query file for `attack`.
    pub queries: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub config: ModelConfig,
    /// Existing checkpoint to use instead of `<out>/model.ckpt`.
    pub checkpoint: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnrelatedSection {
    pub count: usize,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeSection {
    pub count: usize,
    pub response_len: usize,
    pub distill: DistillConfig,
    pub rho: Option<f64>,
    /// Seed for drawing base images and prompts.
    pub spec_seed: Option<u64>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            model: ModelSection::default(),
            key: None,
            watermark: WatermarkParams::default(),
            unrelated: UnrelatedSection::default(),
            forge: ForgeSection::default(),
            decode: DecodeConfig::greedy(80),
            mutations: Vec::new(),
            sda: SdaConfig::default(),
            queries: None,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            config: ModelConfig::default(),
            checkpoint: None,
            seed: None,
        }
    }
}

impl Default for UnrelatedSection {
    fn default() -> Self {
        Self {
            count: 3,
            checkpoints: Vec::new(),
        }
    }
}

impl Default for ForgeSection {
    fn default() -> Self {
        Self {
            count: 20,
            response_len: 80,
            distill: DistillConfig::default(),
            rho: None,
            spec_seed: None,
        }
    }
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read manifest", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: invalid manifest", path.display()))
    }

    pub fn model_seed(&self) -> u64 {
        self.model.seed.unwrap_or_else(|| derive_seed(self.seed, "model", 0))
    }

    pub fn key_seed(&self) -> u64 {
        derive_seed(self.seed, "key", 0)
    }

    pub fn unrelated_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "unrelated", index as u64)
    }

    pub fn spec_seed(&self) -> u64 {
        self.forge.spec_seed.unwrap_or_else(|| derive_seed(self.seed, "trigger-specs", 0))
    }

    /// SHA-256 of the canonical manifest with the output location blanked,
    /// so the same experiment written elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.out_dir.clear();
        let text = sif_core::json::to_canonical(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Where a manifest's relative paths point.
#[derive(Debug, Clone)]
pub struct Layout {
    pub base: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn key(&self) -> PathBuf {
        self.out.join("key.json")
    }

    pub fn unrelated(&self, index: usize) -> PathBuf {
        self.out.join("unrelated").join(format!("u{index:03}.ckpt"))
    }

    pub fn triggers(&self) -> PathBuf {
        self.out.join("triggers")
    }

    pub fn table(&self) -> PathBuf {
        self.out.join("thresholds.json")
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }

    pub fn sweep(&self) -> PathBuf {
        self.out.join("sweep.json")
    }

    pub fn mutated(&self, id: &str) -> PathBuf {
        self.out.join("mutated").join(format!("{id}.ckpt"))
    }

    pub fn attack(&self) -> PathBuf {
        self.out.join("attack.jsonl")
    }

    pub fn attack_summary(&self) -> PathBuf {
        self.out.join("attack_summary.json")
    }

    pub fn csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_ignores_out_dir() {
        let m = ExperimentManifest::default();
        let text = serde_json::to_string(&m).unwrap();
        let back: ExperimentManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let moved = ExperimentManifest {
            out_dir: "elsewhere".into(),
            ..m.clone()
        };
        assert_eq!(moved.hash(), m.hash());
        let reseeded = ExperimentManifest { seed: 1, ..m.clone() };
        assert_ne!(reseeded.hash(), m.hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<ExperimentManifest>(r#"{"sead": 3}"#).is_err());
        let m: ExperimentManifest = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.forge.count, 20);
    }
}
