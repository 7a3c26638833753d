//! On-disk trigger bundles: `trigger.tensor`, `base.tensor` and `meta.json`
//! in one directory per trigger.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::json;
use crate::safd::{within_budget, DistillConfig, LossParts, LossRecord, TriggerArtifact, TriggerSpec};
use crate::scalar::Real;
use crate::tokenizer::TokenSeq;
use crate::vlm::{load_image, save_image};

pub const TRIGGER_FILE: &str = "trigger.tensor";
pub const BASE_FILE: &str = "base.tensor";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    id: String,
    prompt: TokenSeq,
    teacher_response: TokenSeq,
    key_digest: String,
    distill_config: DistillConfig,
    rho: Option<f64>,
    initial_loss: LossParts,
    final_loss: LossParts,
    initial_z: Option<f64>,
    final_z: Option<f64>,
    history: Vec<LossRecord>,
    injected_norms: Vec<f64>,
    projection_violations: usize,
    threshold: Option<f64>,
}

/// Writes one bundle into `dir` (created if needed). `extra` fields are
/// merged into `meta.json` next to the artifact fields.
pub fn save_bundle<F: Real>(dir: &Path, artifact: &TriggerArtifact<F>, extra: &Map<String, Value>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&artifact.trigger_image, &dir.join(TRIGGER_FILE))?;
    save_image(artifact.spec.base_image(), &dir.join(BASE_FILE))?;
    let meta = Meta {
        id: artifact.id(),
        prompt: artifact.spec.prompt().to_vec(),
        teacher_response: artifact.spec.teacher_response().to_vec(),
        key_digest: artifact.spec.key_digest().to_string(),
        distill_config: artifact.distill_config,
        rho: artifact.rho,
        initial_loss: artifact.initial_loss,
        final_loss: artifact.final_loss,
        initial_z: artifact.initial_z,
        final_z: artifact.final_z,
        history: artifact.history.clone(),
        injected_norms: artifact.injected_norms.clone(),
        projection_violations: artifact.projection_violations,
        threshold: artifact.threshold,
    };
    let mut value = serde_json::to_value(meta)?;
    if let Value::Object(map) = &mut value {
        for (k, v) in extra {
            map.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    let path = dir.join(META_FILE);
    std::fs::write(&path, json::to_canonical(&value)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle<F: Real>(dir: &Path) -> Result<TriggerArtifact<F>> {
    let trigger_image = load_image(&dir.join(TRIGGER_FILE))?;
    let base = load_image(&dir.join(BASE_FILE))?;
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if trigger_image.shape() != base.shape() {
        return Err(Error::Shape(format!("{}: trigger and base images differ in shape", dir.display())));
    }
    if !within_budget(&trigger_image, &base, F::lit(meta.distill_config.epsilon)) {
        return Err(Error::Consistency(format!("{}: trigger leaves the perturbation budget", dir.display())));
    }
    let spec = TriggerSpec::new(base, meta.prompt, meta.key_digest, meta.teacher_response)?;
    let artifact = TriggerArtifact {
        trigger_image,
        spec,
        distill_config: meta.distill_config,
        rho: meta.rho,
        initial_loss: meta.initial_loss,
        final_loss: meta.final_loss,
        initial_z: meta.initial_z,
        final_z: meta.final_z,
        history: meta.history,
        injected_norms: meta.injected_norms,
        projection_violations: meta.projection_violations,
        threshold: meta.threshold,
    };
    if artifact.id() != meta.id {
        return Err(Error::Consistency(format!(
            "{}: recorded id {} does not match contents ({})",
            dir.display(),
            meta.id,
            artifact.id()
        )));
    }
    Ok(artifact)
}

/// Bundle directory name for the `index`-th trigger of a set.
pub fn bundle_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("t{index:03}"))
}

/// Writes a whole set as `root/t000`, `root/t001`, ...
pub fn save_set<F: Real>(root: &Path, artifacts: &[TriggerArtifact<F>], extra: &Map<String, Value>) -> Result<()> {
    for (i, a) in artifacts.iter().enumerate() {
        save_bundle(&bundle_dir(root, i), a, extra)?;
    }
    Ok(())
}

/// Loads every bundle directory under `root`, in name order.
pub fn load_set<F: Real>(root: &Path) -> Result<Vec<TriggerArtifact<F>>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(META_FILE).exists() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no trigger bundles found", root.display())));
    }
    dirs.sort();
    dirs.iter().map(|d| load_bundle(d)).collect()
}
