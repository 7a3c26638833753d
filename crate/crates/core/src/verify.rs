//! Per-query thresholds, fingerprint matching rate and robustness sweeps.
//!
//! A trigger matches a suspect model when the z-score of the suspect's
//! response to (trigger image, prompt) is strictly above the trigger's
//! threshold, which is the largest z-score any calibration model produced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::mutate::MutationSpec;
use crate::safd::TriggerArtifact;
use crate::scalar::Real;
use crate::vlm::{decode, model_digest, DecodeConfig, DecodeMode, ModelParams};
use crate::wmark::{detect_with_mask, green_list, scored_len, GreenMask, WatermarkKey, WatermarkParams};

/// Responses with fewer scored tokens carry no usable statistic.
pub const MIN_SCORED_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub trigger_id: String,
    /// `+inf` (JSON `null`) when every calibration response was degenerate.
    #[serde(with = "json::inf_as_null")]
    pub tau: f64,
    /// One z-score per calibration model, in `calibration_models` order;
    /// degenerate responses are kept as `+inf` and excluded from `tau`.
    #[serde(with = "json::vec_inf_as_null")]
    pub calibration_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub key_digest: String,
    pub gamma: f64,
    pub decode_config: DecodeConfig,
    pub calibration_models: Vec<String>,
    /// Sorted by trigger id.
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn tau(&self, trigger_id: &str) -> Option<f64> {
        self.entries
            .binary_search_by(|e| e.trigger_id.as_str().cmp(trigger_id))
            .ok()
            .map(|i| self.entries[i].tau)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_canonical(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut t: Self = serde_json::from_str(text)?;
        t.entries.sort_by(|a, b| a.trigger_id.cmp(&b.trigger_id));
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmrEntry {
    pub trigger_id: String,
    /// `None` when the suspect's response was degenerate.
    pub z: Option<f64>,
    #[serde(with = "json::inf_as_null")]
    pub tau: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmrReport {
    pub suspect_digest: String,
    pub key_digest: String,
    pub decode_config: DecodeConfig,
    /// Sorted by trigger id.
    pub entries: Vec<FmrEntry>,
    pub matched: usize,
    pub total: usize,
    pub fmr: f64,
}

impl FmrReport {
    pub fn to_json(&self) -> Result<String> {
        json::to_canonical(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mutation_id: String,
    pub mutation: MutationSpec,
    pub report: FmrReport,
}

/// Decode settings for one trigger. Sampling mode gets a per-query seed
/// derived from the trigger id so every query is reproducible on its own.
pub fn query_config(cfg: &DecodeConfig, trigger_id: &str) -> DecodeConfig {
    let mut out = *cfg;
    if cfg.mode == DecodeMode::Sample {
        let head = u64::from_str_radix(trigger_id.get(..16).unwrap_or(trigger_id), 16).unwrap_or(0);
        out.seed = cfg.seed ^ head;
    }
    out
}

/// z-score of `params` on one trigger, `None` for a degenerate response.
pub fn trigger_z<F: Real>(
    params: &ModelParams<F>,
    trigger: &TriggerArtifact<F>,
    mask: &GreenMask,
    gamma: f64,
    cfg: &DecodeConfig,
) -> Result<Option<f64>> {
    let out = decode(
        params,
        Some(&trigger.trigger_image),
        trigger.spec.prompt(),
        &query_config(cfg, &trigger.id()),
    )?;
    if scored_len(&out) < MIN_SCORED_TOKENS {
        return Ok(None);
    }
    Ok(Some(detect_with_mask(&out, mask, gamma)?.z_score))
}

fn check_key<F: Real>(triggers: &[TriggerArtifact<F>], key: &WatermarkKey) -> Result<()> {
    let digest = key.digest();
    match triggers.iter().find(|t| t.spec.key_digest() != digest) {
        Some(t) => Err(Error::Consistency(format!("trigger {} was built with a different key", t.id()))),
        None => Ok(()),
    }
}

/// Threshold per trigger from the unrelated models' z-scores; also stores
/// each threshold in its artifact.
pub fn calibrate_thresholds<F: Real>(
    triggers: &mut [TriggerArtifact<F>],
    unrelated: &[ModelParams<F>],
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    decode_cfg: &DecodeConfig,
) -> Result<ThresholdTable> {
    if triggers.is_empty() {
        return Err(Error::Parameter("calibration needs at least one trigger".into()));
    }
    if unrelated.is_empty() {
        return Err(Error::Parameter("calibration needs at least one unrelated model".into()));
    }
    wparams.validate()?;
    decode_cfg.validate()?;
    check_key(triggers, key)?;
    let mask = green_list(key, unrelated[0].config().vocab_size, wparams.gamma)?;

    let jobs: Vec<(usize, usize)> = (0..triggers.len())
        .flat_map(|t| (0..unrelated.len()).map(move |m| (t, m)))
        .collect();
    let zs: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(t, m)| trigger_z(&unrelated[m], &triggers[t], &mask, wparams.gamma, decode_cfg))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(triggers.len());
    for (t, trig) in triggers.iter_mut().enumerate() {
        let id = trig.id();
        let row = &zs[t * unrelated.len()..(t + 1) * unrelated.len()];
        let degenerate = row.iter().filter(|z| z.is_none()).count();
        if degenerate > 0 {
            log::warn!("trigger {id}: {degenerate} calibration response(s) degenerate, excluded from the threshold");
        }
        let finite = row.iter().flatten().copied();
        let tau = finite.fold(None, |m: Option<f64>, z| Some(m.map_or(z, |m| m.max(z))));
        let tau = tau.unwrap_or(f64::INFINITY);
        trig.threshold = Some(tau);
        entries.push(ThresholdEntry {
            trigger_id: id,
            tau,
            calibration_z: row.iter().map(|z| z.unwrap_or(f64::INFINITY)).collect(),
        });
    }
    entries.sort_by(|a, b| a.trigger_id.cmp(&b.trigger_id));
    if entries.windows(2).any(|w| w[0].trigger_id == w[1].trigger_id) {
        return Err(Error::Consistency("duplicate trigger ids in calibration set".into()));
    }
    Ok(ThresholdTable {
        key_digest: key.digest(),
        gamma: wparams.gamma,
        decode_config: *decode_cfg,
        calibration_models: unrelated.iter().map(model_digest).collect(),
        entries,
    })
}

/// Fingerprint matching rate of `suspect` over `triggers`.
pub fn fmr<F: Real>(
    suspect: &ModelParams<F>,
    triggers: &[TriggerArtifact<F>],
    table: &ThresholdTable,
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    decode_cfg: &DecodeConfig,
) -> Result<FmrReport> {
    if triggers.is_empty() {
        return Err(Error::Parameter("no triggers to verify".into()));
    }
    wparams.validate()?;
    decode_cfg.validate()?;
    check_key(triggers, key)?;
    if table.key_digest != key.digest() {
        return Err(Error::Consistency("threshold table was calibrated under a different key".into()));
    }
    let taus: Vec<(String, f64)> = triggers
        .iter()
        .map(|t| {
            let id = t.id();
            match table.tau(&id) {
                Some(tau) => Ok((id, tau)),
                None => Err(Error::Consistency(format!("no threshold for trigger {id}"))),
            }
        })
        .collect::<Result<_>>()?;
    let mask = green_list(key, suspect.config().vocab_size, wparams.gamma)?;
    let zs: Vec<Option<f64>> = triggers
        .par_iter()
        .map(|t| trigger_z(suspect, t, &mask, wparams.gamma, decode_cfg))
        .collect::<Result<_>>()?;

    let mut entries: Vec<FmrEntry> = taus
        .into_iter()
        .zip(zs)
        .map(|((trigger_id, tau), z)| FmrEntry {
            matched: z.is_some_and(|z| z > tau),
            trigger_id,
            z,
            tau,
        })
        .collect();
    entries.sort_by(|a, b| a.trigger_id.cmp(&b.trigger_id));
    Ok(summarize(model_digest(suspect), key.digest(), *decode_cfg, entries))
}

fn summarize(suspect_digest: String, key_digest: String, decode_config: DecodeConfig, entries: Vec<FmrEntry>) -> FmrReport {
    let matched = entries.iter().filter(|e| e.matched).count();
    let total = entries.len();
    FmrReport {
        suspect_digest,
        key_digest,
        decode_config,
        fmr: matched as f64 / total as f64,
        matched,
        total,
        entries,
    }
}

/// One FMR report per mutation of `base`, preceded by the unmodified
/// baseline row.
pub fn robustness_sweep<F: Real>(
    base: &ModelParams<F>,
    triggers: &[TriggerArtifact<F>],
    table: &ThresholdTable,
    mutations: &[MutationSpec],
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    decode_cfg: &DecodeConfig,
) -> Result<Vec<SweepRow>> {
    if mutations.is_empty() {
        return Err(Error::Parameter("robustness sweep needs at least one mutation".into()));
    }
    for m in mutations {
        m.validate()?;
    }
    std::iter::once(&MutationSpec::Identity)
        .chain(mutations)
        .map(|m| {
            let suspect = m.apply(base)?;
            log::info!("sweep: {}", m.id());
            Ok(SweepRow {
                mutation_id: m.id(),
                mutation: *m,
                report: fmr(&suspect, triggers, table, key, wparams, decode_cfg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, z: Option<f64>, tau: f64) -> FmrEntry {
        FmrEntry {
            trigger_id: id.into(),
            matched: z.is_some_and(|z| z > tau),
            z,
            tau,
        }
    }

    #[test]
    fn summary_counts() {
        let entries: Vec<FmrEntry> = (0..10)
            .map(|i| entry(&format!("{i:02}"), Some(i as f64), 4.5))
            .collect();
        let r = summarize("s".into(), "k".into(), DecodeConfig::default(), entries);
        assert_eq!((r.matched, r.total), (5, 10));
        assert_eq!(r.fmr, 0.5);
    }

    #[test]
    fn strict_inequality_and_degenerate() {
        assert!(!entry("a", Some(2.0), 2.0).matched);
        assert!(entry("a", Some(2.0 + 1e-12), 2.0).matched);
        assert!(!entry("a", None, 0.0).matched);
        assert!(!entry("a", Some(1e9), f64::INFINITY).matched);
    }

    #[test]
    fn infinite_tau_round_trips_as_null() {
        let t = ThresholdTable {
            key_digest: "k".into(),
            gamma: 0.5,
            decode_config: DecodeConfig::default(),
            calibration_models: vec!["m".into()],
            entries: vec![ThresholdEntry {
                trigger_id: "a".into(),
                tau: f64::INFINITY,
                calibration_z: vec![f64::INFINITY],
            }],
        };
        let text = t.to_json().unwrap();
        assert!(text.contains("\"tau\": null"));
        assert!(text.ends_with('\n'));
        assert_eq!(ThresholdTable::from_json(&text).unwrap(), t);
    }

    #[test]
    fn sampling_seed_differs_per_trigger() {
        let cfg = DecodeConfig::sample(1.0, 1.0, 7, 10);
        assert_ne!(query_config(&cfg, "00000000000000aa").seed, query_config(&cfg, "00000000000000bb").seed);
        let g = DecodeConfig::greedy(10);
        assert_eq!(query_config(&g, "00000000000000aa"), g);
    }
}
