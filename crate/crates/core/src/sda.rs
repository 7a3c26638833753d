//! Semantic divergence gateway.
//!
//! A provider serving a possibly stolen model routes every query through a
//! reference model: prompts the reference finds implausible are answered by
//! the reference, and so are queries where the two models' answers diverge.
//! Fingerprints that rely on odd prompts or off-topic canned answers get
//! neutralized; fingerprints whose answers stay on topic pass through.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::synth::STOPWORDS;
use crate::tokenizer::{TokenId, TokenSeq, BYTE_OFFSET};
use crate::vlm::{decode, forward, perplexity, DecodeConfig, ImageTensor, ModelParams};
use crate::wmark::scored_len;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaConfig {
    pub ppl_threshold: f64,
    pub jaccard_threshold: f64,
    /// Semantic check, off when `None`.
    #[serde(default)]
    pub sem_threshold: Option<f64>,
    #[serde(default = "default_stopwords")]
    pub stopword_ids: BTreeSet<TokenId>,
}

fn default_stopwords() -> BTreeSet<TokenId> {
    STOPWORDS.iter().copied().collect()
}

impl Default for SdaConfig {
    fn default() -> Self {
        Self {
            ppl_threshold: 1000.0,
            jaccard_threshold: 0.1,
            sem_threshold: None,
            stopword_ids: default_stopwords(),
        }
    }
}

impl SdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppl_threshold > 0.0) {
            return Err(Error::Parameter(format!("ppl_threshold must be positive, got {}", self.ppl_threshold)));
        }
        if !(0.0..=1.0).contains(&self.jaccard_threshold) {
            return Err(Error::Parameter(format!(
                "jaccard_threshold must lie in [0, 1], got {}",
                self.jaccard_threshold
            )));
        }
        if let Some(s) = self.sem_threshold {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Parameter(format!("sem_threshold must lie in [0, 1], got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    PplGate,
    LexicalDivergence,
    SemanticDivergence,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaDecision {
    pub flagged: bool,
    pub reason: FlagReason,
    pub served_response: TokenSeq,
    pub stolen_response: TokenSeq,
    pub reference_response: TokenSeq,
    pub query_ppl: f64,
    pub jaccard: f64,
    /// Only computed when the semantic check is enabled.
    pub sem_sim: Option<f64>,
}

fn content_set(seq: &[TokenId], stopwords: &BTreeSet<TokenId>) -> BTreeSet<TokenId> {
    seq[..scored_len(seq)]
        .iter()
        .copied()
        .filter(|t| !stopwords.contains(t))
        .collect()
}

/// Jaccard index of the non-stopword token sets (up to the first end token);
/// 1 when both sets are empty.
pub fn jaccard_nonstop(a: &[TokenId], b: &[TokenId], stopwords: &BTreeSet<TokenId>) -> f64 {
    let sa = content_set(a, stopwords);
    let sb = content_set(b, stopwords);
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Mean token embedding, accumulated in vocabulary order so the result does
/// not depend on token order.
fn mean_embedding<F: Real>(seq: &[TokenId], params: &ModelParams<F>) -> Result<Vec<f64>> {
    let cfg = params.config();
    let d = cfg.embed_dim;
    let mut counts = std::collections::BTreeMap::new();
    for &t in seq {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Parameter(format!("token {t} outside vocabulary")));
        }
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let mut acc = vec![0.0; d];
    for (&t, &c) in &counts {
        let row = &params.tok_emb[t as usize * d..(t as usize + 1) * d];
        for (a, v) in acc.iter_mut().zip(row) {
            *a += c as f64 * v.as_f64();
        }
    }
    let n = seq.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Cosine similarity of mean-pooled reference token embeddings.
pub fn semantic_sim<F: Real>(a: &[TokenId], b: &[TokenId], reference: &ModelParams<F>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateInput("semantic similarity of an empty sequence".into()));
    }
    let ea = mean_embedding(a, reference)?;
    let eb = mean_embedding(b, reference)?;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let denom = (dot(&ea, &ea) * dot(&eb, &eb)).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateInput("zero mean embedding".into()));
    }
    Ok((dot(&ea, &eb) / denom).clamp(-1.0, 1.0))
}

/// Anything that answers (image, prompt) queries.
pub trait Responder<F: Real>: Sync {
    fn respond(&self, image: &ImageTensor<F>, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<TokenSeq>;
}

impl<F: Real> Responder<F> for ModelParams<F> {
    fn respond(&self, image: &ImageTensor<F>, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<TokenSeq> {
        decode(self, Some(image), prompt, cfg)
    }
}

/// Stand-in for a backdoor-style fingerprint: the wrapped model answers
/// normally except on designated images, where it emits a fixed phrase.
#[derive(Debug, Clone)]
pub struct FixedPhrase<'a, F> {
    inner: &'a ModelParams<F>,
    trigger_digests: BTreeSet<String>,
    phrase: TokenSeq,
}

impl<'a, F: Real> FixedPhrase<'a, F> {
    pub fn new(inner: &'a ModelParams<F>, triggers: &[ImageTensor<F>], phrase: TokenSeq) -> Self {
        Self {
            inner,
            trigger_digests: triggers.iter().map(ImageTensor::digest).collect(),
            phrase,
        }
    }
}

impl<F: Real> Responder<F> for FixedPhrase<'_, F> {
    fn respond(&self, image: &ImageTensor<F>, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<TokenSeq> {
        if self.trigger_digests.contains(&image.digest()) {
            Ok(self.phrase.clone())
        } else {
            self.inner.respond(image, prompt, cfg)
        }
    }
}

/// Serves one query through the gateway.
pub fn sda_serve<F: Real, S: Responder<F> + ?Sized>(
    stolen: &S,
    reference: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    cfg: &SdaConfig,
    decode_cfg: &DecodeConfig,
) -> Result<SdaDecision> {
    cfg.validate()?;
    let query_ppl = perplexity(reference, prompt)?.as_f64();
    let (stolen_response, reference_response) = rayon::join(
        || stolen.respond(image, prompt, decode_cfg),
        || reference.respond(image, prompt, decode_cfg),
    );
    let (stolen_response, reference_response) = (stolen_response?, reference_response?);
    let jaccard = jaccard_nonstop(&stolen_response, &reference_response, &cfg.stopword_ids);
    let sem_sim = match cfg.sem_threshold {
        Some(_) => {
            let a = &stolen_response[..scored_len(&stolen_response)];
            let b = &reference_response[..scored_len(&reference_response)];
            match (a.is_empty(), b.is_empty()) {
                (true, true) => Some(1.0),
                (true, false) | (false, true) => Some(-1.0),
                (false, false) => Some(semantic_sim(a, b, reference)?),
            }
        }
        None => None,
    };

    let reason = if query_ppl > cfg.ppl_threshold {
        FlagReason::PplGate
    } else if jaccard < cfg.jaccard_threshold {
        FlagReason::LexicalDivergence
    } else if matches!((cfg.sem_threshold, sem_sim), (Some(t), Some(s)) if s < t) {
        FlagReason::SemanticDivergence
    } else {
        FlagReason::None
    };
    let flagged = reason != FlagReason::None;
    Ok(SdaDecision {
        flagged,
        reason,
        served_response: if flagged {
            reference_response.clone()
        } else {
            stolen_response.clone()
        },
        stolen_response,
        reference_response,
        query_ppl,
        jaccard,
        sem_sim,
    })
}

/// Fraction of `queries` the gateway flags.
pub fn false_positive_rate<F: Real, S: Responder<F> + ?Sized>(
    stolen: &S,
    reference: &ModelParams<F>,
    queries: &[(ImageTensor<F>, TokenSeq)],
    cfg: &SdaConfig,
    decode_cfg: &DecodeConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Parameter("no queries to score".into()));
    }
    let mut flagged = 0usize;
    for (image, prompt) in queries {
        if sda_serve(stolen, reference, image, prompt, cfg, decode_cfg)?.flagged {
            flagged += 1;
        }
    }
    Ok(flagged as f64 / queries.len() as f64)
}

/// Byte-token prompt built to be implausible under `params`: after a random
/// first byte, each next byte is the one the model considers least likely.
pub fn high_perplexity_prompt<F: Real>(params: &ModelParams<F>, len: usize, seed: u64) -> Result<TokenSeq> {
    if len < 2 {
        return Err(Error::Parameter("prompt length must be at least 2".into()));
    }
    let mut r = rng::stream(seed, "gibberish", 0);
    let mut out = vec![BYTE_OFFSET + r.gen_range(0..256)];
    while out.len() < len {
        let trace = forward(params, None, &out, None)?;
        let row = trace.row(trace.rows() - 1);
        let bytes = &row[BYTE_OFFSET as usize..BYTE_OFFSET as usize + 256];
        let (i, _) = bytes
            .iter()
            .enumerate()
            .fold((0, bytes[0]), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        out.push(BYTE_OFFSET + i as TokenId);
    }
    Ok(out)
}
