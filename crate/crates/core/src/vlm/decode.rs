use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{RowInput, State};
use super::image::ImageTensor;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tokenizer::{TokenId, TokenSeq, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            seed: 0,
            max_len: 80,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            ..Self::default()
        }
    }

    pub fn sample(temperature: f64, top_p: f64, seed: u64, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Sample,
            temperature,
            top_p,
            seed,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Parameter("max_len must be at least 1".into()));
        }
        if self.mode == DecodeMode::Sample {
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return Err(Error::Parameter(format!(
                    "sampling temperature must be positive, got {}",
                    self.temperature
                )));
            }
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(Error::Parameter(format!(
                    "top_p must lie in (0, 1], got {}",
                    self.top_p
                )));
            }
        }
        Ok(())
    }
}

/// Highest logit, ties broken toward the lowest id.
pub(crate) fn argmax<F: Real>(logits: &[F]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_token<F: Real>(logits: &[F], cfg: &DecodeConfig, rng: &mut rng::StreamRng) -> TokenId {
    let t = cfg.temperature;
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / t).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<(usize, f64)> = scaled.iter().map(|&v| (v - mx).exp()).enumerate().collect();
    let total: f64 = order.iter().map(|p| p.1).sum();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &(_, w) in &order {
        kept += 1;
        mass += w / total;
        if mass >= cfg.top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let z: f64 = nucleus.iter().map(|p| p.1).sum();
    let u: f64 = rng.gen::<f64>() * z;
    let mut acc = 0.0;
    for &(id, w) in nucleus {
        acc += w;
        if u < acc {
            return id as TokenId;
        }
    }
    nucleus[kept - 1].0 as TokenId
}

/// Plain autoregressive decoding.
pub fn decode<F: Real>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<TokenSeq> {
    decode_with(params, image, prompt, cfg, |_: &mut [F]| {})
}

/// Autoregressive decoding where `process` may rewrite each step's logits
/// before selection. Stops at the end token (not included) or `max_len`.
pub fn decode_with<F: Real>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    mut process: impl FnMut(&mut [F]),
) -> Result<TokenSeq> {
    cfg.validate()?;
    let mc = params.config();
    let n_patches = if image.is_some() { mc.num_patches() } else { 0 };
    if n_patches + prompt.len() == 0 {
        return Err(Error::DegenerateInput(
            "decoding needs an image or a nonempty prompt".into(),
        ));
    }
    // the last step consumes every generated token but one
    let needed = n_patches + prompt.len() + cfg.max_len - 1;
    if needed > mc.max_seq_len {
        return Err(Error::Capacity {
            len: needed,
            max: mc.max_seq_len,
        });
    }
    let patches = match image {
        Some(img) => super::forward::extract_patches(params, img)?,
        None => Vec::new(),
    };
    let mut state = State::new(params, patches);
    for n in 0..n_patches {
        state.push(params, RowInput::Patch(n), None)?;
    }
    for &t in prompt {
        state.push(params, RowInput::Token(t), None)?;
    }
    let mut rng = rng::stream(cfg.seed, "decode", 0);
    let mut logits = vec![F::zero(); mc.vocab_size];
    let mut out = Vec::with_capacity(cfg.max_len);
    loop {
        let last = state.len() - 1;
        state.logits_row(params, last, &mut logits);
        process(&mut logits);
        let next = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => sample_token(&logits, cfg, &mut rng),
        };
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == cfg.max_len {
            break;
        }
        state.push(params, RowInput::Token(next), None)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0f64, 5.0]), 0);
    }

    #[test]
    fn rejects_bad_sampling_parameters() {
        assert!(DecodeConfig::sample(0.0, 1.0, 0, 4).validate().is_err());
        assert!(DecodeConfig::sample(1.0, 0.0, 0, 4).validate().is_err());
        assert!(DecodeConfig::greedy(0).validate().is_err());
        assert!(DecodeConfig::sample(0.7, 0.9, 0, 4).validate().is_ok());
    }
}
