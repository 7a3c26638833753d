//! Keyed unigram green-list watermarking.
//!
//! A secret key splits the vocabulary into a green and a red part once per
//! vocabulary size; decoding adds a fixed bias to green logits and detection
//! counts green tokens against a Bernoulli(`gamma`) null.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tokenizer::{TokenId, TokenSeq, EOS};
use crate::vlm::{decode_with, DecodeConfig, ImageTensor, ModelParams};

pub const SCHEME_UNIGRAM: u8 = 1;

/// Secret watermark key. The secret never leaves this type except through
/// the key file; artifacts only carry [`WatermarkKey::digest`].
#[derive(Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    secret: [u8; 32],
    scheme_id: u8,
}

impl fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WatermarkKey")
            .field("scheme_id", &self.scheme_id)
            .field("digest", &self.digest())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    scheme_id: u8,
    secret_hex: String,
}

impl WatermarkKey {
    pub fn new(secret: [u8; 32], scheme_id: u8) -> Result<Self> {
        if scheme_id != SCHEME_UNIGRAM {
            return Err(Error::Parameter(format!(
                "unknown watermark scheme id {scheme_id}"
            )));
        }
        Ok(Self { secret, scheme_id })
    }

    /// Key drawn from the labeled stream of `seed`.
    pub fn from_seed(seed: u64) -> Self {
        use rand::RngCore;
        let mut secret = [0u8; 32];
        crate::rng::stream(seed, "watermark-key", 0).fill_bytes(&mut secret);
        Self {
            secret,
            scheme_id: SCHEME_UNIGRAM,
        }
    }

    pub fn scheme_id(&self) -> u8 {
        self.scheme_id
    }

    /// Lowercase hex SHA-256 of the secret.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.secret))
    }

    /// Keyed PRF of a token id, mapped to `[0, 1)` from the top 53 bits.
    pub fn prf_unit(&self, token: TokenId) -> f64 {
        let mut h = Sha256::new();
        h.update(self.secret);
        h.update(u64::from(token).to_be_bytes());
        let d = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&d[..8]);
        (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn to_json(&self) -> String {
        let file = KeyFile {
            scheme_id: self.scheme_id,
            secret_hex: hex::encode(self.secret),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("key serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KeyFile = serde_json::from_str(text)?;
        let bytes = hex::decode(&file.secret_hex)
            .map_err(|e| Error::Format(format!("secret_hex: {e}")))?;
        let secret: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("secret_hex must encode 32 bytes".into()))?;
        Self::new(secret, file.scheme_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkParams {
    pub gamma: f64,
    pub delta: f64,
}

impl Default for WatermarkParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            delta: 4.0,
        }
    }
}

impl WatermarkParams {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        let p = Self { gamma, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Parameter(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Parameter(format!(
                "delta must be nonnegative, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenMask {
    membership: Vec<bool>,
}

impl GreenMask {
    pub fn from_membership(membership: Vec<bool>) -> Self {
        Self { membership }
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    #[inline]
    pub fn is_green(&self, token: TokenId) -> bool {
        self.membership
            .get(token as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.membership.iter().filter(|&&g| g).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.membership
    }
}

pub fn green_list(key: &WatermarkKey, vocab_size: usize, gamma: f64) -> Result<GreenMask> {
    if vocab_size < 2 {
        return Err(Error::Parameter(format!(
            "vocab_size must be at least 2, got {vocab_size}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let membership = (0..vocab_size as TokenId)
        .map(|v| key.prf_unit(v) < gamma)
        .collect();
    Ok(GreenMask { membership })
}

pub fn bias_logits<F: Real>(logits: &[F], mask: &GreenMask, delta: F) -> Result<Vec<F>> {
    let mut out = logits.to_vec();
    bias_logits_in_place(&mut out, mask, delta)?;
    Ok(out)
}

pub fn bias_logits_in_place<F: Real>(logits: &mut [F], mask: &GreenMask, delta: F) -> Result<()> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "logits have length {} but mask covers {} tokens",
            logits.len(),
            mask.len()
        )));
    }
    for (l, &g) in logits.iter_mut().zip(&mask.membership) {
        if g {
            *l += delta;
        }
    }
    Ok(())
}

/// Greedy (or sampled, per `cfg`) decoding with green logits shifted by
/// `wparams.delta` before every selection.
pub fn watermarked_decode<F: Real>(
    params: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    max_len: usize,
    cfg: &DecodeConfig,
) -> Result<TokenSeq> {
    wparams.validate()?;
    let mask = green_list(key, params.config().vocab_size, wparams.gamma)?;
    let delta = F::lit(wparams.delta);
    let cfg = DecodeConfig { max_len, ..*cfg };
    decode_with(params, Some(image), prompt, &cfg, |logits: &mut [F]| {
        for (l, &g) in logits.iter_mut().zip(mask.as_slice()) {
            if g {
                *l += delta;
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub token_count: usize,
    pub green_count: usize,
    pub z_score: f64,
}

/// Number of leading tokens scored by detection: everything before the first
/// end-of-sequence token.
pub fn scored_len(tokens: &[TokenId]) -> usize {
    tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len())
}

pub fn detect(
    tokens: &[TokenId],
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    vocab_size: usize,
) -> Result<DetectionResult> {
    let mask = green_list(key, vocab_size, wparams.gamma)?;
    detect_with_mask(tokens, &mask, wparams.gamma)
}

pub fn detect_with_mask(tokens: &[TokenId], mask: &GreenMask, gamma: f64) -> Result<DetectionResult> {
    let scored = &tokens[..scored_len(tokens)];
    if scored.is_empty() {
        return Err(Error::DegenerateInput(
            "z-score is undefined for an empty token sequence".into(),
        ));
    }
    let green = scored.iter().filter(|&&t| mask.is_green(t)).count();
    Ok(score(scored.len(), green, gamma))
}

/// `(green - gamma*T) / sqrt(T*gamma*(1-gamma))`
pub fn score(token_count: usize, green_count: usize, gamma: f64) -> DetectionResult {
    let t = token_count as f64;
    let z_score = (green_count as f64 - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt();
    DetectionResult {
        token_count,
        green_count,
        z_score,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> WatermarkKey {
        WatermarkKey::new([b; 32], SCHEME_UNIGRAM).unwrap()
    }

    #[test]
    fn popcount_in_band() {
        let m = green_list(&key(3), 512, 0.5).unwrap();
        assert!((226..=286).contains(&m.count()), "count {}", m.count());
    }

    #[test]
    fn mask_is_deterministic() {
        let a = green_list(&key(9), 512, 0.5).unwrap();
        let b = green_list(&key(9), 512, 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, green_list(&key(10), 512, 0.5).unwrap());
    }

    #[test]
    fn mean_green_fraction_over_keys() {
        let mut total = 0.0;
        for i in 0..1000u64 {
            let m = green_list(&WatermarkKey::from_seed(i), 512, 0.5).unwrap();
            total += m.count() as f64 / 512.0;
        }
        let mean = total / 1000.0;
        assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn invalid_gamma_rejected() {
        assert!(matches!(green_list(&key(1), 512, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(green_list(&key(1), 512, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(green_list(&key(1), 1, 0.5), Err(Error::Parameter(_))));
        assert!(WatermarkParams::new(0.5, -1.0).is_err());
    }

    #[test]
    fn bias_identity_and_shift() {
        let logits = vec![0.3f64, -1.0, 2.5, 0.0];
        let mask = GreenMask::from_membership(vec![true, false, true, false]);
        assert_eq!(bias_logits(&logits, &mask, 0.0).unwrap(), logits);
        let all = GreenMask::from_membership(vec![true; 4]);
        let out = bias_logits(&logits, &all, 4.0).unwrap();
        for (o, l) in out.iter().zip(&logits) {
            assert_eq!(*o, l + 4.0);
        }
        let half = bias_logits(&logits, &mask, 4.0).unwrap();
        assert_eq!(half[1], -1.0);
        assert_eq!(half[3], 0.0);
    }

    #[test]
    fn bias_length_mismatch() {
        let mask = GreenMask::from_membership(vec![true; 3]);
        assert!(matches!(
            bias_logits(&[0.0f64; 4], &mask, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn biased_softmax_matches_direct_formula() {
        let v = 64;
        let mask = green_list(&key(5), v, 0.5).unwrap();
        let logits: Vec<f64> = (0..v).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let delta = 4.0;
        let q = crate::scalar::softmax(&bias_logits(&logits, &mask, delta).unwrap());
        // q(v) = exp(z(v) + delta*1{green}) / sum_u exp(z(u) + delta*1{green})
        let w: Vec<f64> = (0..v)
            .map(|i| (logits[i] + if mask.is_green(i as u32) { delta } else { 0.0 }).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for i in 0..v {
            assert!((q[i] - w[i] / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn z_score_examples() {
        let r = score(100, 70, 0.5);
        assert!((r.z_score - 4.0).abs() < 1e-12);
        assert_eq!(score(100, 50, 0.5).z_score, 0.0);
    }

    #[test]
    fn detect_counts_and_rejects_empty() {
        let mask = GreenMask::from_membership(vec![false, false, true, false]);
        let r = detect_with_mask(&[2, 2, 3, 2], &mask, 0.5).unwrap();
        assert_eq!((r.token_count, r.green_count), (4, 3));
        let expected = (3.0 - 2.0) / (4.0f64 * 0.25).sqrt();
        assert_eq!(r.z_score, expected);
        // terminator and anything after it is not scored
        let r = detect_with_mask(&[2, 3, EOS, 2, 2], &mask, 0.5).unwrap();
        assert_eq!(r.token_count, 2);
        assert!(matches!(
            detect_with_mask(&[], &mask, 0.5),
            Err(Error::DegenerateInput(_))
        ));
        assert!(detect_with_mask(&[EOS, 2], &mask, 0.5).is_err());
    }

    #[test]
    fn key_file_round_trip_and_digest() {
        let k = WatermarkKey::from_seed(11);
        let back = WatermarkKey::from_json(&k.to_json()).unwrap();
        assert_eq!(k, back);
        let d = k.digest();
        assert_eq!(d.len(), 64);
        assert_ne!(d, hex::encode(k.secret));
        assert!(!format!("{k:?}").contains(&hex::encode(k.secret)));
        let bad = r#"{"scheme_id": 2, "secret_hex": "00"}"#;
        assert!(WatermarkKey::from_json(bad).is_err());
    }
}
