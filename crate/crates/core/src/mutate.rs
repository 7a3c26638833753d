//! Post-release model modifications and input corruptions.
//!
//! Every operation is pure: it returns a fresh parameter set or image and
//! never touches its input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::safd::loss_ce;
use crate::scalar::Real;
use crate::synth;
use crate::tokenizer::TokenId;
use crate::vlm::{grad_params, ImageTensor, ModelParams, Objective, TensorRole};

/// Which weight matrices a mutation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Attn,
    Mlp,
    Both,
}

impl Scope {
    pub fn covers(self, role: TensorRole) -> bool {
        matches!(
            (self, role),
            (Scope::Attn, TensorRole::Attn)
                | (Scope::Mlp, TensorRole::Mlp)
                | (Scope::Both, TensorRole::Attn)
                | (Scope::Both, TensorRole::Mlp)
        )
    }
}

/// Seeded procedural image/caption corpus for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub dataset_seed: u64,
    pub samples: usize,
    pub procedure: u32,
}

impl SyntheticTask {
    pub const CAPTIONS_V1: u32 = 1;

    pub fn new(dataset_seed: u64, samples: usize) -> Self {
        Self {
            dataset_seed,
            samples,
            procedure: Self::CAPTIONS_V1,
        }
    }

    pub fn sample<F: Real>(&self, index: usize, channels: usize, size: usize) -> Result<synth::Sample<F>> {
        if self.procedure != Self::CAPTIONS_V1 {
            return Err(Error::Parameter(format!("unknown task procedure {}", self.procedure)));
        }
        if self.samples == 0 {
            return Err(Error::Parameter("task has no samples".into()));
        }
        let i = (index % self.samples) as u64;
        Ok(synth::sample(self.dataset_seed, "finetune", i, channels, size))
    }
}

pub const DEFAULT_FINETUNE_LR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MutationSpec {
    Identity,
    Quantize {
        bits: u32,
    },
    Finetune {
        steps: usize,
        lr: f64,
        dataset_seed: u64,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Prune {
        fraction: f64,
        scope: Scope,
    },
    WeightNoise {
        sigma: f64,
        scope: Scope,
        #[serde(default)]
        seed: u64,
    },
}

fn default_samples() -> usize {
    64
}

impl MutationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MutationSpec::Identity => Ok(()),
            MutationSpec::Quantize { bits } => check_bits(bits),
            MutationSpec::Finetune { lr, samples, .. } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::Parameter(format!("learning rate must be nonnegative, got {lr}")));
                }
                if samples == 0 {
                    return Err(Error::Parameter("fine-tune task needs at least one sample".into()));
                }
                Ok(())
            }
            MutationSpec::Prune { fraction, .. } => check_fraction(fraction),
            MutationSpec::WeightNoise { sigma, .. } => check_sigma(sigma),
        }
    }

    /// Short stable label used in reports, e.g. `quantize-8`.
    pub fn id(&self) -> String {
        let scope = |s: Scope| match s {
            Scope::Attn => "attn",
            Scope::Mlp => "mlp",
            Scope::Both => "both",
        };
        match *self {
            MutationSpec::Identity => "identity".into(),
            MutationSpec::Quantize { bits } => format!("quantize-{bits}"),
            MutationSpec::Finetune {
                steps,
                lr,
                dataset_seed,
                samples,
            } => format!("finetune-{steps}-{lr}-{dataset_seed}-{samples}"),
            MutationSpec::Prune { fraction, scope: s } => format!("prune-{fraction}-{}", scope(s)),
            MutationSpec::WeightNoise { sigma, scope: s, seed } => format!("noise-{sigma}-{}-{seed}", scope(s)),
        }
    }

    pub fn apply<F: Real>(&self, params: &ModelParams<F>) -> Result<ModelParams<F>> {
        self.validate()?;
        match *self {
            MutationSpec::Identity => Ok(params.clone()),
            MutationSpec::Quantize { bits } => quantize(params, bits),
            MutationSpec::Finetune {
                steps,
                lr,
                dataset_seed,
                samples,
            } => finetune(params, &SyntheticTask::new(dataset_seed, samples), steps, lr).map(|r| r.params),
            MutationSpec::Prune { fraction, scope } => prune(params, fraction, scope),
            MutationSpec::WeightNoise { sigma, scope, seed } => perturb_weights(params, sigma, scope, seed),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mutation specs serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("quantization supports 4 or 8 bits, got {bits}")))
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("prune fraction must lie in [0, 1], got {fraction}")))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("sigma must be nonnegative, got {sigma}")))
    }
}

/// True for the tensors weight-only quantization applies to: attention and
/// MLP matrices and the patch projection. Embedding tables, the output head
/// and vectors stay in full precision.
pub fn is_quantized(name: &str, role: TensorRole) -> bool {
    matches!(role, TensorRole::Attn | TensorRole::Mlp) || name == "patch_proj.weight"
}

/// Symmetric per-tensor uniform quantization of one tensor, in place.
pub fn quantize_tensor<F: Real>(values: &mut [F], bits: u32) -> Result<()> {
    check_bits(bits)?;
    let max = values.iter().fold(F::zero(), |m, v| m.max(v.abs()));
    if max == F::zero() {
        return Ok(());
    }
    let levels = F::from_usize_lossy((1usize << (bits - 1)) - 1);
    let scale = max / levels;
    for v in values.iter_mut() {
        *v = (*v / scale).round() * scale;
    }
    Ok(())
}

/// Simulated weight-only quantization: weights are rounded to the grid and
/// stored back as reals.
pub fn quantize<F: Real>(params: &ModelParams<F>, bits: u32) -> Result<ModelParams<F>> {
    check_bits(bits)?;
    let mut out = params.clone();
    let manifest = params.manifest();
    for (spec, t) in manifest.iter().zip(out.tensors_mut()) {
        if is_quantized(&spec.name, spec.role) {
            quantize_tensor(t, bits)?;
        }
    }
    Ok(out)
}

/// Zeroes the `floor(fraction * n)` smallest-magnitude entries of every
/// scoped tensor, breaking ties by index.
pub fn prune<F: Real>(params: &ModelParams<F>, fraction: f64, scope: Scope) -> Result<ModelParams<F>> {
    check_fraction(fraction)?;
    let mut out = params.clone();
    let manifest = params.manifest();
    for (spec, t) in manifest.iter().zip(out.tensors_mut()) {
        if !scope.covers(spec.role) {
            continue;
        }
        let n = t.len();
        let k = ((fraction * n as f64).floor() as usize).min(n);
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            t[a].abs()
                .partial_cmp(&t[b].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in &order[..k] {
            t[i] = F::zero();
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every scoped tensor.
pub fn perturb_weights<F: Real>(params: &ModelParams<F>, sigma: f64, scope: Scope, seed: u64) -> Result<ModelParams<F>> {
    check_sigma(sigma)?;
    let mut out = params.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let manifest = params.manifest();
    for (i, (spec, t)) in manifest.iter().zip(out.tensors_mut()).enumerate() {
        if !scope.covers(spec.role) {
            continue;
        }
        let mut r = rng::stream(seed, "weight-noise", i as u64);
        for v in t.iter_mut() {
            *v += F::lit(normal.sample(&mut r));
        }
    }
    Ok(out)
}

/// Mean teacher-forced caption loss, used as the fine-tuning objective.
struct CaptionLoss;

impl<F: Real> Objective<F> for CaptionLoss {
    fn loss_and_grad(&self, logits: &[F], vocab: usize, targets: &[TokenId]) -> Result<(F, Vec<F>)> {
        let loss = loss_ce(logits, vocab, targets)?;
        let inv_t = F::one() / F::from_usize_lossy(targets.len());
        let mut grad = Vec::with_capacity(logits.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let p = crate::scalar::softmax(row);
            grad.extend(p.into_iter().map(|v| v * inv_t));
            grad[r * vocab + t as usize] -= inv_t;
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult<F> {
    pub params: ModelParams<F>,
    /// Training loss at every step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Plain SGD next-token training on procedurally generated captions.
pub fn finetune<F: Real>(params: &ModelParams<F>, task: &SyntheticTask, steps: usize, lr: f64) -> Result<FinetuneResult<F>> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!("learning rate must be nonnegative, got {lr}")));
    }
    let cfg = *params.config();
    let mut cur = params.clone();
    let mut losses = Vec::with_capacity(steps);
    let rate = F::lit(lr);
    for step in 0..steps {
        let s = task.sample::<F>(step, cfg.channels, cfg.image_size)?;
        let (loss, g) = grad_params(&cur, Some(&s.image), &s.prompt, &s.caption, &CaptionLoss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss.as_f64(),
            });
        }
        losses.push(loss.as_f64());
        if lr > 0.0 {
            for (w, gw) in cur.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, &b) in w.iter_mut().zip(gw) {
                    *a -= rate * b;
                }
            }
        }
    }
    Ok(FinetuneResult { params: cur, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageNoise {
    Uniform,
    Gaussian,
}

/// Adds `U(-m, m)` or `N(0, m^2)` noise per pixel, then clamps to `[0, 1]`.
pub fn perturb_image<F: Real>(image: &ImageTensor<F>, kind: ImageNoise, magnitude: f64, seed: u64) -> Result<ImageTensor<F>> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::Parameter(format!("noise magnitude must be nonnegative, got {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(image.clone());
    }
    let mut r = rng::stream(seed, "image-noise", 0);
    let normal = Normal::new(0.0, magnitude).expect("valid magnitude");
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let n = match kind {
                ImageNoise::Uniform => r.gen_range(-magnitude..=magnitude),
                ImageNoise::Gaussian => normal.sample(&mut r),
            };
            (v + F::lit(n)).max(F::zero()).min(F::one())
        })
        .collect();
    let [c, h, w] = image.shape();
    ImageTensor::new(c, h, w, data)
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_image<F: Real>(image: &ImageTensor<F>, out_h: usize, out_w: usize) -> Result<ImageTensor<F>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter("output dimensions must be at least 1".into()));
    }
    let [c, h, w] = image.shape();
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, F)> {
        (0..n_out)
            .map(|i| {
                if n_out == 1 || n_in == 1 {
                    return (0, 0, F::zero());
                }
                let src = F::from_usize_lossy(i * (n_in - 1)) / F::from_usize_lossy(n_out - 1);
                let lo = src.floor().to_usize().unwrap_or(0).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - F::from_usize_lossy(lo))
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = image.at(ch, y0, x0) * (F::one() - fx) + image.at(ch, y0, x1) * fx;
                let bottom = image.at(ch, y1, x0) * (F::one() - fx) + image.at(ch, y1, x1) * fx;
                let v = top * (F::one() - fy) + bottom * fy;
                data.push(v.max(F::zero()).min(F::one()));
            }
        }
    }
    ImageTensor::new(c, out_h, out_w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{init_model, ModelConfig};

    fn small() -> ModelParams<f64> {
        init_model(3, ModelConfig::default()).unwrap()
    }

    #[test]
    fn quantize_keeps_exact_levels() {
        let mut t = vec![-1.0f64, 0.0, 1.0];
        quantize_tensor(&mut t, 4).unwrap();
        assert_eq!(t, vec![-1.0, 0.0, 1.0]);
        let mut z = vec![0.0f64; 4];
        quantize_tensor(&mut z, 8).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(quantize_tensor(&mut z, 3).is_err());
    }

    #[test]
    fn quantize_scope_and_idempotence() {
        let p = small();
        let q = quantize(&p, 4).unwrap();
        assert_eq!(quantize(&q, 4).unwrap(), q);
        for ((spec, a), b) in p.manifest().iter().zip(p.tensors()).zip(q.tensors()) {
            if !is_quantized(&spec.name, spec.role) {
                assert_eq!(a, b, "{}", spec.name);
            }
        }
    }

    #[test]
    fn prune_counts_and_ties() {
        let p = small();
        let pruned = prune(&p, 0.2, Scope::Both).unwrap();
        for ((spec, a), b) in p.manifest().iter().zip(p.tensors()).zip(pruned.tensors()) {
            let before = a.iter().filter(|v| **v == 0.0).count();
            let after = b.iter().filter(|v| **v == 0.0).count();
            if Scope::Both.covers(spec.role) {
                assert_eq!(after - before, (0.2 * a.len() as f64).floor() as usize, "{}", spec.name);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(prune(&p, 0.0, Scope::Both).unwrap(), p);
    }

    #[test]
    fn noise_respects_scope() {
        let p = small();
        let n = perturb_weights(&p, 0.01, Scope::Attn, 1).unwrap();
        for ((spec, a), b) in p.manifest().iter().zip(p.tensors()).zip(n.tensors()) {
            if spec.role == TensorRole::Attn {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b, "{}", spec.name);
            }
        }
        assert_eq!(perturb_weights(&p, 0.0, Scope::Both, 1).unwrap(), p);
    }

    #[test]
    fn spec_json_round_trip() {
        let specs = [
            MutationSpec::Identity,
            MutationSpec::Quantize { bits: 8 },
            MutationSpec::Prune {
                fraction: 0.2,
                scope: Scope::Mlp,
            },
            MutationSpec::WeightNoise {
                sigma: 0.002,
                scope: Scope::Both,
                seed: 4,
            },
            MutationSpec::Finetune {
                steps: 10,
                lr: 0.01,
                dataset_seed: 2,
                samples: 8,
            },
        ];
        for s in specs {
            assert_eq!(MutationSpec::from_json(&s.to_json()).unwrap(), s);
        }
        assert!(MutationSpec::from_json(r#"{"kind":"quantize","bits":3}"#).is_err());
        assert!(MutationSpec::from_json(r#"{"kind":"prune","fraction":0.2,"scope":"heads"}"#).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::from_fn(3, 5, 7, |c, y, x| ((c + y * 3 + x) % 10) as f64 / 10.0).unwrap();
        assert_eq!(resize_image(&img, 5, 7).unwrap(), img);
        let flat = ImageTensor::filled(3, 8, 8, 0.37f64).unwrap();
        let r = resize_image(&flat, 5, 11).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn zero_magnitude_noise_is_identity() {
        let img = ImageTensor::filled(3, 4, 4, 0.5f64).unwrap();
        assert_eq!(perturb_image(&img, ImageNoise::Gaussian, 0.0, 1).unwrap(), img);
    }
}
