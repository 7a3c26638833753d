//! Fingerprint distillation into the input image.
//!
//! A watermarked teacher response is generated once from the clean image;
//! the image is then optimized with signed-gradient PGD under an L-infinity
//! budget so that the unmodified model, decoding normally, puts its top-K
//! probability mass on green tokens while staying close to the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfo;
use crate::scalar::{log_sum_exp, Real};
use crate::tokenizer::{TokenId, TokenSeq};
use crate::vlm::{self, decode, evaluate, ActivationSet, DecodeConfig, ImageTensor, ModelParams, Objective, Want};
use crate::wmark::{detect_with_mask, green_list, watermarked_decode, GreenMask, WatermarkKey, WatermarkParams};

/// Teacher responses shorter than this are rejected.
pub const MIN_TEACHER_TOKENS: usize = 80;

/// Lower clamp on renormalized green mass before taking its log.
pub const GREEN_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub top_k: usize,
    pub lambda_wm: f64,
    pub lambda_ce: f64,
    /// Recorded for provenance. The run starts from the clean image and is
    /// otherwise deterministic, so the seed does not change the result.
    pub seed: u64,
    /// Loss history cadence in steps.
    pub record_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            alpha: 1.0 / 255.0,
            steps: 1000,
            top_k: 50,
            lambda_wm: 0.5,
            lambda_ce: 0.5,
            seed: 0,
            record_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < alpha <= epsilon <= 1, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::Parameter(format!(
                "top_k must lie in [1, {vocab_size}], got {}",
                self.top_k
            )));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        if !(self.lambda_wm >= 0.0 && self.lambda_ce >= 0.0) {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Parameter("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Clean image, prompt and the frozen watermarked teacher response.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec<F> {
    base_image: ImageTensor<F>,
    prompt: TokenSeq,
    key_digest: String,
    teacher_response: TokenSeq,
}

impl<F: Real> TriggerSpec<F> {
    pub fn new(
        base_image: ImageTensor<F>,
        prompt: TokenSeq,
        key_digest: String,
        teacher_response: TokenSeq,
    ) -> Result<Self> {
        if teacher_response.len() < MIN_TEACHER_TOKENS {
            return Err(Error::SpecRejected(format!(
                "teacher response has {} tokens, need at least {MIN_TEACHER_TOKENS}",
                teacher_response.len()
            )));
        }
        Ok(Self {
            base_image,
            prompt,
            key_digest,
            teacher_response,
        })
    }

    pub fn base_image(&self) -> &ImageTensor<F> {
        &self.base_image
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn key_digest(&self) -> &str {
        &self.key_digest
    }

    pub fn teacher_response(&self) -> &[TokenId] {
        &self.teacher_response
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub wm: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub wm: f64,
    pub ce: f64,
    pub total: f64,
}

/// Optimized trigger plus everything needed to audit and verify it.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerArtifact<F> {
    pub trigger_image: ImageTensor<F>,
    pub spec: TriggerSpec<F>,
    pub distill_config: DistillConfig,
    /// Activation perturbation magnitude; `None` for plain distillation.
    pub rho: Option<f64>,
    pub initial_loss: LossParts,
    pub final_loss: LossParts,
    pub initial_z: Option<f64>,
    pub final_z: Option<f64>,
    /// Loss every `record_every` steps plus the final step. Under RFO the
    /// in-loop values come from the perturbed forward.
    pub history: Vec<LossRecord>,
    /// Global norm of the injected perturbation at every iteration.
    pub injected_norms: Vec<f64>,
    /// Iterations whose iterate left the budget or pixel range. Always zero
    /// unless projection is broken.
    pub projection_violations: usize,
    /// Calibrated detection threshold, once known.
    pub threshold: Option<f64>,
}

impl<F: Real> TriggerArtifact<F> {
    /// Stable content-derived id: first 16 hex digits of a hash over the
    /// trigger image, prompt and key digest.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.trigger_image.digest().as_bytes());
        for t in self.spec.prompt() {
            h.update(t.to_le_bytes());
        }
        h.update(self.spec.key_digest().as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

/// Weighted watermark-alignment plus cross-entropy objective.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub lambda_wm: f64,
    pub lambda_ce: f64,
    pub top_k: usize,
    pub mask: GreenMask,
}

impl LossSpec {
    pub fn new(lambda_wm: f64, lambda_ce: f64, top_k: usize, mask: GreenMask) -> Self {
        Self {
            lambda_wm,
            lambda_ce,
            top_k,
            mask,
        }
    }

    pub fn from_config(cfg: &DistillConfig, mask: GreenMask) -> Self {
        Self::new(cfg.lambda_wm, cfg.lambda_ce, cfg.top_k, mask)
    }

    /// Both terms and the weighted total, without gradients.
    pub fn parts<F: Real>(&self, logits: &[F], vocab: usize, targets: &[TokenId]) -> Result<LossParts> {
        let wm = loss_wm(logits, vocab, &self.mask, self.top_k)?.as_f64();
        let ce = loss_ce(logits, vocab, targets)?.as_f64();
        Ok(LossParts {
            wm,
            ce,
            total: self.lambda_wm * wm + self.lambda_ce * ce,
        })
    }
}

/// Indices of the `k` largest logits (ties toward lower ids).
fn top_k_indices<F: Real>(row: &[F], k: usize, scratch: &mut Vec<usize>) {
    scratch.clear();
    scratch.extend(0..row.len());
    let cmp = |a: &usize, b: &usize| row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    if k < row.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
}

fn check_rows<F>(logits: &[F], vocab: usize) -> Result<usize> {
    if vocab == 0 || logits.len() % vocab != 0 {
        return Err(Error::Shape(format!(
            "{} logits do not form rows of width {vocab}",
            logits.len()
        )));
    }
    let rows = logits.len() / vocab;
    if rows == 0 {
        return Err(Error::DegenerateInput("no response positions".into()));
    }
    Ok(rows)
}

/// Per-row watermark loss `-log(max(green mass of top-K renormalized, floor))`
/// and, optionally, its gradient scaled by `weight`. `exps` holds
/// `exp(row - max(row))`.
fn wm_row<F: Real>(row: &[F], exps: &[F], mask: &GreenMask, k: usize, scratch: &mut Vec<usize>, grad: Option<(F, &mut [F])>) -> F {
    top_k_indices(row, k, scratch);
    let mut z_all = F::zero();
    let mut z_green = F::zero();
    for &v in scratch.iter() {
        z_all += exps[v];
        if mask.is_green(v as TokenId) {
            z_green += exps[v];
        }
    }
    let mass = z_green / z_all;
    let floor = F::lit(GREEN_MASS_FLOOR);
    if mass < floor {
        return -floor.ln();
    }
    if let Some((w, g)) = grad {
        for &v in scratch.iter() {
            let e = exps[v];
            let mut d = e / z_all;
            if mask.is_green(v as TokenId) {
                d -= e / z_green;
            }
            g[v] += w * d;
        }
    }
    -mass.ln()
}

/// `exp(row - max)` into `out`; returns `(max, sum)`.
fn shifted_exps<F: Real>(row: &[F], out: &mut [F]) -> (F, F) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        sum += *o;
    }
    (mx, sum)
}

/// Mean over response positions of `-log` green mass within the top-K
/// renormalized student distribution.
pub fn loss_wm<F: Real>(logits: &[F], vocab: usize, mask: &GreenMask, top_k: usize) -> Result<F> {
    let rows = check_rows(logits, vocab)?;
    if top_k == 0 || top_k > vocab || mask.len() != vocab {
        return Err(Error::Parameter(format!(
            "top_k {top_k} / mask size {} invalid for vocabulary {vocab}",
            mask.len()
        )));
    }
    let mut scratch = Vec::with_capacity(vocab);
    let mut exps = vec![F::zero(); vocab];
    let total: F = (0..rows)
        .map(|r| {
            let row = &logits[r * vocab..(r + 1) * vocab];
            shifted_exps(row, &mut exps);
            wm_row(row, &exps, mask, top_k, &mut scratch, None)
        })
        .sum();
    Ok(total / F::from_usize_lossy(rows))
}

/// Mean teacher-forced negative log-likelihood of `targets`.
pub fn loss_ce<F: Real>(logits: &[F], vocab: usize, targets: &[TokenId]) -> Result<F> {
    let rows = check_rows(logits, vocab)?;
    if rows != targets.len() {
        return Err(Error::Shape(format!(
            "{rows} logits rows for {} target tokens",
            targets.len()
        )));
    }
    let total: F = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits[r * vocab..(r + 1) * vocab];
            log_sum_exp(row) - row[t as usize]
        })
        .sum();
    Ok(total / F::from_usize_lossy(rows))
}

impl<F: Real> Objective<F> for LossSpec {
    fn loss_and_grad(&self, logits: &[F], vocab: usize, targets: &[TokenId]) -> Result<(F, Vec<F>)> {
        let rows = check_rows(logits, vocab)?;
        if rows != targets.len() {
            return Err(Error::Shape(format!(
                "{rows} logits rows for {} target tokens",
                targets.len()
            )));
        }
        if self.top_k == 0 || self.top_k > vocab || self.mask.len() != vocab {
            return Err(Error::Parameter("loss spec does not fit the vocabulary".into()));
        }
        let inv_t = F::one() / F::from_usize_lossy(rows);
        let lw = F::lit(self.lambda_wm);
        let lc = F::lit(self.lambda_ce);
        let mut grad = vec![F::zero(); logits.len()];
        let mut scratch = Vec::with_capacity(vocab);
        let mut exps = vec![F::zero(); vocab];
        let mut wm = F::zero();
        let mut ce = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let g = &mut grad[r * vocab..(r + 1) * vocab];
            let (mx, sum) = shifted_exps(row, &mut exps);
            wm += wm_row(row, &exps, &self.mask, self.top_k, &mut scratch, Some((lw * inv_t, &mut *g)));
            ce += mx + sum.ln() - row[t as usize];
            let w = lc * inv_t / sum;
            for (gv, &e) in g.iter_mut().zip(&exps) {
                *gv += w * e;
            }
            g[t as usize] -= lc * inv_t;
        }
        Ok((lw * wm * inv_t + lc * ce * inv_t, grad))
    }
}

/// Lower and upper pixel bounds around `base` such that every value in
/// between satisfies `|x - base| <= eps` and `0 <= x <= 1` in floating point.
pub(crate) fn pixel_band<F: Real>(base: F, eps: F) -> (F, F) {
    let mut lo = (base - eps).max(F::zero());
    while base - lo > eps {
        lo = lo + (base - lo - eps).max(F::epsilon() * base);
    }
    let mut hi = (base + eps).min(F::one());
    while hi - base > eps {
        hi = hi - (hi - base - eps).max(F::epsilon() * hi);
    }
    (lo, hi)
}

/// One signed-gradient descent step projected onto the L-infinity ball
/// around `base` and the unit pixel range.
pub fn pgd_step<F: Real>(
    current: &ImageTensor<F>,
    grad: &[F],
    alpha: F,
    base: &ImageTensor<F>,
    epsilon: F,
) -> Result<ImageTensor<F>> {
    if current.shape() != base.shape() || grad.len() != current.data().len() {
        return Err(Error::Shape("image, base and gradient sizes differ".into()));
    }
    let data = current
        .data()
        .iter()
        .zip(grad)
        .zip(base.data())
        .map(|((&x, &g), &b)| {
            let (lo, hi) = pixel_band(b, epsilon);
            (x - alpha * g.sign0()).max(lo).min(hi)
        })
        .collect();
    let [c, h, w] = current.shape();
    Ok(ImageTensor::from_clamped(c, h, w, data))
}

/// True when `x` is inside the budget and the pixel range.
pub fn within_budget<F: Real>(x: &ImageTensor<F>, base: &ImageTensor<F>, epsilon: F) -> bool {
    x.data()
        .iter()
        .zip(base.data())
        .all(|(&v, &b)| v >= F::zero() && v <= F::one() && (v - b).abs() <= epsilon)
}

/// Watermarked greedy response from the clean image, frozen as the target.
pub fn teacher_generate<F: Real>(
    params: &ModelParams<F>,
    base_image: &ImageTensor<F>,
    prompt: &[TokenId],
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    max_len: usize,
) -> Result<TokenSeq> {
    let out = watermarked_decode(
        params,
        base_image,
        prompt,
        key,
        wparams,
        max_len,
        &DecodeConfig::greedy(max_len),
    )?;
    if out.len() < MIN_TEACHER_TOKENS {
        return Err(Error::SpecRejected(format!(
            "teacher stopped after {} tokens",
            out.len()
        )));
    }
    Ok(out)
}

/// Builds `count` accepted trigger specs from the synthetic corpus,
/// skipping draws whose teacher response is too short.
pub fn sample_trigger_specs<F: Real>(
    params: &ModelParams<F>,
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    count: usize,
    seed: u64,
    response_len: usize,
) -> Result<Vec<TriggerSpec<F>>> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(count);
    let mut draw = 0u64;
    while out.len() < count {
        if draw >= 50 * count as u64 + 100 {
            return Err(Error::SpecRejected(format!(
                "only {} of {count} specs accepted after {draw} draws",
                out.len()
            )));
        }
        let s = crate::synth::sample::<F>(seed, "trigger-spec", draw, cfg.channels, cfg.image_size);
        draw += 1;
        match teacher_generate(params, &s.image, &s.prompt, key, wparams, response_len) {
            Ok(teacher) => out.push(TriggerSpec::new(s.image, s.prompt, key.digest(), teacher)?),
            Err(Error::SpecRejected(why)) => log::debug!("draw {} rejected: {why}", draw - 1),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Greedy plain-decoding z-score of a (trigger) image, `None` when the
/// response is empty.
pub fn greedy_z<F: Real>(
    params: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    mask: &GreenMask,
    gamma: f64,
    max_len: usize,
) -> Result<Option<f64>> {
    let out = decode(params, Some(image), prompt, &DecodeConfig::greedy(max_len))?;
    Ok(detect_with_mask(&out, mask, gamma).ok().map(|d| d.z_score))
}

/// Shared PGD loop. With `rho`, each iteration first computes the
/// worst-case activation perturbation and takes the image gradient under it.
pub(crate) fn optimize<F: Real>(
    params: &ModelParams<F>,
    spec: &TriggerSpec<F>,
    cfg: &DistillConfig,
    key: &WatermarkKey,
    wparams: &WatermarkParams,
    rho: Option<f64>,
) -> Result<TriggerArtifact<F>> {
    let vocab = params.config().vocab_size;
    cfg.validate(vocab)?;
    wparams.validate()?;
    if spec.key_digest() != key.digest() {
        return Err(Error::Consistency("trigger spec was built with a different key".into()));
    }
    if let Some(r) = rho {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Parameter(format!("rho must be nonnegative, got {r}")));
        }
    }
    let mask = green_list(key, vocab, wparams.gamma)?;
    let objective = LossSpec::from_config(cfg, mask.clone());
    let base = spec.base_image();
    let prompt = spec.prompt();
    let teacher = spec.teacher_response();
    let alpha = F::lit(cfg.alpha);
    let eps = F::lit(cfg.epsilon);
    let want = Want {
        image: true,
        params: false,
    };

    let mut x = base.clone();
    let mut history = Vec::new();
    let mut injected_norms = Vec::new();
    let mut violations = 0;
    let clean = vlm::teacher_forced(params, Some(base), prompt, teacher, None)?;
    let initial_loss = objective.parts(&clean.logits, vocab, teacher)?;
    for step in 0..cfg.steps {
        let injection: Option<ActivationSet<F>> = match rho {
            Some(r) if r > 0.0 => {
                let probe = evaluate(params, &x, prompt, teacher, &objective, None, Want::default())?;
                let eps_star = rfo::worst_case_perturbation(&probe.grads.activations, F::lit(r))?;
                injected_norms.push(eps_star.sq_norm().sqrt().as_f64());
                if eps_star.is_zero() {
                    None
                } else {
                    Some(eps_star)
                }
            }
            Some(_) => {
                injected_norms.push(0.0);
                None
            }
            None => None,
        };
        let ev = evaluate(params, &x, prompt, teacher, &objective, injection.as_ref(), want)?;
        if !ev.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: ev.loss.as_f64(),
            });
        }
        if step % cfg.record_every == 0 {
            let parts = objective.parts(&ev.trace.logits, vocab, teacher)?;
            history.push(LossRecord {
                step,
                wm: parts.wm,
                ce: parts.ce,
                total: parts.total,
            });
        }
        let grad = ev.grads.image.expect("image gradient requested");
        x = pgd_step(&x, &grad, alpha, base, eps)?;
        if !within_budget(&x, base, eps) {
            violations += 1;
        }
    }

    // final losses on the clean (uninjected) forward at the returned image
    let trace = vlm::teacher_forced(params, Some(&x), prompt, teacher, None)?;
    let final_loss = objective.parts(&trace.logits, vocab, teacher)?;
    history.push(LossRecord {
        step: cfg.steps,
        wm: final_loss.wm,
        ce: final_loss.ce,
        total: final_loss.total,
    });
    let len = teacher.len();
    let initial_z = greedy_z(params, base, prompt, &mask, wparams.gamma, len)?;
    let final_z = greedy_z(params, &x, prompt, &mask, wparams.gamma, len)?;
    Ok(TriggerArtifact {
        trigger_image: x,
        spec: spec.clone(),
        distill_config: *cfg,
        rho,
        initial_loss,
        final_loss,
        initial_z,
        final_z,
        history,
        injected_norms,
        projection_violations: violations,
        threshold: None,
    })
}

/// Runs `cfg.steps` PGD iterations on `lambda_wm * L_wm + lambda_ce * L_ce`.
pub fn distill<F: Real>(
    params: &ModelParams<F>,
    spec: &TriggerSpec<F>,
    cfg: &DistillConfig,
    key: &WatermarkKey,
    wparams: &WatermarkParams,
) -> Result<TriggerArtifact<F>> {
    optimize(params, spec, cfg, key, wparams, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::softmax;

    fn mask_alternating(v: usize) -> GreenMask {
        GreenMask::from_membership((0..v).map(|i| i % 2 == 0).collect())
    }

    #[test]
    fn wm_loss_zero_when_top_k_all_green() {
        let v = 8;
        let mask = mask_alternating(v);
        // greens (even ids) dominate; top-4 is {0,2,4,6}
        let row: Vec<f64> = (0..v).map(|i| if i % 2 == 0 { 5.0 + i as f64 } else { -5.0 }).collect();
        let l = loss_wm(&row, v, &mask, 4).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn wm_loss_ln2_at_half_mass() {
        let v = 6;
        let mask = mask_alternating(v);
        let rows: Vec<f64> = [vec![1.0, 1.0, -9.0, -9.0, -9.0, -9.0], vec![0.3, 0.3, 0.3, 0.3, -9.0, -9.0]].concat();
        let l = loss_wm(&rows, v, &mask, 2).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wm_loss_full_vocab_matches_softmax_sum() {
        let v = 32;
        let mask = mask_alternating(v);
        let rows: Vec<f64> = (0..3 * v).map(|i| ((i * 7919) % 23) as f64 * 0.21 - 2.0).collect();
        let got = loss_wm(&rows, v, &mask, v).unwrap();
        let mut want = 0.0;
        for r in 0..3 {
            let p = softmax(&rows[r * v..(r + 1) * v]);
            let green: f64 = (0..v).filter(|i| i % 2 == 0).map(|i| p[i]).sum();
            want -= green.ln();
        }
        want /= 3.0;
        assert!((got - want).abs() <= 1e-9);
    }

    #[test]
    fn wm_loss_floor_without_green() {
        let v = 4;
        let mask = GreenMask::from_membership(vec![false, false, false, true]);
        let row = vec![3.0f64, 2.0, 1.0, -50.0];
        let l = loss_wm(&row, v, &mask, 2).unwrap();
        assert!((l + GREEN_MASS_FLOOR.ln()).abs() < 1e-9);
        assert!(loss_wm(&row[..0], v, &mask, 2).is_err());
    }

    #[test]
    fn ce_loss_closed_forms() {
        let v = 5;
        let uniform = vec![0.0f64; 2 * v];
        let l = loss_ce(&uniform, v, &[1, 3]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut peaked = vec![-1e4f64; 2 * v];
        peaked[2] = 0.0;
        peaked[v + 4] = 0.0;
        assert_eq!(loss_ce(&peaked, v, &[2, 4]).unwrap(), 0.0);
        assert!(matches!(loss_ce(&uniform, v, &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let v = 12;
        let mask = mask_alternating(v);
        let spec = LossSpec::new(0.5, 0.5, 5, mask);
        let targets = [3u32, 8];
        let logits: Vec<f64> = (0..2 * v).map(|i| (((i * 37) % 17) as f64) * 0.13 - 1.0).collect();
        let (_, g) = spec.loss_and_grad(&logits, v, &targets).unwrap();
        for i in 0..logits.len() {
            let h = 1e-6;
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fp = spec.loss_and_grad(&p, v, &targets).unwrap().0;
            let fm = spec.loss_and_grad(&m, v, &targets).unwrap().0;
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-7, "coord {i}");
        }
    }

    fn img(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(1, 2, 2, v).unwrap()
    }

    #[test]
    fn pgd_zero_gradient_is_fixed_point() {
        let base = img(0.5);
        let x = pgd_step(&base, &[0.0; 4], 1.0 / 255.0, &base, 16.0 / 255.0).unwrap();
        assert_eq!(x, base);
    }

    #[test]
    fn pgd_single_step_moves_alpha() {
        let base = img(0.5);
        let g = [10.0, 0.0, -3.0, 0.0];
        let x = pgd_step(&base, &g, 1.0 / 255.0, &base, 16.0 / 255.0).unwrap();
        assert!((0.5 - x.data()[0] - 1.0 / 255.0).abs() < 1e-15);
        assert!((x.data()[2] - 0.5 - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(x.data()[1], 0.5);
    }

    #[test]
    fn pixel_band_is_exact() {
        for i in 0..=1000 {
            let b = i as f64 / 1000.0;
            for eps in [16.0 / 255.0, 8.0 / 255.0, 1e-3, 0.3] {
                let (lo, hi) = pixel_band(b, eps);
                assert!(lo >= 0.0 && hi <= 1.0);
                assert!(b - lo <= eps && hi - b <= eps, "b={b} eps={eps}");
                assert!((b - lo).abs() <= eps && (lo - b).abs() <= eps);
            }
        }
    }

    #[test]
    fn spec_rejects_short_teacher() {
        let r = TriggerSpec::new(img(0.5), vec![2, 3], "d".into(), vec![5; 79]);
        assert!(matches!(r, Err(Error::SpecRejected(_))));
        assert!(TriggerSpec::new(img(0.5), vec![2, 3], "d".into(), vec![5; 80]).is_ok());
    }

    #[test]
    fn config_validation() {
        let c = DistillConfig::default();
        assert!(c.validate(512).is_ok());
        assert!(DistillConfig { alpha: 0.1, ..c }.validate(512).is_err());
        assert!(DistillConfig { top_k: 513, ..c }.validate(512).is_err());
        assert!(DistillConfig { steps: 0, ..c }.validate(512).is_err());
    }
}
