use proptest::prelude::*;
use rand::Rng;
use sif_core::mutate::{
    finetune, perturb_image, perturb_weights, prune, quantize, quantize_tensor, resize_image, ImageNoise, Scope,
    SyntheticTask, DEFAULT_FINETUNE_LR,
};
use sif_core::rng;
use sif_core::vlm::{init_model, ImageTensor, ModelConfig, ModelParams, TensorRole};

fn model(seed: u64) -> ModelParams<f64> {
    init_model(seed, ModelConfig::default()).unwrap()
}

#[test]
fn quantize_8bit_error_within_half_step() {
    let mut r = rng::stream(9, "test", 0);
    let orig: Vec<f64> = (0..4096).map(|_| r.gen_range(-0.7..0.7)).collect();
    let max = orig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = max / 127.0;
    let mut q = orig.clone();
    quantize_tensor(&mut q, 8).unwrap();
    for (a, b) in orig.iter().zip(&q) {
        assert!((a - b).abs() <= scale / 2.0 + 1e-15);
    }
}

#[test]
fn quantize_does_not_touch_input() {
    let p = model(1);
    let copy = p.clone();
    let q = quantize(&p, 4).unwrap();
    assert_eq!(p, copy);
    assert_ne!(q, p);
}

#[test]
fn prune_all_zeroes_scope() {
    let p = model(2);
    let z = prune(&p, 1.0, Scope::Mlp).unwrap();
    for ((spec, a), b) in p.manifest().iter().zip(p.tensors()).zip(z.tensors()) {
        if spec.role == TensorRole::Mlp {
            assert!(b.iter().all(|v| *v == 0.0));
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn prune_breaks_ties_by_index() {
    let mut p = model(2);
    let w = &mut p.layers[0].wq;
    for v in w.iter_mut() {
        *v = 1.0;
    }
    let n = w.len();
    let pruned = prune(&p, 0.25, Scope::Attn).unwrap();
    let k = n / 4;
    let wq = &pruned.layers[0].wq;
    assert!(wq[..k].iter().all(|v| *v == 0.0));
    assert!(wq[k..].iter().all(|v| *v == 1.0));
}

#[test]
fn weight_noise_std_matches_sigma() {
    // The default config has too few scoped weights for a tight std estimate.
    let cfg = ModelConfig {
        embed_dim: 64,
        layers: 3,
        ..ModelConfig::default()
    };
    let p = init_model::<f64>(3, cfg).unwrap();
    let sigma = 0.002;
    let n = perturb_weights(&p, sigma, Scope::Both, 5).unwrap();
    let mut diffs = Vec::new();
    for ((spec, a), b) in p.manifest().iter().zip(p.tensors()).zip(n.tensors()) {
        if Scope::Both.covers(spec.role) {
            diffs.extend(a.iter().zip(b).map(|(x, y)| y - x));
        }
    }
    assert!(diffs.len() >= 100_000, "{}", diffs.len());
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let sd = var.sqrt();
    assert!((sd - sigma).abs() <= 0.05 * sigma, "sd {sd}");
}

#[test]
fn finetune_zero_steps_or_rate_is_identity() {
    let p = model(4);
    let task = SyntheticTask::new(1, 16);
    assert_eq!(finetune(&p, &task, 0, 0.1).unwrap().params, p);
    assert_eq!(finetune(&p, &task, 5, 0.0).unwrap().params, p);
}

#[test]
fn finetune_reduces_training_loss() {
    let p = model(4);
    let task = SyntheticTask::new(1, 64);
    let run = finetune(&p, &task, 200, DEFAULT_FINETUNE_LR).unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = mean(&run.losses[..40]);
    let tail = mean(&run.losses[160..]);
    assert!(tail < head, "start {head} end {tail}");
    let again = finetune(&p, &task, 200, DEFAULT_FINETUNE_LR).unwrap();
    assert_eq!(again.params, run.params);
}

#[test]
fn uniform_noise_bounded_before_clamp() {
    let img = ImageTensor::filled(3, 16, 16, 0.5f64).unwrap();
    let out = perturb_image(&img, ImageNoise::Uniform, 0.06, 3).unwrap();
    assert!(out.linf_distance(&img) <= 0.06);
    assert!(out.linf_distance(&img) > 0.0);
}

#[test]
fn ramp_survives_down_up_resize() {
    let ramp = ImageTensor::from_fn(3, 32, 32, |c, y, x| 0.1 + 0.01 * x as f64 + 0.015 * y as f64 + 0.02 * c as f64).unwrap();
    let down = resize_image(&ramp, 24, 24).unwrap();
    let up = resize_image(&down, 32, 32).unwrap();
    assert!(up.linf_distance(&ramp) <= 1e-9);
    for y in 0..24 {
        for x in 0..24 {
            let sy = y as f64 * 31.0 / 23.0;
            let sx = x as f64 * 31.0 / 23.0;
            let want = 0.1 + 0.01 * sx + 0.015 * sy;
            assert!((down.at(0, y, x) - want).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantize_idempotent(values in prop::collection::vec(-5.0f64..5.0, 1..200), four in any::<bool>()) {
        let bits = if four { 4 } else { 8 };
        let mut once = values.clone();
        quantize_tensor(&mut once, bits).unwrap();
        let mut twice = once.clone();
        quantize_tensor(&mut twice, bits).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn image_noise_stays_in_unit_box(seed in any::<u64>(), m in 0.0f64..0.5, gauss in any::<bool>()) {
        let img = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0).unwrap();
        let kind = if gauss { ImageNoise::Gaussian } else { ImageNoise::Uniform };
        let out = perturb_image(&img, kind, m, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_image_resizes_to_constant(v in 0.0f64..=1.0, h in 1usize..20, w in 1usize..20) {
        let img = ImageTensor::filled(3, 9, 13, v).unwrap();
        let out = resize_image(&img, h, w).unwrap();
        prop_assert_eq!(out.shape(), [3, h, w]);
        prop_assert!(out.data().iter().all(|x| (x - v).abs() <= 1e-15));
    }

    #[test]
    fn prune_adds_floor_zeros(fraction in 0.0f64..=1.0) {
        let p = model(6);
        let q = prune(&p, fraction, Scope::Attn).unwrap();
        let a = &p.layers[1].wv;
        let b = &q.layers[1].wv;
        let added = b.iter().filter(|v| **v == 0.0).count() - a.iter().filter(|v| **v == 0.0).count();
        prop_assert_eq!(added, (fraction * a.len() as f64).floor() as usize);
    }
}
