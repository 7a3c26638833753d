use rand::Rng;
use sif_core::safd::LossSpec;
use sif_core::synth;
use sif_core::vlm::{
    grad_activations, grad_image, grad_params, init_model, teacher_forced, ActivationSet, ImageTensor,
    ModelConfig, ModelParams, Objective,
};
use sif_core::wmark::{green_list, WatermarkKey};

const H: f64 = 1e-5;

fn setup() -> (ModelParams<f64>, ImageTensor<f64>, Vec<u32>, Vec<u32>) {
    let params = init_model::<f64>(11, ModelConfig::default()).unwrap();
    let s = synth::sample::<f64>(5, "grad", 0, 3, 32);
    let response: Vec<u32> = synth::caption_tokens(&s.scene, 32).into_iter().take(24).collect();
    (params, s.image, s.prompt, response)
}

fn loss_at<O: Objective<f64>>(
    params: &ModelParams<f64>,
    image: &ImageTensor<f64>,
    prompt: &[u32],
    response: &[u32],
    obj: &O,
    inj: Option<&ActivationSet<f64>>,
) -> f64 {
    let t = teacher_forced(params, Some(image), prompt, response, inj).unwrap();
    obj.loss_and_grad(&t.logits, t.vocab_size, response).unwrap().0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn specs() -> Vec<LossSpec> {
    let mask = green_list(&WatermarkKey::from_seed(3), 512, 0.5).unwrap();
    vec![
        LossSpec::new(1.0, 0.0, 50, mask.clone()),
        LossSpec::new(0.0, 1.0, 50, mask.clone()),
        LossSpec::new(0.5, 0.5, 512, mask),
    ]
}

#[test]
fn image_gradient_matches_central_differences() {
    let (params, image, prompt, response) = setup();
    let mut rng = sif_core::rng::stream(1, "probe", 0);
    for obj in specs() {
        let g = grad_image(&params, &image, &prompt, &response, &obj).unwrap();
        for _ in 0..20 {
            let i = rng.gen_range(0..image.data().len());
            // keep probes strictly inside the pixel range
            let mut d = image.data().to_vec();
            d[i] = d[i].clamp(2.0 * H, 1.0 - 2.0 * H);
            let base = ImageTensor::new(3, 32, 32, d.clone()).unwrap();
            let gi = grad_image(&params, &base, &prompt, &response, &obj).unwrap()[i];
            d[i] += H;
            let up = ImageTensor::new(3, 32, 32, d.clone()).unwrap();
            d[i] -= 2.0 * H;
            let dn = ImageTensor::new(3, 32, 32, d).unwrap();
            let fd = (loss_at(&params, &up, &prompt, &response, &obj, None)
                - loss_at(&params, &dn, &prompt, &response, &obj, None))
                / (2.0 * H);
            assert!(rel_err(fd, gi) <= 1e-3, "pixel {i}: fd {fd} vs {gi}");
        }
        assert_eq!(g.len(), image.data().len());
    }
}

#[test]
fn activation_gradient_matches_injected_bumps() {
    let (params, image, prompt, response) = setup();
    let mut rng = sif_core::rng::stream(2, "probe", 0);
    for obj in specs() {
        let g = grad_activations(&params, &image, &prompt, &response, &obj).unwrap();
        let zero = ActivationSet::zeros(g.num_layers(), g.seq_len(), g.dim());
        for _ in 0..10 {
            let l = rng.gen_range(0..g.num_layers());
            let i = rng.gen_range(0..g.layer(l).len());
            let mut up = zero.clone();
            up.layer_mut(l)[i] = H;
            let mut dn = zero.clone();
            dn.layer_mut(l)[i] = -H;
            let fd = (loss_at(&params, &image, &prompt, &response, &obj, Some(&up))
                - loss_at(&params, &image, &prompt, &response, &obj, Some(&dn)))
                / (2.0 * H);
            assert!(rel_err(fd, g.layer(l)[i]) <= 1e-3, "layer {l} coord {i}: fd {fd} vs {}", g.layer(l)[i]);
        }
    }
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let (params, image, prompt, response) = setup();
    let obj = &specs()[1];
    let (_, g) = grad_params(&params, Some(&image), &prompt, &response, obj).unwrap();
    let mut rng = sif_core::rng::stream(3, "probe", 0);
    let gt = g.tensors();
    for _ in 0..20 {
        let t = rng.gen_range(0..gt.len());
        let i = rng.gen_range(0..gt[t].len());
        let bump = |h: f64| {
            let mut p = params.clone();
            p.tensors_mut()[t][i] += h;
            loss_at(&p, &image, &prompt, &response, obj, None)
        };
        let fd = (bump(H) - bump(-H)) / (2.0 * H);
        assert!(rel_err(fd, gt[t][i]) <= 1e-3 || (fd - gt[t][i]).abs() < 1e-9, "tensor {t} index {i}: fd {fd} vs {}", gt[t][i]);
    }
}

#[test]
fn zero_weight_loss_has_zero_gradients() {
    let (params, image, prompt, response) = setup();
    let mask = green_list(&WatermarkKey::from_seed(3), 512, 0.5).unwrap();
    let obj = LossSpec::new(0.0, 0.0, 50, mask);
    assert!(grad_image(&params, &image, &prompt, &response, &obj).unwrap().iter().all(|&v| v == 0.0));
    assert!(grad_activations(&params, &image, &prompt, &response, &obj).unwrap().is_zero());
}

#[test]
fn image_gradient_is_linear_in_loss_scale() {
    let (params, image, prompt, response) = setup();
    let mask = green_list(&WatermarkKey::from_seed(3), 512, 0.5).unwrap();
    let a = grad_image(&params, &image, &prompt, &response, &LossSpec::new(0.5, 0.5, 50, mask.clone())).unwrap();
    let b = grad_image(&params, &image, &prompt, &response, &LossSpec::new(1.5, 1.5, 50, mask)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((3.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}
