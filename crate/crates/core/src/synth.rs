//! Procedural image/caption corpus: colored shapes on colored backgrounds.
//!
//! Stands in for natural images and their descriptions wherever the
//! workbench needs "normal" inputs: trigger base images, fine-tuning data,
//! and benign SDA traffic.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::scalar::Real;
use crate::tokenizer::{encode, TokenSeq};
use crate::vlm::ImageTensor;

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.12, 0.10]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.12, 0.25, 0.85]),
    ("yellow", [0.92, 0.85, 0.15]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.06, 0.06, 0.06]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.55, 0.20, 0.70]),
];

const SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "ring", "stripe"];

const PROMPTS: [&str; 8] = [
    "Describe the image in detail.",
    "What is shown in this picture?",
    "What color is the shape?",
    "Describe the scene briefly.",
    "What do you see in the image?",
    "Explain what this image contains.",
    "Give a short caption for this image.",
    "Which object appears here?",
];

/// Built-in stopword list: the 32 most frequent token ids emitted by
/// the corpus generator (prompts and captions), frozen from [`frequent_tokens`].
pub const STOPWORDS: [u32; 32] = [
    34, 103, 99, 107, 112, 116, 110, 113, 118, 106, 105, 117, 101, 102, 100, 119,
    111, 48, 114, 109, 46, 121, 123, 65, 89, 104, 70, 115, 73, 120, 108, 71,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: usize,
    pub fg: usize,
    pub bg: usize,
    pub large: bool,
    /// Shape center in pixels.
    pub cx: usize,
    pub cy: usize,
    pub texture_seed: u64,
}

impl Scene {
    pub fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let fg = rng.gen_range(0..COLORS.len());
        let mut bg = rng.gen_range(0..COLORS.len() - 1);
        if bg >= fg {
            bg += 1;
        }
        let margin = size / 4;
        Self {
            shape: rng.gen_range(0..SHAPES.len()),
            fg,
            bg,
            large: rng.gen_bool(0.5),
            cx: rng.gen_range(margin..size - margin),
            cy: rng.gen_range(margin..size - margin),
            texture_seed: rng.gen(),
        }
    }

    fn covers(&self, x: f64, y: f64, size: usize) -> bool {
        let r = if self.large { size as f64 * 0.3 } else { size as f64 * 0.18 };
        let dx = x - self.cx as f64;
        let dy = y - self.cy as f64;
        match SHAPES[self.shape] {
            "square" => dx.abs() <= r && dy.abs() <= r,
            "circle" => dx * dx + dy * dy <= r * r,
            "triangle" => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            "cross" => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
            "ring" => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            _ => ((x / (0.4 * r).max(1.0)) as i64) % 2 == 0,
        }
    }

    pub fn render<F: Real>(&self, channels: usize, size: usize) -> ImageTensor<F> {
        let mut noise = rng::stream(self.texture_seed, "texture", 0);
        let jitter: Vec<f64> = (0..size * size).map(|_| noise.gen_range(-0.04..0.04)).collect();
        let fg = COLORS[self.fg].1;
        let bg = COLORS[self.bg].1;
        ImageTensor::from_fn(channels, size, size, |c, y, x| {
            let col = if self.covers(x as f64 + 0.5, y as f64 + 0.5, size) { fg } else { bg };
            let v = col[c % 3] + jitter[y * size + x];
            F::lit(v.clamp(0.0, 1.0))
        })
        .expect("rendered pixels are clamped")
    }

    pub fn caption(&self, size: usize) -> String {
        let third = size / 3;
        let horiz = if self.cx < third {
            "on the left"
        } else if self.cx >= 2 * third {
            "on the right"
        } else {
            "in the middle"
        };
        format!(
            "a {} {} {} on a {} background, {}.",
            if self.large { "large" } else { "small" },
            COLORS[self.fg].0,
            SHAPES[self.shape],
            COLORS[self.bg].0,
            horiz
        )
    }
}

pub fn caption_tokens(scene: &Scene, size: usize) -> TokenSeq {
    encode(&scene.caption(size))
}

pub fn prompts() -> &'static [&'static str] {
    &PROMPTS
}

/// One benign query: a rendered scene and a user prompt.
#[derive(Debug, Clone)]
pub struct Sample<F> {
    pub scene: Scene,
    pub image: ImageTensor<F>,
    pub prompt: TokenSeq,
    pub caption: TokenSeq,
}

/// `index`-th sample of the stream labeled `label` under `seed`.
pub fn sample<F: Real>(seed: u64, label: &str, index: u64, channels: usize, size: usize) -> Sample<F> {
    let mut r = rng::stream(seed, label, index);
    let scene = Scene::sample(&mut r, size);
    let prompt = PROMPTS.choose(&mut r).expect("nonempty");
    Sample {
        image: scene.render(channels, size),
        prompt: encode(prompt),
        caption: caption_tokens(&scene, size),
        scene,
    }
}

/// Token frequency ranking over `n` generated captions.
pub fn frequent_tokens(n: u64, top: usize) -> Vec<u32> {
    let mut counts = std::collections::BTreeMap::<u32, u64>::new();
    for i in 0..n {
        let s: Sample<f64> = sample(0, "stopword-census", i, 3, 32);
        for t in s.prompt.into_iter().chain(s.caption) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u32, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(top).map(|(t, _)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_match_corpus_census() {
        assert_eq!(frequent_tokens(2000, 32), STOPWORDS.to_vec());
    }

    #[test]
    fn samples_are_reproducible() {
        let a: Sample<f64> = sample(4, "x", 9, 3, 32);
        let b: Sample<f64> = sample(4, "x", 9, 3, 32);
        assert_eq!(a.image, b.image);
        assert_eq!(a.prompt, b.prompt);
        assert!(a.caption.len() > 20);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
