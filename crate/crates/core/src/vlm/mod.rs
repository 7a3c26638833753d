//! Toy vision-language model: patch-embedding front end feeding a small
//! pre-norm causal transformer, with exact gradients.
//!
//! Image patches are prefixed to the text sequence. Post-block residual
//! outputs `h_l` are exposed for inspection and for additive injection.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod image;
mod params;

pub use checkpoint::{
    load_checkpoint, load_image, read_tensor_file, save_checkpoint, save_image, checkpoint_bytes,
    checkpoint_from_bytes, image_bytes, image_from_bytes, model_digest, write_tensor_file, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::ModelConfig;
pub use decode::{decode, decode_with, DecodeConfig, DecodeMode};
pub use forward::{ActivationSet, Gradients, Want};
pub use image::ImageTensor;
pub use params::{init_model, init_model_with, manifest, InitScales, LayerParams, ModelParams, TensorRole, TensorSpec};

use forward::{backward, extract_patches, RowInput, State};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tokenizer::TokenId;

pub type ActivationGrads<F> = ActivationSet<F>;

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// Post-block activations `h_1..h_L` (after any injection).
    pub activations: ActivationSet<F>,
    /// Row-major `[rows, vocab]` next-token logits.
    pub logits: Vec<F>,
    pub vocab_size: usize,
    /// Sequence index of the first logits row.
    pub first_row: usize,
    state: State<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }

    pub fn seq_len(&self) -> usize {
        self.state.len()
    }
}

fn run<F: Real>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    tokens: &[TokenId],
    injected: Option<&ActivationSet<F>>,
    first_row: usize,
) -> Result<ForwardTrace<F>> {
    let cfg = params.config();
    let patches = match image {
        Some(img) => extract_patches(params, img)?,
        None => Vec::new(),
    };
    let n_patches = if image.is_some() { cfg.num_patches() } else { 0 };
    let total = n_patches + tokens.len();
    if total > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: total,
            max: cfg.max_seq_len,
        });
    }
    if let Some(inj) = injected {
        if inj.num_layers() != cfg.layers || inj.seq_len() != total || inj.dim() != cfg.embed_dim {
            return Err(Error::Shape(format!(
                "injection is {}x{}x{}, forward needs {}x{}x{}",
                inj.num_layers(),
                inj.seq_len(),
                inj.dim(),
                cfg.layers,
                total,
                cfg.embed_dim
            )));
        }
    }
    let mut state = State::new(params, patches);
    for n in 0..n_patches {
        state.push(params, RowInput::Patch(n), injected.map(|e| (e, n)))?;
    }
    for (j, &t) in tokens.iter().enumerate() {
        state.push(params, RowInput::Token(t), injected.map(|e| (e, n_patches + j)))?;
    }
    let vsz = cfg.vocab_size;
    let first_row = first_row.min(total);
    let mut logits = vec![F::zero(); (total - first_row) * vsz];
    for (r, i) in (first_row..total).enumerate() {
        state.logits_row(params, i, &mut logits[r * vsz..(r + 1) * vsz]);
    }
    Ok(ForwardTrace {
        activations: state.activations(cfg.embed_dim),
        logits,
        vocab_size: vsz,
        first_row,
        state,
    })
}

/// Causal forward over `[image patches] ++ tokens`, with logits at every
/// text position. When `injected` is given, each layer output becomes
/// `h_l + injected_l` before feeding the next layer.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    tokens: &[TokenId],
    injected: Option<&ActivationSet<F>>,
) -> Result<ForwardTrace<F>> {
    let offset = if image.is_some() { params.config().num_patches() } else { 0 };
    run(params, image, tokens, injected, offset)
}

/// Teacher-forced pass over `prompt ++ response[..T-1]` whose logits rows
/// are exactly the `T` positions predicting `response`.
pub fn teacher_forced<F: Real>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    prompt: &[TokenId],
    response: &[TokenId],
    injected: Option<&ActivationSet<F>>,
) -> Result<ForwardTrace<F>> {
    if response.is_empty() {
        return Err(Error::DegenerateInput("response has no tokens".into()));
    }
    let offset = if image.is_some() { params.config().num_patches() } else { 0 };
    if offset + prompt.len() == 0 {
        return Err(Error::DegenerateInput(
            "need an image or at least one prompt token to predict from".into(),
        ));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + response.len() - 1);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(&response[..response.len() - 1]);
    run(params, image, &tokens, injected, offset + prompt.len() - 1)
}

/// Sequence length of a teacher-forced pass; the shape injections must have.
pub fn teacher_forced_len(config: &ModelConfig, with_image: bool, prompt_len: usize, response_len: usize) -> usize {
    let offset = if with_image { config.num_patches() } else { 0 };
    offset + prompt_len + response_len.saturating_sub(1)
}

/// A scalar loss over teacher-forced logits rows.
pub trait Objective<F: Real> {
    /// Returns the loss and its gradient with respect to `logits`
    /// (`rows x vocab`, row-major).
    fn loss_and_grad(&self, logits: &[F], vocab: usize, targets: &[TokenId]) -> Result<(F, Vec<F>)>;
}

/// Loss value, gradients and the trace they came from.
#[derive(Debug, Clone)]
pub struct Evaluation<F> {
    pub loss: F,
    pub grads: Gradients<F>,
    pub trace: ForwardTrace<F>,
}

pub fn evaluate<F: Real, O: Objective<F> + ?Sized>(
    params: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    response: &[TokenId],
    objective: &O,
    injected: Option<&ActivationSet<F>>,
    want: Want,
) -> Result<Evaluation<F>> {
    let trace = teacher_forced(params, Some(image), prompt, response, injected)?;
    let (loss, dlogits) = objective.loss_and_grad(&trace.logits, trace.vocab_size, response)?;
    let rows = trace.first_row..trace.seq_len();
    let grads = backward(params, &trace.state, rows, &dlogits, want)?;
    Ok(Evaluation { loss, grads, trace })
}

/// Exact gradient of the objective with respect to every pixel.
pub fn grad_image<F: Real, O: Objective<F> + ?Sized>(
    params: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    response: &[TokenId],
    objective: &O,
) -> Result<Vec<F>> {
    let want = Want {
        image: true,
        params: false,
    };
    let ev = evaluate(params, image, prompt, response, objective, None, want)?;
    Ok(ev.grads.image.expect("image gradient requested"))
}

/// Exact gradient of the objective with respect to each post-block activation.
pub fn grad_activations<F: Real, O: Objective<F> + ?Sized>(
    params: &ModelParams<F>,
    image: &ImageTensor<F>,
    prompt: &[TokenId],
    response: &[TokenId],
    objective: &O,
) -> Result<ActivationGrads<F>> {
    let ev = evaluate(params, image, prompt, response, objective, None, Want::default())?;
    Ok(ev.grads.activations)
}

/// Gradient with respect to all parameters for text-only or image-prefixed
/// teacher forcing.
pub fn grad_params<F: Real, O: Objective<F> + ?Sized>(
    params: &ModelParams<F>,
    image: Option<&ImageTensor<F>>,
    prompt: &[TokenId],
    response: &[TokenId],
    objective: &O,
) -> Result<(F, ModelParams<F>)> {
    let trace = teacher_forced(params, image, prompt, response, None)?;
    let (loss, dlogits) = objective.loss_and_grad(&trace.logits, trace.vocab_size, response)?;
    let rows = trace.first_row..trace.seq_len();
    let want = Want {
        image: false,
        params: true,
    };
    let grads = backward(params, &trace.state, rows, &dlogits, want)?;
    Ok((loss, grads.params.expect("parameter gradient requested")))
}

/// Exp of the mean next-token negative log-likelihood over positions `2..T`
/// of a text-only sequence.
pub fn perplexity<F: Real>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<F> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateInput(
            "perplexity needs at least two tokens".into(),
        ));
    }
    let trace = teacher_forced(params, None, &tokens[..1], &tokens[1..], None)?;
    let mut nll = F::zero();
    for (r, &t) in tokens[1..].iter().enumerate() {
        let row = trace.row(r);
        nll += crate::scalar::log_sum_exp(row) - row[t as usize];
    }
    Ok((nll / F::from_usize_lossy(tokens.len() - 1)).exp())
}
