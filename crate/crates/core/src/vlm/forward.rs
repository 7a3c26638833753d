//! Row-at-a-time causal forward pass and its exact reverse-mode adjoint.
//!
//! Every sequence position is pushed through all layers before the next one,
//! which makes the full forward and incremental decoding the same code path
//! (and therefore bit-identical).

use super::image::ImageTensor;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Real};
use crate::tokenizer::TokenId;

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// One `[seq_len, dim]` tensor per decoder layer. Used for post-block
/// activations, their gradients and injected perturbations alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet<F> {
    seq_len: usize,
    dim: usize,
    layers: Vec<Vec<F>>,
}

impl<F: Real> ActivationSet<F> {
    pub fn zeros(layers: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            seq_len,
            dim,
            layers: vec![vec![F::zero(); seq_len * dim]; layers],
        }
    }

    pub fn from_layers(seq_len: usize, dim: usize, layers: Vec<Vec<F>>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.len() != seq_len * dim) {
            return Err(Error::Shape(format!(
                "activation layer has {} values, expected {}x{}",
                bad.len(),
                seq_len,
                dim
            )));
        }
        Ok(Self {
            seq_len,
            dim,
            layers,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[F] {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [F] {
        &mut self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<F>] {
        &self.layers
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.seq_len == other.seq_len && self.dim == other.dim && self.layers.len() == other.layers.len()
    }

    pub fn sq_norm(&self) -> F {
        self.layers.iter().flatten().map(|&v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|v| *v == F::zero())
    }
}

/// Where a sequence position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowInput {
    Patch(usize),
    Token(TokenId),
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache<F> {
    x_in: Vec<F>,
    r1: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// Row `i` holds `heads * (i + 1)` attention weights.
    probs: Vec<F>,
    o: Vec<F>,
    x_mid: Vec<F>,
    r2: Vec<F>,
    b: Vec<F>,
    u: Vec<F>,
    act: Vec<F>,
    h: Vec<F>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct State<F> {
    rows: Vec<RowInput>,
    /// Flattened pixel patches, `[num_patches, patch_dim]`.
    patches: Vec<F>,
    layers: Vec<LayerCache<F>>,
    /// Final-norm reciprocal RMS and normalized output for logits rows.
    rf: Vec<F>,
    fnorm: Vec<F>,
}

#[inline]
fn gelu<F: Real>(u: F) -> F {
    u * gelu_gate(u)
}

/// `0.5 * (1 + tanh(z))` written as a logistic in `2z`, which needs one `exp`.
#[inline]
fn gelu_gate<F: Real>(u: F) -> F {
    let z = F::lit(GELU_C) * (u + F::lit(GELU_A) * u * u * u);
    F::one() / (F::one() + (-(z + z)).exp())
}

#[inline]
fn gelu_grad<F: Real>(u: F) -> F {
    let s = gelu_gate(u);
    let dz = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * u * u);
    s + (u + u) * s * (F::one() - s) * dz
}

/// `out = x * r * gain` with `r = 1/sqrt(mean(x^2) + eps)`; returns `r`.
#[inline]
fn rms_norm<F: Real>(x: &[F], gain: &[F], out: &mut [F]) -> F {
    let n = F::from_usize_lossy(x.len());
    let ms = x.iter().map(|&v| v * v).sum::<F>() / n;
    let r = F::one() / (ms + F::lit(RMS_EPS)).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * r * g;
    }
    r
}

/// Adjoint of [`rms_norm`]: accumulates into `dx`, and into `dgain` if given.
#[inline]
fn rms_norm_back<F: Real>(x: &[F], gain: &[F], r: F, dy: &[F], dx: &mut [F], dgain: Option<&mut [F]>) {
    let n = F::from_usize_lossy(x.len());
    let mut s = F::zero();
    for i in 0..x.len() {
        s += gain[i] * dy[i] * x[i];
    }
    let coef = r * r * r * s / n;
    for i in 0..x.len() {
        dx[i] += r * gain[i] * dy[i] - x[i] * coef;
    }
    if let Some(dg) = dgain {
        for i in 0..x.len() {
            dg[i] += dy[i] * x[i] * r;
        }
    }
}

/// `out = x W` for `W` stored `[in, out]`.
#[inline]
fn matvec<F: Real>(x: &[F], w: &[F], out: &mut [F]) {
    let n_out = out.len();
    out.iter_mut().for_each(|o| *o = F::zero());
    for (k, &xk) in x.iter().enumerate() {
        axpy(xk, &w[k * n_out..(k + 1) * n_out], out);
    }
}

/// `dx += W dy` for `W` stored `[in, out]`.
#[inline]
fn matvec_t<F: Real>(dy: &[F], w: &[F], dx: &mut [F]) {
    let n_out = dy.len();
    for (k, d) in dx.iter_mut().enumerate() {
        *d += dot(&w[k * n_out..(k + 1) * n_out], dy);
    }
}

/// `dW += x dy^T`
#[inline]
fn outer_acc<F: Real>(x: &[F], dy: &[F], dw: &mut [F]) {
    let n_out = dy.len();
    for (k, &xk) in x.iter().enumerate() {
        if xk != F::zero() {
            axpy(xk, dy, &mut dw[k * n_out..(k + 1) * n_out]);
        }
    }
}

pub(crate) fn extract_patches<F: Real>(params: &ModelParams<F>, image: &ImageTensor<F>) -> Result<Vec<F>> {
    let cfg = params.config();
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(Error::Shape(format!(
            "image has shape {:?}, model expects {:?}",
            image.shape(),
            expected
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(image.at(c, py * p + dy, px * p + dx));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatters a `[num_patches, patch_dim]` gradient back to image layout.
fn scatter_patches<F: Real>(params: &ModelParams<F>, dpatches: &[F]) -> Vec<F> {
    let cfg = params.config();
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let s = cfg.image_size;
    let mut out = vec![F::zero(); cfg.image_len()];
    let mut idx = 0;
    for py in 0..side {
        for px in 0..side {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out[(c * s + py * p + dy) * s + px * p + dx] = dpatches[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

impl<F: Real> State<F> {
    pub(crate) fn new(params: &ModelParams<F>, patches: Vec<F>) -> Self {
        Self {
            rows: Vec::new(),
            patches,
            layers: vec![LayerCache::default(); params.config().layers],
            rf: Vec::new(),
            fnorm: Vec::new(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.rows.len()
    }

    /// Pushes one position through every layer. `inject` holds per-layer
    /// additive offsets for this row.
    pub(crate) fn push(&mut self, params: &ModelParams<F>, input: RowInput, inject: Option<(&ActivationSet<F>, usize)>) -> Result<()> {
        let cfg = params.config();
        let i = self.rows.len();
        if i >= cfg.max_seq_len {
            return Err(Error::Capacity {
                len: i + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.embed_dim;
        let m = cfg.mlp_dim();
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = F::one() / F::from_usize_lossy(hd).sqrt();

        let mut x = vec![F::zero(); d];
        match input {
            RowInput::Patch(n) => {
                let pd = cfg.patch_dim();
                matvec(&self.patches[n * pd..(n + 1) * pd], &params.patch_w, &mut x);
                for (xi, &b) in x.iter_mut().zip(&params.patch_b) {
                    *xi += b;
                }
            }
            RowInput::Token(t) => {
                let t = t as usize;
                if t >= cfg.vocab_size {
                    return Err(Error::Parameter(format!(
                        "token id {t} outside vocabulary of size {}",
                        cfg.vocab_size
                    )));
                }
                x.copy_from_slice(&params.tok_emb[t * d..(t + 1) * d]);
            }
        }
        for (xi, &pe) in x.iter_mut().zip(&params.pos_emb[i * d..(i + 1) * d]) {
            *xi += pe;
        }
        self.rows.push(input);

        let mut a = vec![F::zero(); d];
        let mut q = vec![F::zero(); d];
        let mut k = vec![F::zero(); d];
        let mut v = vec![F::zero(); d];
        let mut o = vec![F::zero(); d];
        let mut y = vec![F::zero(); d];
        let mut b = vec![F::zero(); d];
        let mut u = vec![F::zero(); m];
        let mut scores = vec![F::zero(); i + 1];
        for (l, (lp, cache)) in params.layers.iter().zip(self.layers.iter_mut()).enumerate() {
            cache.x_in.extend_from_slice(&x);
            let r1 = rms_norm(&x, &lp.ln1, &mut a);
            cache.r1.push(r1);
            cache.a.extend_from_slice(&a);
            matvec(&a, &lp.wq, &mut q);
            matvec(&a, &lp.wk, &mut k);
            matvec(&a, &lp.wv, &mut v);
            cache.q.extend_from_slice(&q);
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);

            o.iter_mut().for_each(|e| *e = F::zero());
            for h in 0..heads {
                let qh = &q[h * hd..(h + 1) * hd];
                let mut mx = F::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &cache.k[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    mx = mx.max(*s);
                }
                let mut total = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                let oh = &mut o[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s /= total;
                    axpy(*s, &cache.v[j * d + h * hd..j * d + (h + 1) * hd], oh);
                }
                cache.probs.extend_from_slice(&scores);
            }
            cache.o.extend_from_slice(&o);
            matvec(&o, &lp.wo, &mut y);
            for (xi, &yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
            cache.x_mid.extend_from_slice(&x);
            let r2 = rms_norm(&x, &lp.ln2, &mut b);
            cache.r2.push(r2);
            cache.b.extend_from_slice(&b);
            matvec(&b, &lp.w1, &mut u);
            for (ui, &bi) in u.iter_mut().zip(&lp.b1) {
                *ui += bi;
            }
            cache.u.extend_from_slice(&u);
            for ui in u.iter_mut() {
                *ui = gelu(*ui);
            }
            cache.act.extend_from_slice(&u);
            matvec(&u, &lp.w2, &mut y);
            for ((xi, &yi), &bi) in x.iter_mut().zip(&y).zip(&lp.b2) {
                *xi += yi + bi;
            }
            if let Some((inj, row)) = inject {
                let src = &inj.layer(l)[row * d..(row + 1) * d];
                for (xi, &e) in x.iter_mut().zip(src) {
                    *xi += e;
                }
            }
            cache.h.extend_from_slice(&x);
        }
        self.rf.push(F::zero());
        self.fnorm.extend(std::iter::repeat(F::zero()).take(d));
        Ok(())
    }

    /// Logits of position `i` into `out`; caches the final norm for backward.
    pub(crate) fn logits_row(&mut self, params: &ModelParams<F>, i: usize, out: &mut [F]) {
        let d = params.config().embed_dim;
        let last = self.layers.last().expect("at least one layer");
        let h = &last.h[i * d..(i + 1) * d];
        let f = &mut self.fnorm[i * d..(i + 1) * d];
        self.rf[i] = rms_norm(h, &params.ln_f, f);
        matvec(f, &params.lm_head, out);
    }

    pub(crate) fn activations(&self, dim: usize) -> ActivationSet<F> {
        ActivationSet {
            seq_len: self.rows.len(),
            dim,
            layers: self.layers.iter().map(|c| c.h.clone()).collect(),
        }
    }
}

/// Which gradients [`backward`] should materialize beyond activations.
#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub image: bool,
    pub params: bool,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    /// Gradient with respect to every pixel, in image layout.
    pub image: Option<Vec<F>>,
    /// Gradient with respect to each post-block activation `h_l`.
    pub activations: ActivationSet<F>,
    pub params: Option<ModelParams<F>>,
}

/// Reverse pass. `dlogits` holds one `vocab`-length row per position in
/// `logit_rows` (sequence indices).
pub(crate) fn backward<F: Real>(
    params: &ModelParams<F>,
    state: &State<F>,
    logit_rows: std::ops::Range<usize>,
    dlogits: &[F],
    want: Want,
) -> Result<Gradients<F>> {
    let cfg = params.config();
    let d = cfg.embed_dim;
    let m = cfg.mlp_dim();
    let vsz = cfg.vocab_size;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let s_len = state.len();
    let scale = F::one() / F::from_usize_lossy(hd).sqrt();
    if dlogits.len() != logit_rows.len() * vsz || logit_rows.end > s_len {
        return Err(Error::Shape(format!(
            "dlogits has {} values for {} rows of width {vsz}",
            dlogits.len(),
            logit_rows.len()
        )));
    }
    let mut grads = if want.params {
        Some(ModelParams::zeros(*cfg)?)
    } else {
        None
    };

    // output head and final norm
    let last = state.layers.last().expect("at least one layer");
    let mut dh = vec![F::zero(); s_len * d];
    let mut df = vec![F::zero(); d];
    for (r, i) in logit_rows.clone().enumerate() {
        let dl = &dlogits[r * vsz..(r + 1) * vsz];
        df.iter_mut().for_each(|e| *e = F::zero());
        matvec_t(dl, &params.lm_head, &mut df);
        let f = &state.fnorm[i * d..(i + 1) * d];
        let h = &last.h[i * d..(i + 1) * d];
        match grads.as_mut() {
            Some(g) => {
                outer_acc(f, dl, &mut g.lm_head);
                rms_norm_back(h, &params.ln_f, state.rf[i], &df, &mut dh[i * d..(i + 1) * d], Some(&mut g.ln_f));
            }
            None => rms_norm_back(h, &params.ln_f, state.rf[i], &df, &mut dh[i * d..(i + 1) * d], None),
        }
    }

    let mut act_grads = vec![Vec::new(); cfg.layers];
    let mut dact = vec![F::zero(); m];
    let mut du = vec![F::zero(); m];
    let mut db = vec![F::zero(); d];
    let mut dxmid = vec![F::zero(); s_len * d];
    let mut dout = vec![F::zero(); s_len * d];
    let mut dq = vec![F::zero(); s_len * d];
    let mut dk = vec![F::zero(); s_len * d];
    let mut dv = vec![F::zero(); s_len * d];
    let mut da = vec![F::zero(); d];
    let mut dp = vec![F::zero(); s_len];

    for l in (0..cfg.layers).rev() {
        act_grads[l] = dh.clone();
        let lp = &params.layers[l];
        let c = &state.layers[l];
        let mut lg = grads.as_mut().map(|g| &mut g.layers[l]);

        // MLP: h = x_mid + act W2 + b2
        dxmid.copy_from_slice(&dh);
        for i in 0..s_len {
            let dz = &dh[i * d..(i + 1) * d];
            if dz.iter().all(|&e| e == F::zero()) {
                continue;
            }
            dact.iter_mut().for_each(|e| *e = F::zero());
            matvec_t(dz, &lp.w2, &mut dact);
            let u = &c.u[i * m..(i + 1) * m];
            for j in 0..m {
                du[j] = dact[j] * gelu_grad(u[j]);
            }
            db.iter_mut().for_each(|e| *e = F::zero());
            matvec_t(&du, &lp.w1, &mut db);
            let xm = &c.x_mid[i * d..(i + 1) * d];
            if let Some(g) = lg.as_deref_mut() {
                for (acc, &e) in g.b2.iter_mut().zip(dz) {
                    *acc += e;
                }
                outer_acc(&c.act[i * m..(i + 1) * m], dz, &mut g.w2);
                for (acc, &e) in g.b1.iter_mut().zip(&du) {
                    *acc += e;
                }
                outer_acc(&c.b[i * d..(i + 1) * d], &du, &mut g.w1);
                rms_norm_back(xm, &lp.ln2, c.r2[i], &db, &mut dxmid[i * d..(i + 1) * d], Some(&mut g.ln2));
            } else {
                rms_norm_back(xm, &lp.ln2, c.r2[i], &db, &mut dxmid[i * d..(i + 1) * d], None);
            }
        }

        // attention: x_mid = x_in + o Wo
        dq.iter_mut().for_each(|e| *e = F::zero());
        dk.iter_mut().for_each(|e| *e = F::zero());
        dv.iter_mut().for_each(|e| *e = F::zero());
        dout.iter_mut().for_each(|e| *e = F::zero());
        for i in 0..s_len {
            let dy = &dxmid[i * d..(i + 1) * d];
            matvec_t(dy, &lp.wo, &mut dout[i * d..(i + 1) * d]);
            if let Some(g) = lg.as_deref_mut() {
                outer_acc(&c.o[i * d..(i + 1) * d], dy, &mut g.wo);
            }
        }
        for i in 0..s_len {
            let base = heads * i * (i + 1) / 2;
            for h in 0..heads {
                let p = &c.probs[base + h * (i + 1)..base + (h + 1) * (i + 1)];
                let doh = &dout[i * d + h * hd..i * d + (h + 1) * hd];
                if doh.iter().all(|&e| e == F::zero()) {
                    continue;
                }
                let mut wsum = F::zero();
                for j in 0..=i {
                    dp[j] = dot(doh, &c.v[j * d + h * hd..j * d + (h + 1) * hd]);
                    wsum += p[j] * dp[j];
                    axpy(p[j], doh, &mut dv[j * d + h * hd..j * d + (h + 1) * hd]);
                }
                let qh = &c.q[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - wsum) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    axpy(ds, &c.k[j * d + h * hd..j * d + (h + 1) * hd], &mut dq[i * d + h * hd..i * d + (h + 1) * hd]);
                    axpy(ds, qh, &mut dk[j * d + h * hd..j * d + (h + 1) * hd]);
                }
            }
        }
        // dh now becomes the gradient at this layer's input
        dh.copy_from_slice(&dxmid);
        for i in 0..s_len {
            da.iter_mut().for_each(|e| *e = F::zero());
            let (qi, ki, vi) = (
                &dq[i * d..(i + 1) * d],
                &dk[i * d..(i + 1) * d],
                &dv[i * d..(i + 1) * d],
            );
            matvec_t(qi, &lp.wq, &mut da);
            matvec_t(ki, &lp.wk, &mut da);
            matvec_t(vi, &lp.wv, &mut da);
            let xin = &c.x_in[i * d..(i + 1) * d];
            if let Some(g) = lg.as_deref_mut() {
                let a = &c.a[i * d..(i + 1) * d];
                outer_acc(a, qi, &mut g.wq);
                outer_acc(a, ki, &mut g.wk);
                outer_acc(a, vi, &mut g.wv);
                rms_norm_back(xin, &lp.ln1, c.r1[i], &da, &mut dh[i * d..(i + 1) * d], Some(&mut g.ln1));
            } else {
                rms_norm_back(xin, &lp.ln1, c.r1[i], &da, &mut dh[i * d..(i + 1) * d], None);
            }
        }
    }

    // embeddings
    let mut dpatches = if want.image {
        Some(vec![F::zero(); state.patches.len()])
    } else {
        None
    };
    let pd = cfg.patch_dim();
    for (i, row) in state.rows.iter().enumerate() {
        let dx = &dh[i * d..(i + 1) * d];
        match *row {
            RowInput::Patch(n) => {
                if let Some(dp) = dpatches.as_mut() {
                    matvec_t(dx, &params.patch_w, &mut dp[n * pd..(n + 1) * pd]);
                }
                if let Some(g) = grads.as_mut() {
                    outer_acc(&state.patches[n * pd..(n + 1) * pd], dx, &mut g.patch_w);
                    for (acc, &e) in g.patch_b.iter_mut().zip(dx) {
                        *acc += e;
                    }
                }
            }
            RowInput::Token(t) => {
                if let Some(g) = grads.as_mut() {
                    let t = t as usize;
                    for (acc, &e) in g.tok_emb[t * d..(t + 1) * d].iter_mut().zip(dx) {
                        *acc += e;
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            for (acc, &e) in g.pos_emb[i * d..(i + 1) * d].iter_mut().zip(dx) {
                *acc += e;
            }
        }
    }

    Ok(Gradients {
        image: dpatches.map(|dp| scatter_patches(params, &dp)),
        activations: ActivationSet {
            seq_len: s_len,
            dim: d,
            layers: act_grads,
        },
        params: grads,
    })
}
