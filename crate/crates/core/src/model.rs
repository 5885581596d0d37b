//! Decoder-only transformer with hand-written reverse mode.
//!
//! Pre-norm blocks (layer norm, causal multi-head attention, GELU MLP) over
//! learned token and absolute position embeddings, a final layer norm and an
//! untied output projection. All parameters live in one flat array; the
//! [`Layout`] gives each tensor's offset. Every routine is generic over
//! [`Real`] so the same code runs in f64 (reference) and f32 (fast path).

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_col_sums, add_row_bias, gemm, Real, View, ViewMut};
use crate::objective::masked_xent;
use crate::rng::rng_for;
use crate::tokenization::BYTE_VOCAB_SIZE;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Rows of the attention score matrix processed together; only columns up
/// to the end of the block are computed, which skips most masked entries.
const ATTN_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab: BYTE_VOCAB_SIZE,
            max_positions: 2048,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Half-depth, half-width variant used as the small end of size sweeps.
    pub fn small() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            ..ModelConfig::default()
        }
    }

    pub fn medium() -> Self {
        ModelConfig::default()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "medium" | "default" => Some(Self::medium()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidModelConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidModelConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockOffsets {
    pub ln1: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Offsets into the flat parameter array. Layer norms store gain then bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub blocks: Vec<BlockOffsets>,
    pub ln_f: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(cfg.max_positions * d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockOffsets {
                ln1: take(2 * d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2: take(2 * d),
                w_1: take(d * ff),
                b_1: take(ff),
                w_2: take(ff * d),
                b_2: take(d),
            })
            .collect();
        let ln_f = take(2 * d);
        let w_out = take(d * v);
        let b_out = take(v);
        Layout {
            tok,
            pos,
            blocks,
            ln_f,
            w_out,
            b_out,
            total: at,
        }
    }

    /// True for weight matrices and embeddings, false for biases and
    /// layer-norm parameters. Decoupled weight decay applies only where true.
    pub fn decay_mask(&self, cfg: &ModelConfig) -> Vec<bool> {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
        let mut mask = vec![false; self.total];
        let mut mark = |o: usize, n: usize| mask[o..o + n].fill(true);
        mark(self.tok, v * d);
        mark(self.pos, cfg.max_positions * d);
        for b in &self.blocks {
            mark(b.w_qkv, 3 * d * d);
            mark(b.w_o, d * d);
            mark(b.w_1, d * ff);
            mark(b.w_2, ff * d);
        }
        mark(self.w_out, d * v);
        mask
    }
}

/// Model configuration plus flat f64 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl Params {
    /// Gaussian initialization seeded by `config.seed`. Residual output
    /// projections are scaled down by `sqrt(2 * n_layers)`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let lay = Layout::new(config);
        let (d, ff) = (config.d_model, config.d_ff);
        let mut data = vec![0.0; lay.total];
        let mut rng = rng_for(config.seed, &["model-init"]);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let mut fill = |slice: &mut [f64], std: f64| {
            let n = normal(std);
            for x in slice {
                *x = n.sample(&mut rng);
            }
        };
        let resid = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        fill(&mut data[lay.tok..lay.tok + config.vocab * d], INIT_STD);
        fill(&mut data[lay.pos..lay.pos + config.max_positions * d], INIT_STD);
        for b in &lay.blocks {
            data[b.ln1..b.ln1 + d].fill(1.0);
            data[b.ln2..b.ln2 + d].fill(1.0);
            fill(&mut data[b.w_qkv..b.w_qkv + 3 * d * d], INIT_STD);
            fill(&mut data[b.w_o..b.w_o + d * d], resid);
            fill(&mut data[b.w_1..b.w_1 + d * ff], INIT_STD);
            fill(&mut data[b.w_2..b.w_2 + ff * d], resid);
        }
        data[lay.ln_f..lay.ln_f + d].fill(1.0);
        fill(&mut data[lay.w_out..lay.w_out + d * config.vocab], INIT_STD);
        Ok(Params {
            config: config.clone(),
            data,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn cast<F: Real>(&self) -> Vec<F> {
        self.data.iter().map(|&x| F::of(x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One training sequence: token ids and the loss mask over positions.
#[derive(Clone, Copy, Debug)]
pub struct SeqRef<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [bool],
}

fn layer_norm<F: Real>(x: &[F], d: usize, gb: &[F], out: &mut [F], xhat: Option<&mut [F]>, rstd: Option<&mut [F]>) {
    let (g, b) = gb.split_at(d);
    let eps = F::of(LN_EPS);
    let inv_d = F::of(1.0 / d as f64);
    let mut xhat = xhat;
    let mut rstd = rstd;
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            o[j] = xh * g[j] + b[j];
            if let Some(xs) = xhat.as_deref_mut() {
                xs[r * d + j] = xh;
            }
        }
        if let Some(rsv) = rstd.as_deref_mut() {
            rsv[r] = rs;
        }
    }
}

/// Backward of layer norm: accumulates gain/bias gradients into `dgb` and
/// adds the input gradient into `dx`.
fn layer_norm_backward<F: Real>(dy: &[F], xhat: &[F], rstd: &[F], d: usize, gb: &[F], dgb: &mut [F], dx: &mut [F]) {
    let g = &gb[..d];
    let (dg, db) = dgb.split_at_mut(d);
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xr[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<F: Real>(u: F) -> F {
    // tanh through exp, which is markedly cheaper than libm tanh
    let z = F::of(2.0 * GELU_C) * (u + F::of(GELU_A) * u * u * u);
    F::one() - F::of(2.0) / (z.exp() + F::one())
}

/// GELU (tanh form) given the precomputed inner tanh.
fn gelu<F: Real>(u: F, t: F) -> F {
    F::of(0.5) * u * (F::one() + t)
}

fn gelu_grad<F: Real>(u: F, t: F) -> F {
    let half = F::of(0.5);
    half * (F::one() + t) + half * u * (F::one() - t * t) * F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * u * u)
}

/// Causal attention for one head over query rows `[q0, q0 + nq)` of a
/// sequence whose keys/values occupy rows `[0, kv_len)`. Query row `i`
/// (absolute position `pos0 + i`) sees keys `0..=pos0 + i`.
///
/// `probs`, when given, receives the softmax rows with stride `kv_stride`.
#[allow(clippy::too_many_arguments)]
fn attend_head<F: Real>(
    q: View<'_, F>,
    k: View<'_, F>,
    v: View<'_, F>,
    pos0: usize,
    scale: F,
    out: &mut [F],
    out_stride: usize,
    mut probs: Option<(&mut [F], usize)>,
    scratch: &mut Vec<F>,
) {
    let nq = q.rows;
    let dh = q.cols;
    let mut r0 = 0;
    while r0 < nq {
        let r1 = (r0 + ATTN_BLOCK).min(nq);
        let rb = r1 - r0;
        let ncols = pos0 + r1;
        scratch.clear();
        scratch.resize(rb * ncols, F::zero());
        gemm(
            scale,
            q.block(r0, rb, 0, dh),
            k.block(0, ncols, 0, dh).t(),
            F::zero(),
            ViewMut::new(scratch, rb, ncols),
        );
        for i in 0..rb {
            let last = pos0 + r0 + i;
            let row = &mut scratch[i * ncols..(i + 1) * ncols];
            let max = row[..=last].iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for s in &mut row[..=last] {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = F::one() / sum;
            for s in &mut row[..=last] {
                *s *= inv;
            }
            row[last + 1..].fill(F::zero());
            if let Some((p, stride)) = probs.as_mut() {
                p[(r0 + i) * *stride..(r0 + i) * *stride + ncols].copy_from_slice(row);
            }
        }
        gemm(
            F::one(),
            View::new(scratch, rb, ncols),
            v.block(0, ncols, 0, dh),
            F::zero(),
            ViewMut::strided(&mut out[r0 * out_stride..], rb, dh, out_stride),
        );
        r0 = r1;
    }
}

/// Activations of one block kept for the backward pass.
struct BlockCache<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    h2: Vec<F>,
    u: Vec<F>,
    t: Vec<F>,
    a: Vec<F>,
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.len() > cfg.max_positions {
        return Err(Error::TooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary {}", cfg.vocab)));
    }
    Ok(())
}

/// Masked loss of one sequence and `weight` times its gradient, added into
/// `grad`.
fn sequence_loss_grad<F: Real>(cfg: &ModelConfig, lay: &Layout, w: &[F], seq: SeqRef<'_>, weight: F, grad: &mut [F]) -> Result<f64> {
    let ids = seq.ids;
    check_ids(cfg, ids)?;
    if seq.mask.len() != ids.len() {
        return Err(Error::Shape(format!("mask length {} for {} tokens", seq.mask.len(), ids.len())));
    }
    let t = ids.len();
    let (d, ff, v, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_heads, cfg.head_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut scratch = Vec::new();

    let mut x = vec![F::zero(); t * d];
    for (i, &id) in ids.iter().enumerate() {
        let e = &w[lay.tok + id as usize * d..][..d];
        let p = &w[lay.pos + i * d..][..d];
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for b in &lay.blocks {
        let mut c = BlockCache {
            xhat1: vec![F::zero(); t * d],
            rstd1: vec![F::zero(); t],
            h1: vec![F::zero(); t * d],
            qkv: vec![F::zero(); t * 3 * d],
            probs: vec![F::zero(); nh * t * t],
            att: vec![F::zero(); t * d],
            xhat2: vec![F::zero(); t * d],
            rstd2: vec![F::zero(); t],
            h2: vec![F::zero(); t * d],
            u: vec![F::zero(); t * ff],
            t: vec![F::zero(); t * ff],
            a: vec![F::zero(); t * ff],
        };
        layer_norm(&x, d, &w[b.ln1..b.ln1 + 2 * d], &mut c.h1, Some(&mut c.xhat1), Some(&mut c.rstd1));
        gemm(
            F::one(),
            View::new(&c.h1, t, d),
            View::new(&w[b.w_qkv..], d, 3 * d),
            F::zero(),
            ViewMut::new(&mut c.qkv, t, 3 * d),
        );
        add_row_bias(&mut c.qkv, &w[b.b_qkv..b.b_qkv + 3 * d]);
        for h in 0..nh {
            let q = View::strided(&c.qkv[h * dh..], t, dh, 3 * d);
            let k = View::strided(&c.qkv[d + h * dh..], t, dh, 3 * d);
            let vv = View::strided(&c.qkv[2 * d + h * dh..], t, dh, 3 * d);
            let probs = &mut c.probs[h * t * t..(h + 1) * t * t];
            attend_head(q, k, vv, 0, scale, &mut c.att[h * dh..], d, Some((probs, t)), &mut scratch);
        }
        gemm(
            F::one(),
            View::new(&c.att, t, d),
            View::new(&w[b.w_o..], d, d),
            F::one(),
            ViewMut::new(&mut x, t, d),
        );
        add_row_bias(&mut x, &w[b.b_o..b.b_o + d]);
        layer_norm(&x, d, &w[b.ln2..b.ln2 + 2 * d], &mut c.h2, Some(&mut c.xhat2), Some(&mut c.rstd2));
        gemm(
            F::one(),
            View::new(&c.h2, t, d),
            View::new(&w[b.w_1..], d, ff),
            F::zero(),
            ViewMut::new(&mut c.u, t, ff),
        );
        add_row_bias(&mut c.u, &w[b.b_1..b.b_1 + ff]);
        for ((a, t), &u) in c.a.iter_mut().zip(c.t.iter_mut()).zip(&c.u) {
            *t = gelu_tanh(u);
            *a = gelu(u, *t);
        }
        gemm(
            F::one(),
            View::new(&c.a, t, ff),
            View::new(&w[b.w_2..], ff, d),
            F::one(),
            ViewMut::new(&mut x, t, d),
        );
        add_row_bias(&mut x, &w[b.b_2..b.b_2 + d]);
        caches.push(c);
    }

    let mut xhat_f = vec![F::zero(); t * d];
    let mut rstd_f = vec![F::zero(); t];
    let mut hf = vec![F::zero(); t * d];
    layer_norm(&x, d, &w[lay.ln_f..lay.ln_f + 2 * d], &mut hf, Some(&mut xhat_f), Some(&mut rstd_f));
    let mut logits = vec![F::zero(); t * v];
    gemm(
        F::one(),
        View::new(&hf, t, d),
        View::new(&w[lay.w_out..], d, v),
        F::zero(),
        ViewMut::new(&mut logits, t, v),
    );
    add_row_bias(&mut logits, &w[lay.b_out..lay.b_out + v]);

    let mut dlogits = vec![F::zero(); t * v];
    let loss = masked_xent(&logits, v, ids, seq.mask, Some((weight, &mut dlogits)))?;
    drop(logits);

    // output projection and final norm
    gemm(
        F::one(),
        View::new(&hf, t, d).t(),
        View::new(&dlogits, t, v),
        F::one(),
        ViewMut::new(&mut grad[lay.w_out..lay.w_out + d * v], d, v),
    );
    add_col_sums(&dlogits, &mut grad[lay.b_out..lay.b_out + v]);
    let mut dhf = vec![F::zero(); t * d];
    gemm(
        F::one(),
        View::new(&dlogits, t, v),
        View::new(&w[lay.w_out..], d, v).t(),
        F::zero(),
        ViewMut::new(&mut dhf, t, d),
    );
    drop(dlogits);
    let mut dx = vec![F::zero(); t * d];
    layer_norm_backward(
        &dhf,
        &xhat_f,
        &rstd_f,
        d,
        &w[lay.ln_f..lay.ln_f + 2 * d],
        &mut grad[lay.ln_f..lay.ln_f + 2 * d],
        &mut dx,
    );

    let mut da = vec![F::zero(); t * ff];
    let mut dnorm = vec![F::zero(); t * d];
    let mut datt = vec![F::zero(); t * d];
    let mut dqkv = vec![F::zero(); t * 3 * d];
    for (b, c) in lay.blocks.iter().zip(&caches).rev() {
        // MLP
        gemm(
            F::one(),
            View::new(&c.a, t, ff).t(),
            View::new(&dx, t, d),
            F::one(),
            ViewMut::new(&mut grad[b.w_2..b.w_2 + ff * d], ff, d),
        );
        add_col_sums(&dx, &mut grad[b.b_2..b.b_2 + d]);
        gemm(
            F::one(),
            View::new(&dx, t, d),
            View::new(&w[b.w_2..], ff, d).t(),
            F::zero(),
            ViewMut::new(&mut da, t, ff),
        );
        for ((g, &u), &th) in da.iter_mut().zip(&c.u).zip(&c.t) {
            *g *= gelu_grad(u, th);
        }
        gemm(
            F::one(),
            View::new(&c.h2, t, d).t(),
            View::new(&da, t, ff),
            F::one(),
            ViewMut::new(&mut grad[b.w_1..b.w_1 + d * ff], d, ff),
        );
        add_col_sums(&da, &mut grad[b.b_1..b.b_1 + ff]);
        gemm(
            F::one(),
            View::new(&da, t, ff),
            View::new(&w[b.w_1..], d, ff).t(),
            F::zero(),
            ViewMut::new(&mut dnorm, t, d),
        );
        layer_norm_backward(&dnorm, &c.xhat2, &c.rstd2, d, &w[b.ln2..b.ln2 + 2 * d], &mut grad[b.ln2..b.ln2 + 2 * d], &mut dx);

        // attention
        gemm(
            F::one(),
            View::new(&c.att, t, d).t(),
            View::new(&dx, t, d),
            F::one(),
            ViewMut::new(&mut grad[b.w_o..b.w_o + d * d], d, d),
        );
        add_col_sums(&dx, &mut grad[b.b_o..b.b_o + d]);
        gemm(
            F::one(),
            View::new(&dx, t, d),
            View::new(&w[b.w_o..], d, d).t(),
            F::zero(),
            ViewMut::new(&mut datt, t, d),
        );
        dqkv.fill(F::zero());
        for h in 0..nh {
            attention_head_backward(c, &datt, &mut dqkv, h, t, d, dh, scale, &mut scratch);
        }
        gemm(
            F::one(),
            View::new(&c.h1, t, d).t(),
            View::new(&dqkv, t, 3 * d),
            F::one(),
            ViewMut::new(&mut grad[b.w_qkv..b.w_qkv + 3 * d * d], d, 3 * d),
        );
        add_col_sums(&dqkv, &mut grad[b.b_qkv..b.b_qkv + 3 * d]);
        gemm(
            F::one(),
            View::new(&dqkv, t, 3 * d),
            View::new(&w[b.w_qkv..], d, 3 * d).t(),
            F::zero(),
            ViewMut::new(&mut dnorm, t, d),
        );
        layer_norm_backward(&dnorm, &c.xhat1, &c.rstd1, d, &w[b.ln1..b.ln1 + 2 * d], &mut grad[b.ln1..b.ln1 + 2 * d], &mut dx);
    }

    for (i, &id) in ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = &mut grad[lay.tok + id as usize * d..][..d];
        for j in 0..d {
            te[j] += row[j];
        }
        let pe = &mut grad[lay.pos + i * d..][..d];
        for j in 0..d {
            pe[j] += row[j];
        }
    }
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn attention_head_backward<F: Real>(
    c: &BlockCache<F>,
    datt: &[F],
    dqkv: &mut [F],
    h: usize,
    t: usize,
    d: usize,
    dh: usize,
    scale: F,
    scratch: &mut Vec<F>,
) {
    let probs = &c.probs[h * t * t..(h + 1) * t * t];
    let q = View::strided(&c.qkv[h * dh..], t, dh, 3 * d);
    let k = View::strided(&c.qkv[d + h * dh..], t, dh, 3 * d);
    let vv = View::strided(&c.qkv[2 * d + h * dh..], t, dh, 3 * d);
    let dout = View::strided(&datt[h * dh..], t, dh, d);
    let mut r0 = 0;
    while r0 < t {
        let r1 = (r0 + ATTN_BLOCK).min(t);
        let rb = r1 - r0;
        let p = View::strided(&probs[r0 * t..], rb, r1, t);
        let dob = dout.block(r0, rb, 0, dh);
        // dP = dO V^T
        scratch.clear();
        scratch.resize(rb * r1, F::zero());
        gemm(F::one(), dob, vv.block(0, r1, 0, dh).t(), F::zero(), ViewMut::new(scratch, rb, r1));
        // dV += P^T dO
        gemm(F::one(), p.t(), dob, F::one(), ViewMut::strided(&mut dqkv[2 * d + h * dh..], r1, dh, 3 * d));
        // dS = P * (dP - rowsum(dP * P)) * scale
        for i in 0..rb {
            let last = r0 + i;
            let prow = &probs[(r0 + i) * t..(r0 + i) * t + r1];
            let drow = &mut scratch[i * r1..(i + 1) * r1];
            let dot: F = (0..=last).map(|j| drow[j] * prow[j]).sum();
            for j in 0..=last {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
            drow[last + 1..].fill(F::zero());
        }
        let ds = View::new(scratch, rb, r1);
        // dQ = dS K, dK += dS^T Q
        gemm(
            F::one(),
            ds,
            k.block(0, r1, 0, dh),
            F::zero(),
            ViewMut::strided(&mut dqkv[r0 * 3 * d + h * dh..], rb, dh, 3 * d),
        );
        gemm(
            F::one(),
            ds.t(),
            q.block(r0, rb, 0, dh),
            F::one(),
            ViewMut::strided(&mut dqkv[d + h * dh..], r1, dh, 3 * d),
        );
        r0 = r1;
    }
}

/// Mean over sequences of each sequence's masked mean loss, and its
/// gradient with respect to every parameter.
pub fn loss_and_grad<F: Real>(cfg: &ModelConfig, w: &[F], batch: &[SeqRef<'_>]) -> Result<(f64, Vec<F>)> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = accumulate_grad(cfg, w, batch, &mut grad)?;
    Ok((loss, grad))
}

/// Like [`loss_and_grad`] but adds into an existing gradient buffer, so
/// micro-batches can be accumulated in a fixed order.
pub fn accumulate_grad<F: Real>(cfg: &ModelConfig, w: &[F], batch: &[SeqRef<'_>], grad: &mut [F]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let lay = Layout::new(cfg);
    if w.len() != lay.total || grad.len() != lay.total {
        return Err(Error::Shape(format!("{} parameters for a layout of {}", w.len(), lay.total)));
    }
    let weight = F::of(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for seq in batch {
        total += sequence_loss_grad(cfg, &lay, w, *seq, weight, grad)?;
    }
    Ok(total / batch.len() as f64)
}

/// Reference f64 gradient of the batch loss.
pub fn grad(params: &Params, batch: &[SeqRef<'_>]) -> Result<(f64, Vec<f64>)> {
    loss_and_grad(&params.config, &params.data, batch)
}

/// Batch loss without gradients (evaluated through the inference path).
pub fn batch_loss<F: Real>(cfg: &ModelConfig, w: &[F], batch: &[SeqRef<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for seq in batch {
        let logits = Session::new(cfg, w)?.extend(seq.ids, true)?;
        total += masked_xent(&logits, cfg.vocab, seq.ids, seq.mask, None)?;
    }
    Ok(total / batch.len() as f64)
}

/// Incremental inference state: cached keys and values of every layer for
/// the tokens fed so far.
pub struct Session<'w, F> {
    cfg: &'w ModelConfig,
    lay: Layout,
    w: &'w [F],
    tokens: Vec<u32>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    last_logits: Vec<F>,
    scratch: Vec<F>,
}

impl<'w, F: Real> Session<'w, F> {
    pub fn new(cfg: &'w ModelConfig, w: &'w [F]) -> Result<Self> {
        cfg.validate()?;
        let lay = Layout::new(cfg);
        if w.len() != lay.total {
            return Err(Error::Shape(format!("{} parameters for a layout of {}", w.len(), lay.total)));
        }
        Ok(Session {
            cfg,
            lay,
            w,
            tokens: Vec::new(),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            last_logits: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Logits at the last fed position.
    pub fn last_logits(&self) -> &[F] {
        &self.last_logits
    }

    /// Forget everything after the first `n` tokens. The last-position
    /// logits become unavailable until more tokens are fed.
    pub fn truncate(&mut self, n: usize) {
        if n < self.tokens.len() {
            let d = self.cfg.d_model;
            self.tokens.truncate(n);
            for kv in self.keys.iter_mut().chain(self.values.iter_mut()) {
                kv.truncate(n * d);
            }
            self.last_logits.clear();
        }
    }

    /// Make the session hold exactly `ids`, reusing the longest cached
    /// prefix, and return the logits at the last position.
    pub fn sync(&mut self, ids: &[u32]) -> Result<&[F]> {
        if ids.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let lcp = self.tokens.iter().zip(ids).take_while(|(a, b)| a == b).count();
        if lcp == ids.len() && lcp == self.tokens.len() && !self.last_logits.is_empty() {
            return Ok(&self.last_logits);
        }
        // re-feed at least one token to recover last-position logits
        let keep = lcp.min(ids.len() - 1);
        self.truncate(keep);
        self.extend(&ids[keep..], false)?;
        Ok(&self.last_logits)
    }

    /// Feed `ids` after the cached tokens. Returns logits for every new
    /// position when `all_logits`, otherwise only the last one.
    pub fn extend(&mut self, ids: &[u32], all_logits: bool) -> Result<Vec<F>> {
        if ids.is_empty() {
            return Err(Error::Empty("tokens"));
        }
        let cfg = self.cfg;
        let pos0 = self.tokens.len();
        let total = pos0 + ids.len();
        if total > cfg.max_positions {
            return Err(Error::TooLong {
                len: total,
                max: cfg.max_positions,
            });
        }
        check_ids(cfg, ids)?;
        let w = self.w;
        let lay = &self.lay;
        let n = ids.len();
        let (d, ff, v, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_heads, cfg.head_dim());
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut x = vec![F::zero(); n * d];
        for (i, &id) in ids.iter().enumerate() {
            let e = &w[lay.tok + id as usize * d..][..d];
            let p = &w[lay.pos + (pos0 + i) * d..][..d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        let mut h1 = vec![F::zero(); n * d];
        let mut qkv = vec![F::zero(); n * 3 * d];
        let mut att = vec![F::zero(); n * d];
        let mut u = vec![F::zero(); n * ff];
        for (l, b) in lay.blocks.iter().enumerate() {
            layer_norm(&x, d, &w[b.ln1..b.ln1 + 2 * d], &mut h1, None, None);
            gemm(
                F::one(),
                View::new(&h1, n, d),
                View::new(&w[b.w_qkv..], d, 3 * d),
                F::zero(),
                ViewMut::new(&mut qkv, n, 3 * d),
            );
            add_row_bias(&mut qkv, &w[b.b_qkv..b.b_qkv + 3 * d]);
            let keys = &mut self.keys[l];
            let values = &mut self.values[l];
            for row in qkv.chunks_exact(3 * d) {
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }
            for h in 0..nh {
                let q = View::strided(&qkv[h * dh..], n, dh, 3 * d);
                let k = View::strided(&keys[h * dh..], total, dh, d);
                let vv = View::strided(&values[h * dh..], total, dh, d);
                attend_head(q, k, vv, pos0, scale, &mut att[h * dh..], d, None, &mut self.scratch);
            }
            gemm(
                F::one(),
                View::new(&att, n, d),
                View::new(&w[b.w_o..], d, d),
                F::one(),
                ViewMut::new(&mut x, n, d),
            );
            add_row_bias(&mut x, &w[b.b_o..b.b_o + d]);
            layer_norm(&x, d, &w[b.ln2..b.ln2 + 2 * d], &mut h1, None, None);
            gemm(
                F::one(),
                View::new(&h1, n, d),
                View::new(&w[b.w_1..], d, ff),
                F::zero(),
                ViewMut::new(&mut u, n, ff),
            );
            add_row_bias(&mut u, &w[b.b_1..b.b_1 + ff]);
            for a in u.iter_mut() {
                *a = gelu(*a, gelu_tanh(*a));
            }
            gemm(
                F::one(),
                View::new(&u, n, ff),
                View::new(&w[b.w_2..], ff, d),
                F::one(),
                ViewMut::new(&mut x, n, d),
            );
            add_row_bias(&mut x, &w[b.b_2..b.b_2 + d]);
        }
        let (rows, xs) = if all_logits { (n, &x[..]) } else { (1, &x[(n - 1) * d..]) };
        let mut hf = vec![F::zero(); rows * d];
        layer_norm(xs, d, &w[lay.ln_f..lay.ln_f + 2 * d], &mut hf, None, None);
        let mut logits = vec![F::zero(); rows * v];
        gemm(
            F::one(),
            View::new(&hf, rows, d),
            View::new(&w[lay.w_out..], d, v),
            F::zero(),
            ViewMut::new(&mut logits, rows, v),
        );
        add_row_bias(&mut logits, &w[lay.b_out..lay.b_out + v]);
        self.tokens.extend_from_slice(ids);
        self.last_logits.clear();
        self.last_logits.extend_from_slice(&logits[(rows - 1) * v..]);
        Ok(logits)
    }
}

/// Logits for every position, row-major `[len, vocab]`.
pub fn forward<F: Real>(cfg: &ModelConfig, w: &[F], ids: &[u32]) -> Result<Vec<F>> {
    check_ids(cfg, ids)?;
    Session::new(cfg, w)?.extend(ids, true)
}

fn argmax<F: Real>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn log_softmax_at<F: Real>(row: &[F], idx: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.f64()));
    let sum: f64 = row.iter().map(|&z| (z.f64() - max).exp()).sum();
    row[idx].f64() - max - sum.ln()
}

/// Greedy decoding after `prefix`: appends the argmax token (lowest id on
/// ties) until `stop` is produced or `max_steps` tokens were generated. The
/// stop token is included in the output.
pub fn greedy_decode<F: Real>(session: &mut Session<'_, F>, prefix: &[u32], max_steps: usize, stop: u32) -> Result<Vec<u32>> {
    if max_steps == 0 {
        return Err(Error::Shape("max_steps must be at least 1".into()));
    }
    let mut logits = session.sync(prefix)?.to_vec();
    let mut out = Vec::new();
    loop {
        let tok = argmax(&logits);
        out.push(tok);
        if tok == stop || out.len() == max_steps {
            break;
        }
        logits = session.extend(&[tok], false)?;
    }
    session.truncate(prefix.len());
    Ok(out)
}

/// Teacher-forced log-likelihood of each verbalization after `prefix`.
pub fn class_log_likelihoods<F: Real>(session: &mut Session<'_, F>, prefix: &[u32], classes: &[Vec<u32>]) -> Result<Vec<f64>> {
    if classes.len() < 2 {
        return Err(Error::Shape(format!("class scoring needs at least two classes, got {}", classes.len())));
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::Empty("class verbalization"));
    }
    let first = session.sync(prefix)?.to_vec();
    let base = session.len();
    let mut scores = Vec::with_capacity(classes.len());
    for verb in classes {
        let mut lp = log_softmax_at(&first, verb[0] as usize);
        if verb.len() > 1 {
            let logits = session.extend(&verb[..verb.len() - 1], true)?;
            let v = session.cfg.vocab;
            for (j, &tok) in verb[1..].iter().enumerate() {
                lp += log_softmax_at(&logits[j * v..(j + 1) * v], tok as usize);
            }
            session.truncate(base);
        }
        scores.push(lp);
    }
    Ok(scores)
}

/// Probability per class: softmax over the verbalization log-likelihoods.
pub fn class_scores<F: Real>(session: &mut Session<'_, F>, prefix: &[u32], classes: &[Vec<u32>]) -> Result<Vec<f64>> {
    Ok(softmax(&class_log_likelihoods(session, prefix, classes)?))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GTLCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    step: u64,
    n_params: usize,
    has_optimizer: bool,
    meta: std::collections::BTreeMap<String, String>,
}

/// Parameters, training step and optional optimizer state.
///
/// File layout: 8-byte magic, u32 version, u64 header length, JSON header,
/// then little-endian f64 arrays (parameters, then Adam m and v if present).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub step: u64,
    pub optimizer: Option<AdamState>,
    pub meta: std::collections::BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.params.data.len();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            step: self.step,
            n_params: n,
            has_optimizer: self.optimizer.is_some(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(20 + json.len() + 8 * n * 3);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |xs: &[f64]| {
            for x in xs {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&self.params.data);
        if let Some(opt) = &self.optimizer {
            put(&opt.m);
            put(&opt.v);
        }
        out.write_all(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if buf.len() < 20 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        let body = buf.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        header.config.validate()?;
        let n = header.n_params;
        if n != header.config.n_params() {
            return Err(bad("parameter count does not match config"));
        }
        let arrays = if header.has_optimizer { 3 } else { 1 };
        let data = &buf[20 + hlen..];
        if data.len() != arrays * n * 8 {
            return Err(bad("parameter payload has the wrong size"));
        }
        let read = |k: usize| -> Vec<f64> {
            data[k * n * 8..(k + 1) * n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        Ok(Checkpoint {
            params: Params {
                config: header.config,
                data: read(0),
            },
            step: header.step,
            optimizer: header.has_optimizer.then(|| AdamState { m: read(1), v: read(2) }),
            meta: header.meta,
        })
    }

    /// Write through a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(out);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
