//! Manual reverse-mode gradients, optimizers and the supervised training loop.
//!
//! The forward pass in [`crate::model`] is replayed here with intermediate
//! activations cached per block, then walked backwards to fill a
//! [`ModelGrads`] that mirrors every trainable tensor. Losses plug in as a
//! closure from last-position logits to `(loss, d_logits_last)`, which covers
//! plain cross-entropy, restricted-readout cross-entropy and distillation.
//!
//! Batch members are independent, so with the `parallel` feature their
//! forward/backward passes run on the thread pool; the per-sample gradients
//! are then folded in sample order, keeping updates bitwise deterministic.

use crate::error::Result;
use crate::model::{NormKind, PlainModel, NORM_EPS};
use crate::tensor::{self, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// ============================================================
// Cached forward pass
// ============================================================

struct BlockCache {
    x_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    ctx: Matrix,
    r1: Matrix,
    vn: Matrix,
    ffa: Matrix,
    ffb: Matrix,
    gated: Matrix,
    r2: Matrix,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_y: Matrix,
    logits: Matrix,
}

fn forward_cached(model: &PlainModel, ids: &[u32]) -> Result<ForwardCache> {
    let cfg = &model.config;
    let mut x = crate::model::embed(model, ids)?;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let q = tensor::matmul(&x, &b.w_q)?;
        let k = tensor::matmul(&x, &b.w_k)?;
        let v = tensor::matmul(&x, &b.w_v)?;
        let scores = tensor::matmul(&q, &tensor::transpose(&k))?;
        let attn = tensor::softmax_rows(&scores, (cfg.attn_scale() as f64).sqrt());
        let ctx = tensor::matmul(&attn, &v)?;
        let u = tensor::matmul(&ctx, &b.w_o)?;
        let r1 = tensor::add(&u, &x)?;
        let vn = crate::model::norm(cfg.norm_kind, &r1, &b.gamma1, &b.beta1)?;
        let ffa = tensor::matmul(&vn, &b.w_1)?;
        let ffb = tensor::matmul(&vn, &b.w_3)?;
        let gated = tensor::mul_elem(&tensor::silu(&ffa), &ffb)?;
        let z = tensor::matmul(&gated, &b.w_2)?;
        let r2 = tensor::add(&z, &vn)?;
        let y = crate::model::norm(cfg.norm_kind, &r2, &b.gamma2, &b.beta2)?;
        blocks.push(BlockCache {
            x_in: x,
            q,
            k,
            v,
            attn,
            ctx,
            r1,
            vn,
            ffa,
            ffb,
            gated,
            r2,
        });
        x = y;
    }
    let logits = tensor::matmul(&x, &model.w_cls)?;
    Ok(ForwardCache {
        blocks,
        final_y: x,
        logits,
    })
}

// ============================================================
// Gradients
// ============================================================

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub w_3: Matrix,
    pub w_2: Matrix,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub w_emb: Matrix,
    pub pos_emb: Option<Matrix>,
    pub blocks: Vec<BlockGrads>,
    pub w_cls: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(model: &PlainModel) -> Self {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModelGrads {
            w_emb: zero(&model.w_emb),
            pos_emb: model.pos_emb.as_ref().map(zero),
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    w_q: zero(&b.w_q),
                    w_k: zero(&b.w_k),
                    w_v: zero(&b.w_v),
                    w_o: zero(&b.w_o),
                    w_1: zero(&b.w_1),
                    w_3: zero(&b.w_3),
                    w_2: zero(&b.w_2),
                    gamma1: vec![0.0; b.gamma1.len()],
                    beta1: vec![0.0; b.beta1.len()],
                    gamma2: vec![0.0; b.gamma2.len()],
                    beta2: vec![0.0; b.beta2.len()],
                })
                .collect(),
            w_cls: zero(&model.w_cls),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for slice in self.slices_mut() {
            for x in slice {
                *x *= s;
            }
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_emb.as_slice()];
        if let Some(p) = &self.pos_emb {
            out.push(p.as_slice());
        }
        for b in &self.blocks {
            out.extend([
                b.w_q.as_slice(),
                b.w_k.as_slice(),
                b.w_v.as_slice(),
                b.w_o.as_slice(),
                b.w_1.as_slice(),
                b.w_3.as_slice(),
                b.w_2.as_slice(),
                b.gamma1.as_slice(),
                b.beta1.as_slice(),
                b.gamma2.as_slice(),
                b.beta2.as_slice(),
            ]);
        }
        out.push(self.w_cls.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_emb.as_mut_slice()];
        if let Some(p) = &mut self.pos_emb {
            out.push(p.as_mut_slice());
        }
        for b in &mut self.blocks {
            out.extend([
                b.w_q.as_mut_slice(),
                b.w_k.as_mut_slice(),
                b.w_v.as_mut_slice(),
                b.w_o.as_mut_slice(),
                b.w_1.as_mut_slice(),
                b.w_3.as_mut_slice(),
                b.w_2.as_mut_slice(),
                b.gamma1.as_mut_slice(),
                b.beta1.as_mut_slice(),
                b.gamma2.as_mut_slice(),
                b.beta2.as_mut_slice(),
            ]);
        }
        out.push(self.w_cls.as_mut_slice());
        out
    }
}

/// Flat views over every trainable tensor, in the same order as
/// [`ModelGrads::slices`]. Optimizer state is kept aligned to this order.
pub fn param_slices_mut(model: &mut PlainModel) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![model.w_emb.as_mut_slice()];
    if let Some(p) = &mut model.pos_emb {
        out.push(p.as_mut_slice());
    }
    for b in &mut model.blocks {
        out.extend([
            b.w_q.as_mut_slice(),
            b.w_k.as_mut_slice(),
            b.w_v.as_mut_slice(),
            b.w_o.as_mut_slice(),
            b.w_1.as_mut_slice(),
            b.w_3.as_mut_slice(),
            b.w_2.as_mut_slice(),
            b.gamma1.as_mut_slice(),
            b.beta1.as_mut_slice(),
            b.gamma2.as_mut_slice(),
            b.beta2.as_mut_slice(),
        ]);
    }
    out.push(model.w_cls.as_mut_slice());
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// dx for `y = norm(x)` given upstream dy; also accumulates dgamma/dbeta.
fn norm_backward(
    kind: NormKind,
    x: &Matrix,
    gamma: &[f64],
    dy: &Matrix,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        match kind {
            NormKind::LayerNorm => {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..xr.len() {
                    let dxh = dyr[j] * gamma[j];
                    m1 += dxh;
                    m2 += dxh * xhat[j];
                    dgamma[j] += dyr[j] * xhat[j];
                    dbeta[j] += dyr[j];
                }
                m1 /= n;
                m2 /= n;
                let dst = dx.row_mut(r);
                for j in 0..xr.len() {
                    let dxh = dyr[j] * gamma[j];
                    dst[j] = (dxh - m1 - xhat[j] * m2) * inv;
                }
            }
            NormKind::RmsNorm => {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                let inv = 1.0 / (ms + NORM_EPS).sqrt();
                let mut m2 = 0.0;
                for j in 0..xr.len() {
                    let dxh = dyr[j] * gamma[j];
                    m2 += dxh * xr[j] * inv;
                    dgamma[j] += dyr[j] * xr[j] * inv;
                }
                m2 /= n;
                let dst = dx.row_mut(r);
                for j in 0..xr.len() {
                    let dxh = dyr[j] * gamma[j];
                    dst[j] = (dxh - xr[j] * inv * m2) * inv;
                }
            }
        }
    }
    dx
}

/// Backprop through row-wise softmax with temperature, given post-softmax
/// activations `a` and upstream `da`.
fn softmax_backward(a: &Matrix, da: &Matrix, temperature: f64) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let dar = da.row(r);
        let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        let dst = ds.row_mut(r);
        for j in 0..ar.len() {
            dst[j] = ar[j] * (dar[j] - dot) / temperature;
        }
    }
    ds
}

/// Forward one sequence, evaluate `loss_fn` on its last-position logits and
/// backpropagate; returns the loss and gradients of every trainable tensor.
pub fn loss_and_grads<F>(model: &PlainModel, ids: &[u32], loss_fn: F) -> Result<(f64, ModelGrads)>
where
    F: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    let cache = forward_cached(model, ids)?;
    let last = cache.logits.rows() - 1;
    let (loss, d_last) = loss_fn(cache.logits.row(last));
    assert_eq!(
        d_last.len(),
        cache.logits.cols(),
        "loss gradient width must match vocabulary"
    );

    let cfg = &model.config;
    let mut grads = ModelGrads::zeros_like(model);
    let mut d_logits = Matrix::zeros(cache.logits.rows(), cache.logits.cols());
    d_logits.row_mut(last).copy_from_slice(&d_last);

    // logits = y Wcls
    grads.w_cls = tensor::matmul(&tensor::transpose(&cache.final_y), &d_logits)?;
    let mut dy = tensor::matmul(&d_logits, &tensor::transpose(&model.w_cls))?;

    for (b, (bc, bg)) in model
        .blocks
        .iter()
        .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
        .rev()
    {
        // y = norm(r2)
        let d_r2 = norm_backward(
            cfg.norm_kind,
            &bc.r2,
            &b.gamma2,
            &dy,
            &mut bg.gamma2,
            &mut bg.beta2,
        );
        // r2 = z + vn
        let mut d_vn = d_r2.clone();
        // z = gated W2
        bg.w_2 = tensor::matmul(&tensor::transpose(&bc.gated), &d_r2)?;
        let d_gated = tensor::matmul(&d_r2, &tensor::transpose(&b.w_2))?;
        // gated = silu(ffa) .* ffb
        let silu_ffa = tensor::silu(&bc.ffa);
        let d_silu = tensor::mul_elem(&d_gated, &bc.ffb)?;
        let d_ffb = tensor::mul_elem(&d_gated, &silu_ffa)?;
        let mut d_ffa = d_silu;
        for (v, &x) in d_ffa.as_mut_slice().iter_mut().zip(bc.ffa.as_slice()) {
            let s = sigmoid(x);
            *v *= s * (1.0 + x * (1.0 - s));
        }
        // ffa = vn W1, ffb = vn W3
        bg.w_1 = tensor::matmul(&tensor::transpose(&bc.vn), &d_ffa)?;
        bg.w_3 = tensor::matmul(&tensor::transpose(&bc.vn), &d_ffb)?;
        d_vn = tensor::add(&d_vn, &tensor::matmul(&d_ffa, &tensor::transpose(&b.w_1))?)?;
        d_vn = tensor::add(&d_vn, &tensor::matmul(&d_ffb, &tensor::transpose(&b.w_3))?)?;
        // vn = norm(r1)
        let d_r1 = norm_backward(
            cfg.norm_kind,
            &bc.r1,
            &b.gamma1,
            &d_vn,
            &mut bg.gamma1,
            &mut bg.beta1,
        );
        // r1 = u + x
        let mut d_x = d_r1.clone();
        // u = ctx Wo
        bg.w_o = tensor::matmul(&tensor::transpose(&bc.ctx), &d_r1)?;
        let d_ctx = tensor::matmul(&d_r1, &tensor::transpose(&b.w_o))?;
        // ctx = attn V
        let d_attn = tensor::matmul(&d_ctx, &tensor::transpose(&bc.v))?;
        let d_v = tensor::matmul(&tensor::transpose(&bc.attn), &d_ctx)?;
        // attn = softmax(Q K^T / sqrt(s))
        let temp = (cfg.attn_scale() as f64).sqrt();
        let d_scores = softmax_backward(&bc.attn, &d_attn, temp);
        // scores = Q K^T
        let d_q = tensor::matmul(&d_scores, &bc.k)?;
        let d_k = tensor::matmul(&tensor::transpose(&d_scores), &bc.q)?;
        // projections
        bg.w_q = tensor::matmul(&tensor::transpose(&bc.x_in), &d_q)?;
        bg.w_k = tensor::matmul(&tensor::transpose(&bc.x_in), &d_k)?;
        bg.w_v = tensor::matmul(&tensor::transpose(&bc.x_in), &d_v)?;
        d_x = tensor::add(&d_x, &tensor::matmul(&d_q, &tensor::transpose(&b.w_q))?)?;
        d_x = tensor::add(&d_x, &tensor::matmul(&d_k, &tensor::transpose(&b.w_k))?)?;
        d_x = tensor::add(&d_x, &tensor::matmul(&d_v, &tensor::transpose(&b.w_v))?)?;
        dy = d_x;
    }

    // Embedding gather: scatter gradients back to the looked-up rows.
    for (t, &id) in ids.iter().enumerate() {
        let src: Vec<f64> = dy.row(t).to_vec();
        for (g, s) in grads.w_emb.row_mut(id as usize).iter_mut().zip(&src) {
            *g += s;
        }
    }
    if let Some(dp) = &mut grads.pos_emb {
        for t in 0..ids.len() {
            let src: Vec<f64> = dy.row(t).to_vec();
            for (g, s) in dp.row_mut(t).iter_mut().zip(&src) {
                *g += s;
            }
        }
    }

    Ok((loss, grads))
}

// ============================================================
// Losses
// ============================================================

/// Numerically stable log-softmax over a slice.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Cross-entropy over the first `span` logits only (the designated label
/// token range); returns the loss and its gradient padded to full width.
pub fn ce_restricted(last_logits: &[f64], label: u32, span: usize) -> (f64, Vec<f64>) {
    assert!(span <= last_logits.len() && (label as usize) < span);
    let ls = log_softmax(&last_logits[..span]);
    let loss = -ls[label as usize];
    let mut grad = vec![0.0; last_logits.len()];
    for j in 0..span {
        grad[j] = ls[j].exp() - if j == label as usize { 1.0 } else { 0.0 };
    }
    (loss, grad)
}

// ============================================================
// Optimizers
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    Sgd,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub enum OptState {
    Adam {
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
    Sgd,
}

impl OptState {
    pub fn new(kind: OptKind, model: &PlainModel) -> Self {
        match kind {
            OptKind::Sgd => OptState::Sgd,
            OptKind::Adam => {
                let shapes: Vec<usize> = ModelGrads::zeros_like(model)
                    .slices()
                    .iter()
                    .map(|s| s.len())
                    .collect();
                OptState::Adam {
                    t: 0,
                    m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                }
            }
        }
    }

    pub fn step(&mut self, model: &mut PlainModel, grads: &ModelGrads, lr: f64) {
        let params = param_slices_mut(model);
        let gslices = grads.slices();
        match self {
            OptState::Sgd => {
                for (p, g) in params.into_iter().zip(gslices) {
                    for (w, &gv) in p.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
            }
            OptState::Adam { t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for ((p, g), (ms, vs)) in params
                    .into_iter()
                    .zip(gslices)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    for j in 0..p.len() {
                        let gv = g[j];
                        ms[j] = ADAM_BETA1 * ms[j] + (1.0 - ADAM_BETA1) * gv;
                        vs[j] = ADAM_BETA2 * vs[j] + (1.0 - ADAM_BETA2) * gv * gv;
                        let mh = ms[j] / bc1;
                        let vh = vs[j] / bc2;
                        p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

// ============================================================
// Training loop
// ============================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: u32,
    pub batch_size: u32,
    pub lr: f64,
    pub optimizer: OptKind,
    /// Seed for the per-epoch shuffling stream.
    pub shuffle_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptKind::Adam,
            shuffle_seed: 0,
        }
    }
}

/// One pass over `seqs` in shuffled fixed-size batches (a trailing partial
/// batch is dropped so every step averages the same count). `loss_fn` maps
/// `(sample_index, last_logits)` to `(loss, d_logits_last)`. Returns the
/// mean per-sample loss over the steps taken.
pub fn run_epoch<F>(
    model: &mut PlainModel,
    seqs: &[Vec<u32>],
    order_rng: &mut ChaCha8Rng,
    opt: &mut OptState,
    batch_size: usize,
    lr: f64,
    loss_fn: &F,
) -> Result<f64>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
{
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(order_rng);
    let batch_size = batch_size.min(seqs.len()).max(1);

    let mut total = 0.0;
    let mut steps = 0u32;
    for batch in order.chunks_exact(batch_size) {
        let results = batch_results(model, seqs, batch, loss_fn)?;
        let mut sum = ModelGrads::zeros_like(model);
        let mut loss_sum = 0.0;
        for (loss, g) in results {
            loss_sum += loss;
            sum.add_assign(&g);
        }
        sum.scale(1.0 / batch_size as f64);
        opt.step(model, &sum, lr);
        total += loss_sum / batch_size as f64;
        steps += 1;
    }
    Ok(if steps == 0 {
        0.0
    } else {
        total / steps as f64
    })
}

#[cfg(feature = "parallel")]
fn batch_results<F>(
    model: &PlainModel,
    seqs: &[Vec<u32>],
    batch: &[usize],
    loss_fn: &F,
) -> Result<Vec<(f64, ModelGrads)>>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
{
    batch
        .par_iter()
        .map(|&i| loss_and_grads(model, &seqs[i], |last| loss_fn(i, last)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn batch_results<F>(
    model: &PlainModel,
    seqs: &[Vec<u32>],
    batch: &[usize],
    loss_fn: &F,
) -> Result<Vec<(f64, ModelGrads)>>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
{
    batch
        .iter()
        .map(|&i| loss_and_grads(model, &seqs[i], |last| loss_fn(i, last)))
        .collect()
}

/// Supervised training on a labeled toy set with the restricted readout:
/// cross-entropy over the first `label_span` logits at the last position.
/// Returns the per-epoch mean training loss.
pub fn train_supervised(
    model: &mut PlainModel,
    seqs: &[Vec<u32>],
    labels: &[u32],
    label_span: usize,
    hyper: &TrainHyper,
) -> Result<Vec<f64>> {
    assert_eq!(seqs.len(), labels.len());
    let mut opt = OptState::new(hyper.optimizer, model);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.shuffle_seed);
    let mut curve = Vec::with_capacity(hyper.epochs as usize);
    for _ in 0..hyper.epochs {
        let loss = run_epoch(
            model,
            seqs,
            &mut rng,
            &mut opt,
            hyper.batch_size as usize,
            hyper.lr,
            &|i, last| ce_restricted(last, labels[i], label_span),
        )?;
        curve.push(loss);
    }
    Ok(curve)
}

// ============================================================
// Tests
// ============================================================
