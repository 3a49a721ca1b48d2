//! Prefix-conditioned GPT-2-style decoder with explicit backpropagation.
//!
//! Sequence layout: position 0 holds the projected prefix vector, positions
//! `1..T` hold caption tokens `t_1..t_{T-1}`. Position `i` predicts token
//! `t_{i+1}`, the last one predicts end-of-text.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Prefix position included.
    pub max_positions: usize,
    pub prefix_dim: usize,
}

impl Arch {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    fn zeros(i: usize, o: usize) -> Self {
        Self { w: Array2::zeros((i, o)), b: Array2::zeros((1, o)) }
    }

    fn init(i: usize, o: usize, std: f64, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, std).unwrap();
        Self { w: Array2::from_shape_simple_fn((i, o), || n.sample(rng)), b: Array2::zeros((1, o)) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub g: Array2<f64>,
    pub b: Array2<f64>,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self { g: Array2::ones((1, d)), b: Array2::zeros((1, d)) }
    }

    fn zeros(d: usize) -> Self {
        Self { g: Array2::zeros((1, d)), b: Array2::zeros((1, d)) }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * rstd.view().insert_axis(Axis(1));
        let y = &xhat * &self.g + &self.b;
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, g: &mut Norm) -> Array2<f64> {
        g.g += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.g;
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let inner = dxhat - &mean_dxhat.insert_axis(Axis(1)) - &cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1));
        inner * cache.rstd.view().insert_axis(Axis(1))
    }
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: Norm,
    pub fc: Linear,
    pub proj: Linear,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub prefix: Linear,
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub head: Linear,
}

impl Weights {
    pub fn init(arch: &Arch, rng: &mut impl Rng) -> Self {
        let d = arch.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * arch.layers as f64).sqrt();
        let n = Normal::new(0.0, std).unwrap();
        let blocks = (0..arch.layers)
            .map(|_| Block {
                ln1: Norm::new(d),
                qkv: Linear::init(d, 3 * d, std, rng),
                attn_out: Linear::init(d, d, resid_std, rng),
                ln2: Norm::new(d),
                fc: Linear::init(d, 4 * d, std, rng),
                proj: Linear::init(4 * d, d, resid_std, rng),
            })
            .collect();
        Self {
            prefix: Linear::init(arch.prefix_dim, d, 1.0 / (arch.prefix_dim as f64).sqrt(), rng),
            tok: Array2::from_shape_simple_fn((arch.vocab, d), || n.sample(rng)),
            pos: Array2::from_shape_simple_fn((arch.max_positions, d), || n.sample(rng)),
            blocks,
            ln_f: Norm::new(d),
            head: Linear::init(d, arch.vocab, std, rng),
        }
    }

    pub fn zeros(arch: &Arch) -> Self {
        let d = arch.d_model;
        Self {
            prefix: Linear::zeros(arch.prefix_dim, d),
            tok: Array2::zeros((arch.vocab, d)),
            pos: Array2::zeros((arch.max_positions, d)),
            blocks: (0..arch.layers)
                .map(|_| Block {
                    ln1: Norm::zeros(d),
                    qkv: Linear::zeros(d, 3 * d),
                    attn_out: Linear::zeros(d, d),
                    ln2: Norm::zeros(d),
                    fc: Linear::zeros(d, 4 * d),
                    proj: Linear::zeros(4 * d, d),
                })
                .collect(),
            ln_f: Norm::zeros(d),
            head: Linear::zeros(d, arch.vocab),
        }
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.prefix.w, &self.prefix.b, &self.tok, &self.pos];
        for b in &self.blocks {
            v.extend([
                &b.ln1.g, &b.ln1.b, &b.qkv.w, &b.qkv.b, &b.attn_out.w, &b.attn_out.b, &b.ln2.g, &b.ln2.b, &b.fc.w,
                &b.fc.b, &b.proj.w, &b.proj.b,
            ]);
        }
        v.extend([&self.ln_f.g, &self.ln_f.b, &self.head.w, &self.head.b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.prefix.w, &mut self.prefix.b, &mut self.tok, &mut self.pos];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1.g,
                &mut b.ln1.b,
                &mut b.qkv.w,
                &mut b.qkv.b,
                &mut b.attn_out.w,
                &mut b.attn_out.b,
                &mut b.ln2.g,
                &mut b.ln2.b,
                &mut b.fc.w,
                &mut b.fc.b,
                &mut b.proj.w,
                &mut b.proj.b,
            ]);
        }
        v.extend([&mut self.ln_f.g, &mut self.ln_f.b, &mut self.head.w, &mut self.head.b]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

struct BlockCache {
    ln1: NormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: NormCache,
    b: Array2<f64>,
    fc_pre: Array2<f64>,
    fc_act: Array2<f64>,
}

pub struct ForwardCache {
    prefix: Array2<f64>,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln_f: NormCache,
    h: Array2<f64>,
}

/// Result of a training forward/backward pass on one sequence.
pub struct LossAndGrad {
    /// Mean token cross-entropy.
    pub loss: f64,
    pub grads: Weights,
    pub d_prefix: Vec<f64>,
}

impl Weights {
    fn block_forward(&self, arch: &Arch, blk: &Block, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let t = x.nrows();
        let (d, dh) = (arch.d_model, arch.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = blk.ln1.forward(&x);
        let qkv = blk.qkv.forward(&a);
        let mut attn = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(arch.heads);
        for h in 0..arch.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut sc = q.dot(&k.t()) * scale;
            for i in 0..t {
                for j in i + 1..t {
                    sc[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows(&mut sc);
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
            probs.push(sc);
        }
        let x_mid = &x + &blk.attn_out.forward(&attn);
        let (b, ln2) = blk.ln2.forward(&x_mid);
        let fc_pre = blk.fc.forward(&b);
        let fc_act = fc_pre.mapv(gelu);
        let out = &x_mid + &blk.proj.forward(&fc_act);
        (out, BlockCache { ln1, a, qkv, probs, attn, ln2, b, fc_pre, fc_act })
    }

    fn block_backward(&self, arch: &Arch, blk: &Block, c: &BlockCache, dout: Array2<f64>, g: &mut Block) -> Array2<f64> {
        let (d, dh) = (arch.d_model, arch.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        // mlp branch
        let d_act = blk.proj.backward(&c.fc_act, &dout, &mut g.proj);
        let d_pre = d_act * &c.fc_pre.mapv(gelu_grad);
        let d_b = blk.fc.backward(&c.b, &d_pre, &mut g.fc);
        let mut dx_mid = dout + &blk.ln2.backward(&c.ln2, &d_b, &mut g.ln2);
        // attention branch
        let d_attn = blk.attn_out.backward(&c.attn, &dx_mid, &mut g.attn_out);
        let mut d_qkv = Array2::zeros(c.qkv.raw_dim());
        for h in 0..arch.heads {
            let p = &c.probs[h];
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let d_o = d_attn.slice(s![.., h * dh..(h + 1) * dh]);
            let d_p = d_o.dot(&v.t());
            let d_v = p.t().dot(&d_o);
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_s = p * &(d_p - &row_dot);
            let d_q = d_s.dot(&k) * scale;
            let d_k = d_s.t().dot(&q) * scale;
            d_qkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&d_q);
            d_qkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&d_k);
            d_qkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&d_v);
        }
        let d_a = blk.qkv.backward(&c.a, &d_qkv, &mut g.qkv);
        dx_mid += &blk.ln1.backward(&c.ln1, &d_a, &mut g.ln1);
        dx_mid
    }

    /// Runs the network and returns per-position logits.
    pub fn forward(&self, arch: &Arch, prefix: &[f64], tokens: &[u32]) -> (Array2<f64>, ForwardCache) {
        let t = tokens.len() + 1;
        assert!(t <= arch.max_positions, "sequence of {t} exceeds {} positions", arch.max_positions);
        let prefix = Array2::from_shape_vec((1, prefix.len()), prefix.to_vec()).expect("prefix row");
        let mut x = Array2::zeros((t, arch.d_model));
        x.row_mut(0).assign(&self.prefix.forward(&prefix).row(0));
        for (i, &tok) in tokens.iter().enumerate() {
            x.row_mut(i + 1).assign(&self.tok.row(tok as usize));
        }
        x += &self.pos.slice(s![..t, ..]);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (out, c) = self.block_forward(arch, blk, x);
            caches.push(c);
            x = out;
        }
        let (h, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&h);
        (logits, ForwardCache { prefix, tokens: tokens.to_vec(), blocks: caches, ln_f, h })
    }

    /// Backpropagates `d_logits` through a cached forward pass.
    pub fn backward(&self, arch: &Arch, cache: &ForwardCache, d_logits: &Array2<f64>) -> (Weights, Vec<f64>) {
        let mut g = Weights::zeros(arch);
        let d_h = self.head.backward(&cache.h, d_logits, &mut g.head);
        let mut dx = self.ln_f.backward(&cache.ln_f, &d_h, &mut g.ln_f);
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            dx = self.block_backward(arch, blk, c, dx, &mut g.blocks[i]);
        }
        let t = dx.nrows();
        g.pos.slice_mut(s![..t, ..]).assign(&dx);
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let mut row = g.tok.row_mut(tok as usize);
            row += &dx.row(i + 1);
        }
        let d0 = dx.slice(s![0..1, ..]).to_owned();
        let d_prefix = self.prefix.backward(&cache.prefix, &d0, &mut g.prefix);
        (g, d_prefix.row(0).to_vec())
    }

    /// Mean cross-entropy of `tokens` followed by `eos` given `prefix`, with
    /// gradients for every weight and for the prefix vector.
    pub fn loss_and_grad(&self, arch: &Arch, prefix: &[f64], tokens: &[u32], eos: u32) -> LossAndGrad {
        let (logits, cache) = self.forward(arch, prefix, tokens);
        let t = logits.nrows();
        let targets: Vec<u32> = tokens.iter().copied().chain(std::iter::once(eos)).collect();
        let mut d_logits = logits;
        softmax_rows(&mut d_logits);
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            loss -= d_logits[[i, y as usize]].max(f64::MIN_POSITIVE).ln();
            d_logits[[i, y as usize]] -= 1.0;
        }
        d_logits /= t as f64;
        let (grads, d_prefix) = self.backward(arch, &cache, &d_logits);
        LossAndGrad { loss: loss / t as f64, grads, d_prefix }
    }

    /// Loss only, for finite-difference checks and evaluation.
    pub fn loss(&self, arch: &Arch, prefix: &[f64], tokens: &[u32], eos: u32) -> f64 {
        let (mut p, _) = self.forward(arch, prefix, tokens);
        softmax_rows(&mut p);
        let t = p.nrows();
        let targets = tokens.iter().copied().chain(std::iter::once(eos));
        -targets.enumerate().map(|(i, y)| p[[i, y as usize]].ln()).sum::<f64>() / t as f64
    }

    /// Log-probabilities of the next token after `tokens`.
    pub fn next_log_probs(&self, arch: &Arch, prefix: &[f64], tokens: &[u32]) -> Vec<f64> {
        let (logits, _) = self.forward(arch, prefix, tokens);
        let last = logits.row(logits.nrows() - 1);
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + last.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        last.iter().map(|v| v - lse).collect()
    }
}
