// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with pre-norm blocks.
//!
//! Each block reads the residual stream `r`, computes
//! `attn = Attn(RMSNorm(r))` and `mlp = MLP(RMSNorm(r + attn))`, and the
//! stream advances as `r' = r + (attn + mlp)`. The block output
//! `attn + mlp` is recorded separately so that `r' - r` can be checked
//! against it. The output head is affine and applied directly to the last
//! stream, without a final norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm, Matrix};
use crate::numerics::{Rng, RngSeed};

pub(crate) const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyLmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    pub seed: RngSeed,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden_dim: 32,
            num_layers: 4,
            num_heads: 2,
            max_seq_len: 32,
            mlp_ratio: 4,
            seed: RngSeed(0),
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("max_seq_len and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// Midpoint tap, the default read/write location for SAEs and steering.
    pub fn default_tap(&self) -> TapPoint {
        TapPoint(self.num_layers / 2)
    }
}

/// Residual stream location between `Block^(l-1)` and `Block^(l)`;
/// `0` is the embedding output and `num_layers` feeds the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapPoint(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub norm1: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            norm1: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            norm2: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, f),
            b1: Matrix::zeros(1, f),
            w2: Matrix::zeros(f, d),
            b2: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("norm1", &self.norm1),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm2", &self.norm2),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.norm1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.norm2,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl LmParams {
    pub fn zeros(cfg: &TinyLmConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.hidden_dim, cfg.mlp_dim());
        Self {
            tok_emb: Matrix::zeros(v, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            blocks: (0..cfg.num_layers).map(|_| BlockParams::zeros(d, f)).collect(),
            head_w: Matrix::zeros(d, v),
            head_b: Matrix::zeros(1, v),
        }
    }

    /// Named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    /// Mutable tensors, same order as [`LmParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn add_assign(&mut self, other: &LmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.1.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    pub config: TinyLmConfig,
    pub params: LmParams,
}

/// Everything recorded by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `num_layers + 1` matrices of shape `seq_len × d`.
    pub residuals: Vec<Matrix>,
    /// `num_layers` matrices, `block_outputs[l] = Block^(l)(residuals[l])`.
    pub block_outputs: Vec<Matrix>,
    /// `seq_len × vocab` logits of the output head.
    pub logits: Matrix,
    /// Next-token distribution after the last position.
    pub distribution: Vec<f64>,
}

pub(crate) struct BlockCache {
    pub x: Vec<f64>,
    pub inv1: Vec<f64>,
    pub h1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `heads × T × T`, row `t` holds the softmax over `s <= t`.
    pub att: Vec<f64>,
    pub o: Vec<f64>,
    pub mid: Vec<f64>,
    pub inv2: Vec<f64>,
    pub h2: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Row-wise RMS norm with gain; returns normalized rows and `1/rms` per row.
pub(crate) fn rms_norm(x: &[f64], gain: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; t * d];
    let mut inv = vec![0.0; t];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let iv = 1.0 / (ms + NORM_EPS).sqrt();
        inv[r] = iv;
        for c in 0..d {
            out[r * d + c] = row[c] * iv * gain[c];
        }
    }
    (out, inv)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Runs one block over a `t × d` stream. Returns the block output and the
/// activations needed for the backward pass.
pub(crate) fn block_forward(p: &BlockParams, x: &[f64], t: usize, cfg: &TinyLmConfig) -> (Vec<f64>, BlockCache) {
    let d = cfg.hidden_dim;
    let f = cfg.mlp_dim();
    let nh = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let (h1, inv1) = rms_norm(x, p.norm1.data(), t, d);
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    gemm(&h1, p.wq.data(), &mut q, t, d, d);
    gemm(&h1, p.wk.data(), &mut k, t, d, d);
    gemm(&h1, p.wv.data(), &mut v, t, d, d);

    let mut att = vec![0.0; nh * t * t];
    let mut o = vec![0.0; t * d];
    for h in 0..nh {
        let off = h * hd;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + hd];
            let row = &mut att[(h * t + i) * t..(h * t + i) * t + t];
            for j in 0..=i {
                let kj = &k[j * d + off..j * d + off + hd];
                row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut row[..=i]);
            let oi = &mut o[i * d + off..i * d + off + hd];
            for j in 0..=i {
                let w = row[j];
                let vj = &v[j * d + off..j * d + off + hd];
                for (ov, vv) in oi.iter_mut().zip(vj) {
                    *ov += w * vv;
                }
            }
        }
    }
    let mut attn_out = vec![0.0; t * d];
    gemm(&o, p.wo.data(), &mut attn_out, t, d, d);

    let mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let (h2, inv2) = rms_norm(&mid, p.norm2.data(), t, d);
    let mut u = vec![0.0; t * f];
    for r in 0..t {
        u[r * f..(r + 1) * f].copy_from_slice(p.b1.data());
    }
    gemm(&h2, p.w1.data(), &mut u, t, d, f);
    let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
    let mut mlp_out = vec![0.0; t * d];
    for r in 0..t {
        mlp_out[r * d..(r + 1) * d].copy_from_slice(p.b2.data());
    }
    gemm(&g, p.w2.data(), &mut mlp_out, t, f, d);

    let out: Vec<f64> = attn_out.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
    let cache = BlockCache {
        x: x.to_vec(),
        inv1,
        h1,
        q,
        k,
        v,
        att,
        o,
        mid,
        inv2,
        h2,
        u,
        g,
    };
    (out, cache)
}

impl TinyLm {
    /// Randomly initialized model.
    pub fn init(config: TinyLmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed.derive_str("tinylm-init"));
        let mut params = LmParams::zeros(&config);
        let d = config.hidden_dim as f64;
        let f = config.mlp_dim() as f64;
        let depth = (2.0 * config.num_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix, std: f64| m.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        fill(&mut params.tok_emb, 1.0);
        fill(&mut params.pos_emb, 0.3);
        for b in &mut params.blocks {
            b.norm1.fill(1.0);
            b.norm2.fill(1.0);
            fill(&mut b.wq, 1.0 / d.sqrt());
            fill(&mut b.wk, 1.0 / d.sqrt());
            fill(&mut b.wv, 1.0 / d.sqrt());
            fill(&mut b.wo, 1.0 / d.sqrt() / depth);
            fill(&mut b.w1, 1.0 / d.sqrt());
            fill(&mut b.w2, 1.0 / f.sqrt() / depth);
        }
        fill(&mut params.head_w, 0.5 / d.sqrt());
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {} at position {pos} outside vocabulary of size {}",
                tokens[pos], self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_tap(&self, tap: TapPoint) -> Result<()> {
        if tap.0 > self.config.num_layers {
            return Err(Error::invalid(format!(
                "tap {} out of range 0..={}",
                tap.0, self.config.num_layers
            )));
        }
        Ok(())
    }

    /// `r^(0)`: token plus position embeddings.
    pub(crate) fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let mut r = vec![0.0; tokens.len() * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = self.params.tok_emb.row(tok as usize);
            let pe = self.params.pos_emb.row(i);
            for c in 0..d {
                r[i * d + c] = te[c] + pe[c];
            }
        }
        r
    }

    pub(crate) fn head(&self, r: &[f64], t: usize) -> Vec<f64> {
        let (d, v) = (self.config.hidden_dim, self.config.vocab_size);
        let mut logits = vec![0.0; t * v];
        for i in 0..t {
            logits[i * v..(i + 1) * v].copy_from_slice(self.params.head_b.data());
        }
        gemm(r, self.params.head_w.data(), &mut logits, t, d, v);
        logits
    }

    /// Applies `Block^(layer)` to a standalone stream (`seq_len × d`).
    pub fn block(&self, layer: usize, stream: &Matrix) -> Result<Matrix> {
        if layer >= self.config.num_layers {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        if stream.cols() != self.config.hidden_dim || stream.rows() == 0 {
            return Err(Error::shape("block", format!("stream {:?}", stream.shape())));
        }
        let (out, _) = block_forward(&self.params.blocks[layer], stream.data(), stream.rows(), &self.config);
        Matrix::from_vec(stream.rows(), self.config.hidden_dim, out)
    }

    /// Affine output head applied to every row of a stream.
    pub fn output_head(&self, stream: &Matrix) -> Result<Matrix> {
        if stream.cols() != self.config.hidden_dim {
            return Err(Error::shape("output_head", format!("stream {:?}", stream.shape())));
        }
        Matrix::from_vec(stream.rows(), self.config.vocab_size, self.head(stream.data(), stream.rows()))
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens, None).0)
    }

    /// Forward pass with `delta` added to every position of the stream at
    /// `tap` before the remaining blocks run. The recorded `residuals[tap]`
    /// is the stream after injection.
    pub fn forward_with_injection(&self, tokens: &[u32], tap: TapPoint, delta: &[f64]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        self.check_tap(tap)?;
        if delta.len() != self.config.hidden_dim {
            return Err(Error::shape(
                "forward_with_injection",
                format!("delta has length {}, expected {}", delta.len(), self.config.hidden_dim),
            ));
        }
        Ok(self.run(tokens, Some((tap.0, delta))).0)
    }

    /// Runs the remaining blocks from a stream at `tap` and returns the
    /// next-token distribution after the last position. `stream` is the full
    /// `seq_len × d` stream at `tap` (already injected if desired).
    pub fn distribution_from(&self, tap: TapPoint, stream: &Matrix) -> Result<Vec<f64>> {
        self.check_tap(tap)?;
        if stream.cols() != self.config.hidden_dim || stream.rows() == 0 {
            return Err(Error::shape("distribution_from", format!("stream {:?}", stream.shape())));
        }
        let t = stream.rows();
        let mut r = stream.data().to_vec();
        for l in tap.0..self.config.num_layers {
            let (out, _) = block_forward(&self.params.blocks[l], &r, t, &self.config);
            for (x, o) in r.iter_mut().zip(&out) {
                *x += o;
            }
        }
        let v = self.config.vocab_size;
        let logits = self.head(&r[(t - 1) * self.config.hidden_dim..], 1);
        debug_assert_eq!(logits.len(), v);
        Ok(softmax(&logits))
    }

    /// Forward pass core, also returning the per-block caches for backprop.
    pub(crate) fn run(&self, tokens: &[u32], injection: Option<(usize, &[f64])>) -> (ForwardTrace, Vec<BlockCache>) {
        let cfg = &self.config;
        let (t, d, v) = (tokens.len(), cfg.hidden_dim, cfg.vocab_size);
        let mut r = self.embed(tokens);
        let mut residuals = Vec::with_capacity(cfg.num_layers + 1);
        let mut block_outputs = Vec::with_capacity(cfg.num_layers);
        let mut caches = Vec::with_capacity(cfg.num_layers);
        for l in 0..=cfg.num_layers {
            if let Some((tap, delta)) = injection {
                if tap == l {
                    for i in 0..t {
                        for c in 0..d {
                            r[i * d + c] += delta[c];
                        }
                    }
                }
            }
            residuals.push(Matrix::from_vec(t, d, r.clone()).unwrap_or_else(|_| Matrix::zeros(t, d)));
            if l == cfg.num_layers {
                break;
            }
            let (out, cache) = block_forward(&self.params.blocks[l], &r, t, cfg);
            for (x, o) in r.iter_mut().zip(&out) {
                *x += o;
            }
            block_outputs.push(Matrix::from_vec(t, d, out).unwrap_or_else(|_| Matrix::zeros(t, d)));
            caches.push(cache);
        }
        let logits = self.head(&r, t);
        let distribution = softmax(&logits[(t - 1) * v..t * v]);
        let trace = ForwardTrace {
            residuals,
            block_outputs,
            logits: Matrix::from_vec(t, v, logits).unwrap_or_else(|_| Matrix::zeros(t, v)),
            distribution,
        };
        (trace, caches)
    }
}
