// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-derived backward pass for [`TinyLm`].

use super::model::{gelu_grad, softmax, BlockCache, BlockParams, LmParams, TinyLm, TinyLmConfig};
use crate::numerics::matrix::{gemm_a_bt, gemm_at_b};

fn add_rows(dst: &mut [f64], src: &[f64], width: usize) {
    for row in src.chunks_exact(width) {
        for (d, s) in dst.iter_mut().zip(row) {
            *d += s;
        }
    }
}

/// Backward through `y = x * inv * gain` row-wise.
fn rms_norm_backward(dy: &[f64], x: &[f64], inv: &[f64], gain: &[f64], dgain: &mut [f64], t: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let iv = inv[r];
        let mut proj = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xr[c] * iv;
            proj += dyr[c] * gain[c] * xr[c];
        }
        let k = iv * iv * iv * proj / d as f64;
        for c in 0..d {
            dx[r * d + c] = iv * gain[c] * dyr[c] - k * xr[c];
        }
    }
    dx
}

/// Accumulates block parameter gradients into `g` and returns the gradient
/// with respect to the block input (excluding the residual skip).
fn block_backward(p: &BlockParams, c: &BlockCache, dout: &[f64], g: &mut BlockParams, t: usize, cfg: &TinyLmConfig) -> Vec<f64> {
    let d = cfg.hidden_dim;
    let f = cfg.mlp_dim();
    let nh = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch.
    add_rows(g.b2.data_mut(), dout, d);
    gemm_at_b(&c.g, dout, g.w2.data_mut(), t, f, d);
    let mut dg = vec![0.0; t * f];
    gemm_a_bt(dout, p.w2.data(), &mut dg, t, d, f);
    let du: Vec<f64> = dg.iter().zip(&c.u).map(|(a, &u)| a * gelu_grad(u)).collect();
    add_rows(g.b1.data_mut(), &du, f);
    gemm_at_b(&c.h2, &du, g.w1.data_mut(), t, d, f);
    let mut dh2 = vec![0.0; t * d];
    gemm_a_bt(&du, p.w1.data(), &mut dh2, t, f, d);
    let dmid = rms_norm_backward(&dh2, &c.mid, &c.inv2, p.norm2.data(), g.norm2.data_mut(), t, d);

    // Attention branch sees dout directly plus the path through `mid`.
    let da: Vec<f64> = dout.iter().zip(&dmid).map(|(a, b)| a + b).collect();
    gemm_at_b(&c.o, &da, g.wo.data_mut(), t, d, d);
    let mut d_o = vec![0.0; t * d];
    gemm_a_bt(&da, p.wo.data(), &mut d_o, t, d, d);

    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut datt = vec![0.0; t];
    for h in 0..nh {
        let off = h * hd;
        for i in 0..t {
            let arow = &c.att[(h * t + i) * t..(h * t + i) * t + t];
            let doi = &d_o[i * d + off..i * d + off + hd];
            let mut weighted = 0.0;
            for j in 0..=i {
                let vj = &c.v[j * d + off..j * d + off + hd];
                datt[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += arow[j] * datt[j];
                let dvj = &mut dv[j * d + off..j * d + off + hd];
                for (x, y) in dvj.iter_mut().zip(doi) {
                    *x += arow[j] * y;
                }
            }
            for j in 0..=i {
                let ds = arow[j] * (datt[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for e in 0..hd {
                    dq[i * d + off + e] += ds * c.k[j * d + off + e];
                    dk[j * d + off + e] += ds * c.q[i * d + off + e];
                }
            }
        }
    }
    gemm_at_b(&c.h1, &dq, g.wq.data_mut(), t, d, d);
    gemm_at_b(&c.h1, &dk, g.wk.data_mut(), t, d, d);
    gemm_at_b(&c.h1, &dv, g.wv.data_mut(), t, d, d);
    let mut dh1 = vec![0.0; t * d];
    gemm_a_bt(&dq, p.wq.data(), &mut dh1, t, d, d);
    gemm_a_bt(&dk, p.wk.data(), &mut dh1, t, d, d);
    gemm_a_bt(&dv, p.wv.data(), &mut dh1, t, d, d);
    let dx1 = rms_norm_backward(&dh1, &c.x, &c.inv1, p.norm1.data(), g.norm1.data_mut(), t, d);

    dmid.iter().zip(&dx1).map(|(a, b)| a + b).collect()
}

/// Weighted next-token cross-entropy of one sequence:
/// `Σ_t weights[t] · -log P(tokens[t+1] | tokens[..=t])`.
/// Gradients of that sum are added into `grads`. Returns the loss sum.
pub(crate) fn sequence_loss_grad(model: &TinyLm, tokens: &[u32], weights: &[f64], grads: Option<&mut LmParams>) -> f64 {
    let cfg = &model.config;
    let (t, d, v) = (tokens.len(), cfg.hidden_dim, cfg.vocab_size);
    debug_assert_eq!(weights.len() + 1, t);
    let (trace, caches) = model.run(tokens, None);
    let logits = trace.logits.data();

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t * v];
    for i in 0..t - 1 {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let probs = softmax(&logits[i * v..(i + 1) * v]);
        let target = tokens[i + 1] as usize;
        loss -= w * probs[target].max(1e-300).ln();
        for (j, p) in probs.iter().enumerate() {
            dlogits[i * v + j] = w * (p - if j == target { 1.0 } else { 0.0 });
        }
    }

    let Some(g) = grads else {
        return loss;
    };

    let last = trace.residuals[cfg.num_layers].data();
    gemm_at_b(last, &dlogits, g.head_w.data_mut(), t, d, v);
    add_rows(g.head_b.data_mut(), &dlogits, v);
    let mut dr = vec![0.0; t * d];
    gemm_a_bt(&dlogits, model.params.head_w.data(), &mut dr, t, v, d);

    for l in (0..cfg.num_layers).rev() {
        let dx = block_backward(&model.params.blocks[l], &caches[l], &dr, &mut g.blocks[l], t, cfg);
        for (a, b) in dr.iter_mut().zip(&dx) {
            *a += b;
        }
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &dr[i * d..(i + 1) * d];
        for (a, b) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
            *a += b;
        }
        for (a, b) in g.pos_emb.row_mut(i).iter_mut().zip(row) {
            *a += b;
        }
    }
    loss
}
