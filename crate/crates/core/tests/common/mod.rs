//! Loop-level reference implementations shared by the oracle suites.
//!
//! Everything here is written independently of the library's operators:
//! plain nested loops over flat slices, no tape, no gemm. The tests compare
//! the library against these references.

#![allow(dead_code)]

use m3att_core::autodiff::Tensor;
use m3att_core::rng::{self, Rng};

/// The layer's bias entries, or zeros when the layer carries none.
pub fn linear_bias(l: &m3att_core::nn::Linear) -> Vec<f64> {
    l.b.as_ref()
        .map(|b| b.to_vec())
        .unwrap_or_else(|| vec![0.0; l.w.shape()[1]])
}

/// c[m×n] = a[m×k] · b[k×n], triple loop.
pub fn oracle_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Row-wise softmax of an r×c matrix via exp/sum without stabilization
/// (callers keep magnitudes moderate).
pub fn oracle_softmax_rows(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let mut sum = 0.0;
        for j in 0..c {
            let e = x[i * c + j].exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    out
}

pub fn oracle_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn oracle_transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Per-channel batch normalization of an n×c matrix in training mode
/// (biased variance), returning the normalized output.
pub fn oracle_bn_rows(n: usize, c: usize, x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for j in 0..c {
        let mean: f64 = (0..n).map(|i| x[i * c + j]).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (x[i * c + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            out[i * c + j] = gamma[j] * (x[i * c + j] - mean) * istd + beta[j];
        }
    }
    out
}

pub fn rand_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng::uniform(rng, lo, hi)).collect()
}

pub fn rand_const(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

pub fn rand_param(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// y[n×dout] = x·W + b, loops only.
pub fn oracle_affine(
    n: usize,
    din: usize,
    dout: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut y = oracle_matmul(n, din, dout, x, w);
    for r in 0..n {
        for c in 0..dout {
            y[r * dout + c] += b[c];
        }
    }
    y
}

/// Full mutual-attention forward computed with loops only, reading the
/// block's parameter data directly. Returns the `[n_t×c]` output.
pub fn oracle_m3att(
    block: &m3att_core::mutual::MutualAttention,
    n_t: usize,
    hw: usize,
    c: usize,
    f_q: &[f64],
    f_enc: &[f64],
) -> Vec<f64> {
    let aff = |l: &m3att_core::nn::Linear, n: usize, x: &[f64]| {
        let din = l.w.shape()[0];
        let dout = l.w.shape()[1];
        oracle_affine(n, din, dout, x, &l.w.data(), &linear_bias(l))
    };
    let k_l = aff(&block.lang_key, n_t, f_q);
    let v_l = aff(&block.lang_value, n_t, f_q);
    let k_v = aff(&block.vis_key, hw, f_enc);
    let v_v = aff(&block.vis_value, hw, f_enc);

    let logits = |kl: &[f64], kv: &[f64]| {
        let mut a = vec![0.0; n_t * hw];
        let scale = 1.0 / (c as f64).sqrt();
        for i in 0..n_t {
            for j in 0..hw {
                let mut s = 0.0;
                for d in 0..c {
                    s += kl[i * c + d] * kv[j * c + d];
                }
                a[i * hw + j] = s * scale;
            }
        }
        a
    };
    let a_lav = logits(&k_l, &k_v);
    let a_val = match (&block.lang_key2, &block.vis_key2) {
        (Some(lk2), Some(vk2)) => logits(&aff(lk2, n_t, f_q), &aff(vk2, hw, f_enc)),
        _ => a_lav.clone(),
    };

    // LAV: softmax over pixels per word, weighted sum of vision values.
    let w_lav = oracle_softmax_rows(n_t, hw, &a_lav);
    let lav = oracle_matmul(n_t, hw, c, &w_lav, &v_v);

    // VAL: softmax over words per pixel on the transpose.
    let a_val_t = oracle_transpose(n_t, hw, &a_val);
    let w_val = oracle_softmax_rows(hw, n_t, &a_val_t);
    let val = oracle_matmul(hw, n_t, c, &w_val, &v_l);

    // Fuse: lav · valᵀ, then the output projection.
    let val_t = oracle_transpose(hw, c, &val);
    let fused = oracle_matmul(n_t, c, hw, &lav, &val_t);
    aff(&block.out_proj, n_t, &fused)
}

/// Full-mode injection block computed with loops only: language transform,
/// ReLU-projected attention with no scaling term, softmax over words,
/// value aggregation, scalar gating, and output normalization.
pub fn oracle_imi(
    block: &m3att_core::imi::ImiBlock,
    n: usize,
    c: usize,
    f_dec: &[f64],
    f_l_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let aff = |l: &m3att_core::nn::Linear, x: &[f64]| {
        oracle_affine(n, c, c, x, &l.w.data(), &linear_bias(l))
    };
    let f_lang = aff(&block.lang_transform, f_l_prev);
    let queries = oracle_relu(&aff(&block.w_a, f_dec));
    let f_lang_t = oracle_transpose(n, c, &f_lang);
    let logits = oracle_matmul(n, c, n, &queries, &f_lang_t);
    let attn = oracle_softmax_rows(n, n, &logits);
    let values = oracle_relu(&aff(&block.w_l, &f_lang));
    let injected = oracle_matmul(n, n, c, &attn, &values);
    let gate = block.w_ci.data()[0];
    let mixed: Vec<f64> = f_dec
        .iter()
        .zip(&injected)
        .map(|(d, i)| d + gate * i)
        .collect();
    let out = oracle_bn_rows(
        n,
        c,
        &mixed,
        &block.norm.scale.data(),
        &block.norm.shift.data(),
        block.norm.eps,
    );
    (out, f_lang)
}

/// Projection-target oracle: position-coded word rows plus the sentence
/// row, projected, rectified, and averaged — loops only.
pub fn oracle_lfr_project(
    head: &m3att_core::lfr::LfrHead,
    n: usize,
    c: usize,
    f_t: &[f64],
    f_sent: &[f64],
) -> Vec<f64> {
    let w = head.w_proj.to_vec();
    let pos = head.pos.to_vec();
    let rows = n + 1;
    let mut block = vec![0.0; rows * c];
    for i in 0..n {
        for j in 0..c {
            block[i * c + j] = f_t[i * c + j] + pos[i * c + j];
        }
    }
    block[n * c..].copy_from_slice(&f_sent[..c]);
    let projected = oracle_relu(&oracle_matmul(rows, c, c, &block, &w));
    let mut out = vec![0.0; c];
    for i in 0..rows {
        for j in 0..c {
            out[j] += projected[i * c + j];
        }
    }
    for o in &mut out {
        *o /= rows as f64;
    }
    out
}

/// Reconstruction oracle composed from the affine, normalization, and
/// rectifier references, finishing with the row mean. Follows each trunk
/// layer's own normalization/activation flags (training-mode statistics).
pub fn oracle_lfr_reconstruct(
    head: &m3att_core::lfr::LfrHead,
    n: usize,
    c: usize,
    f_dec: &[f64],
) -> Vec<f64> {
    let mut x = f_dec.to_vec();
    for layer in &head.trunk {
        x = oracle_affine(n, c, c, &x, &layer.w.to_vec(), &linear_bias(layer));
        if let Some(nrm) = &layer.norm {
            x = oracle_bn_rows(
                n,
                c,
                &x,
                &nrm.scale.to_vec(),
                &nrm.shift.to_vec(),
                nrm.eps,
            );
        }
        if matches!(layer.act, m3att_core::nn::Activation::Relu) {
            x = oracle_relu(&x);
        }
    }
    let mut out = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            out[j] += x[i * c + j];
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    out
}
