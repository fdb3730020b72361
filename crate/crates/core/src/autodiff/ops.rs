//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value eagerly, and records
//! a backward closure that accumulates into its parents' gradients. Matrix
//! products go through `matrixmultiply::dgemm`; everything else is explicit
//! loops over the flat row-major buffers.

use super::tensor::Tensor;
use crate::error::{fmt_shape, Error, Result};

// ── gemm kernels ────────────────────────────────────────────────────────────

/// c[m×n] = a[m×k]·b[k×n] + beta·c, all row-major contiguous.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m×k] = g[m×n]·(b[k×n])ᵀ + beta·c.
fn gemm_nt(m: usize, n: usize, k: usize, g: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// c[k×n] = (a[m×k])ᵀ·g[m×n] + beta·c.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── rank helpers ────────────────────────────────────────────────────────────

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(what, format!("expected rank 2, got {}", fmt_shape(s)))),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(what, format!("expected rank 3, got {}", fmt_shape(s)))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [o, i, h, w] => Ok((*o, *i, *h, *w)),
        s => Err(Error::shape(what, format!("expected rank 4, got {}", fmt_shape(s)))),
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
        ));
    }
    Ok(())
}

// ── linear algebra ──────────────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner extents differ: {} vs {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            ),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data(), &b.data(), 0.0, &mut out);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::computed(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                let bd = pb.data();
                pa.with_grad_buf(|ga| gemm_nt(m, n, k, g, &bd, 1.0, ga));
            }
            if pb.requires_grad() {
                let ad = pa.data();
                pb.with_grad_buf(|gb| gemm_tn(m, k, n, &ad, g, 1.0, gb));
            }
        }),
    ))
}

pub fn transpose2(x: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::computed(
        vec![c, r],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.with_grad_buf(|dx| {
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }),
    ))
}

// ── pointwise ───────────────────────────────────────────────────────────────

pub fn relu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let px = x.clone();
    Tensor::computed(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let xd = px.data();
            let contrib: Vec<f64> = xd
                .iter()
                .zip(g)
                .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                .collect();
            drop(xd);
            px.accum_grad(&contrib);
        }),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let saved = out.clone();
    let px = x.clone();
    Tensor::computed(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let contrib: Vec<f64> = saved.iter().zip(g).map(|(&y, &gi)| gi * y * (1.0 - y)).collect();
            px.accum_grad(&contrib);
        }),
    )
}

pub fn tanh(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| v.tanh()).collect();
    let saved = out.clone();
    let px = x.clone();
    Tensor::computed(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let contrib: Vec<f64> = saved.iter().zip(g).map(|(&y, &gi)| gi * (1.0 - y * y)).collect();
            px.accum_grad(&contrib);
        }),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::computed(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            pa.accum_grad(g);
            pb.accum_grad(g);
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::computed(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            pa.accum_grad(g);
            if pb.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accum_grad(&neg);
            }
        }),
    ))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::computed(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.requires_grad() {
                let contrib: Vec<f64> = pb.data().iter().zip(g).map(|(&y, &gi)| gi * y).collect();
                pa.accum_grad(&contrib);
            }
            if pb.requires_grad() {
                let contrib: Vec<f64> = pa.data().iter().zip(g).map(|(&x, &gi)| gi * x).collect();
                pb.accum_grad(&contrib);
            }
        }),
    ))
}

/// Multiply by a compile-time-known constant.
pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let px = x.clone();
    Tensor::computed(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let contrib: Vec<f64> = g.iter().map(|v| v * c).collect();
            px.accum_grad(&contrib);
        }),
    )
}

/// Multiply a tensor by a learnable one-element tensor.
pub fn mul_scalar(s: &Tensor, x: &Tensor) -> Result<Tensor> {
    if s.numel() != 1 {
        return Err(Error::shape(
            "mul_scalar",
            format!("scale must have one element, got {}", fmt_shape(s.shape())),
        ));
    }
    let sv = s.item();
    let out: Vec<f64> = x.data().iter().map(|v| v * sv).collect();
    let (ps, px) = (s.clone(), x.clone());
    Ok(Tensor::computed(
        x.shape().to_vec(),
        out,
        vec![s.clone(), x.clone()],
        Box::new(move |g| {
            if ps.requires_grad() {
                let xd = px.data();
                let ds: f64 = xd.iter().zip(g).map(|(&v, &gi)| v * gi).sum();
                drop(xd);
                ps.accum_grad(&[ds]);
            }
            if px.requires_grad() {
                let contrib: Vec<f64> = g.iter().map(|v| v * sv).collect();
                px.accum_grad(&contrib);
            }
        }),
    ))
}

/// Adds a length-c vector to every row of an r×c matrix.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2(x, "add_bias input")?;
    if b.shape() != [c] {
        return Err(Error::shape(
            "add_bias",
            format!(
                "bias {} does not match row width of {}",
                fmt_shape(b.shape()),
                fmt_shape(x.shape())
            ),
        ));
    }
    let xd = x.data();
    let bd = b.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = xd[i * c + j] + bd[j];
        }
    }
    drop(xd);
    drop(bd);
    let (px, pb) = (x.clone(), b.clone());
    Ok(Tensor::computed(
        vec![r, c],
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |g| {
            px.accum_grad(g);
            if pb.requires_grad() {
                pb.with_grad_buf(|db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                });
            }
        }),
    ))
}

// ── softmax ─────────────────────────────────────────────────────────────────

/// Softmax over the last axis, stabilized by subtracting each slice's max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let n = *shape.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
    let slices = x.numel() / n;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for s in 0..slices {
        let row = &xd[s * n..(s + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[s * n..(s + 1) * n].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[s * n..(s + 1) * n] {
            *o /= sum;
        }
    }
    drop(xd);
    let saved = out.clone();
    let px = x.clone();
    Ok(Tensor::computed(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.with_grad_buf(|dx| {
                for s in 0..slices {
                    let y = &saved[s * n..(s + 1) * n];
                    let gs = &g[s * n..(s + 1) * n];
                    let dot: f64 = y.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        dx[s * n + j] += y[j] * (gs[j] - dot);
                    }
                }
            });
        }),
    ))
}

// ── structure ───────────────────────────────────────────────────────────────

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no inputs"));
    }
    let (_, c) = dims2(parts[0], "concat_rows input")?;
    let mut rows = 0;
    for p in parts {
        let (r, pc) = dims2(p, "concat_rows input")?;
        if pc != c {
            return Err(Error::shape(
                "concat_rows",
                format!("{} vs {}", fmt_shape(parts[0].shape()), fmt_shape(p.shape())),
            ));
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let handles = owned.clone();
    Ok(Tensor::computed(
        vec![rows, c],
        out,
        owned,
        Box::new(move |g| {
            let mut offset = 0;
            for p in &handles {
                let len = p.numel();
                p.accum_grad(&g[offset..offset + len]);
                offset += len;
            }
        }),
    ))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs"));
    }
    let (r, _) = dims2(parts[0], "concat_cols input")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let (pr, pc) = dims2(p, "concat_cols input")?;
        if pr != r {
            return Err(Error::shape(
                "concat_cols",
                format!("{} vs {}", fmt_shape(parts[0].shape()), fmt_shape(p.shape())),
            ));
        }
        widths.push(pc);
        total += pc;
    }
    let mut out = vec![0.0; r * total];
    let mut offset = 0;
    for (p, &pc) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..r {
            out[i * total + offset..i * total + offset + pc].copy_from_slice(&pd[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let handles = owned.clone();
    Ok(Tensor::computed(
        vec![r, total],
        out,
        owned,
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &pc) in handles.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut contrib = vec![0.0; r * pc];
                    for i in 0..r {
                        contrib[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + pc]);
                    }
                    p.accum_grad(&contrib);
                }
                offset += pc;
            }
        }),
    ))
}

pub fn slice_rows(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (r, c) = dims2(x, "slice_rows input")?;
    if from >= to || to > r {
        return Err(Error::shape(
            "slice_rows",
            format!("rows {from}..{to} out of range for {}", fmt_shape(x.shape())),
        ));
    }
    let out = x.data()[from * c..to * c].to_vec();
    let px = x.clone();
    Ok(Tensor::computed(
        vec![to - from, c],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.with_grad_buf(|dx| {
                for (i, v) in g.iter().enumerate() {
                    dx[from * c + i] += v;
                }
            });
        }),
    ))
}

pub fn slice_cols(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (r, c) = dims2(x, "slice_cols input")?;
    if from >= to || to > c {
        return Err(Error::shape(
            "slice_cols",
            format!("cols {from}..{to} out of range for {}", fmt_shape(x.shape())),
        ));
    }
    let w = to - from;
    let xd = x.data();
    let mut out = vec![0.0; r * w];
    for i in 0..r {
        out[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + from..i * c + to]);
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::computed(
        vec![r, w],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.with_grad_buf(|dx| {
                for i in 0..r {
                    for j in 0..w {
                        dx[i * c + from + j] += g[i * w + j];
                    }
                }
            });
        }),
    ))
}

/// Row lookup into an embedding table; out-of-range ids are a vocabulary error.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, c) = dims2(table, "gather_rows table")?;
    if ids.is_empty() {
        return Err(Error::shape("gather_rows", "empty id list"));
    }
    for &id in ids {
        if id >= v {
            return Err(Error::Vocab(format!("token id {id} outside table of {v} rows")));
        }
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        out.extend_from_slice(&td[id * c..(id + 1) * c]);
    }
    drop(td);
    let pt = table.clone();
    let ids_saved = ids.to_vec();
    Ok(Tensor::computed(
        vec![ids.len(), c],
        out,
        vec![table.clone()],
        Box::new(move |g| {
            pt.with_grad_buf(|dt| {
                for (i, &id) in ids_saved.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[i * c + j];
                    }
                }
            });
        }),
    ))
}

/// Mean over one axis of a matrix: axis 0 collapses rows (1×c), axis 1 columns (r×1).
pub fn reduce_mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (r, c) = dims2(x, "reduce_mean input")?;
    let xd = x.data();
    let px = x.clone();
    match axis {
        0 => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += xd[i * c + j];
                }
            }
            for o in &mut out {
                *o /= r as f64;
            }
            drop(xd);
            Ok(Tensor::computed(
                vec![1, c],
                out,
                vec![x.clone()],
                Box::new(move |g| {
                    px.with_grad_buf(|dx| {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += g[j] / r as f64;
                            }
                        }
                    });
                }),
            ))
        }
        1 => {
            let mut out = vec![0.0; r];
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..c {
                    s += xd[i * c + j];
                }
                out[i] = s / c as f64;
            }
            drop(xd);
            Ok(Tensor::computed(
                vec![r, 1],
                out,
                vec![x.clone()],
                Box::new(move |g| {
                    px.with_grad_buf(|dx| {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += g[i] / c as f64;
                            }
                        }
                    });
                }),
            ))
        }
        _ => Err(Error::shape("reduce_mean", format!("axis {axis} out of range"))),
    }
}

pub fn reduce_mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let px = x.clone();
    Tensor::computed(
        vec![1],
        vec![mean],
        vec![x.clone()],
        Box::new(move |g| {
            let share = g[0] / n as f64;
            px.with_grad_buf(|dx| {
                for d in dx.iter_mut() {
                    *d += share;
                }
            });
        }),
    )
}

/// Same buffer order under a new shape.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "reshape",
            format!("{} incompatible with {}", fmt_shape(x.shape()), fmt_shape(shape)),
        ));
    }
    let out = x.to_vec();
    let px = x.clone();
    Ok(Tensor::computed(
        shape.to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.accum_grad(g);
        }),
    ))
}

// ── convolution ─────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let np = ho * wo;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                        cols[r * np + oy * wo + ox] = v;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let np = ho * wo;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += dcols[r * np + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding that preserves spatial extent at
/// stride 1 (odd kernels only) and halves it at stride 2. The bias is
/// optional; normalized layers omit it.
pub fn conv2d(kernel: &Tensor, bias: Option<&Tensor>, x: &Tensor, stride: usize) -> Result<Tensor> {
    let (oc, ic, kh, kw) = dims4(kernel, "conv2d kernel")?;
    let (xc, h, w) = dims3(x, "conv2d input")?;
    if xc != ic {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels {} do not match kernel {}",
                fmt_shape(x.shape()),
                fmt_shape(kernel.shape())
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {} does not match {oc} output channels", fmt_shape(b.shape())),
            ));
        }
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be positive".into()));
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    let ck = ic * kh * kw;
    let np = ho * wo;
    let mut cols = vec![0.0; ck * np];
    im2col(&x.data(), ic, h, w, kh, kw, stride, ho, wo, &mut cols);
    let mut out = vec![0.0; oc * np];
    gemm_nn(oc, ck, np, &kernel.data(), &cols, 0.0, &mut out);
    if let Some(b) = bias {
        let bd = b.data();
        for c in 0..oc {
            let bv = bd[c];
            for o in &mut out[c * np..(c + 1) * np] {
                *o += bv;
            }
        }
    }
    let (pk, pb, px) = (kernel.clone(), bias.cloned(), x.clone());
    let mut parents = vec![kernel.clone(), x.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::computed(
        vec![oc, ho, wo],
        out,
        parents,
        Box::new(move |g| {
            if let Some(pb) = pb.as_ref().filter(|b| b.requires_grad()) {
                pb.with_grad_buf(|db| {
                    for c in 0..oc {
                        db[c] += g[c * np..(c + 1) * np].iter().sum::<f64>();
                    }
                });
            }
            if pk.requires_grad() {
                pk.with_grad_buf(|dk| gemm_nt(oc, np, ck, g, &cols, 1.0, dk));
            }
            if px.requires_grad() {
                let mut dcols = vec![0.0; ck * np];
                {
                    let kd = pk.data();
                    gemm_tn(oc, ck, np, &kd, g, 0.0, &mut dcols);
                }
                px.with_grad_buf(|dx| col2im_add(&dcols, ic, h, w, kh, kw, stride, ho, wo, dx));
            }
        }),
    ))
}

/// Nearest-neighbour 2x upsampling of a [c,h,w] tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "upsample2x input")?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[(ch * h + y) * w + xx];
                let base = (ch * h2 + 2 * y) * w2 + 2 * xx;
                out[base] = v;
                out[base + 1] = v;
                out[base + w2] = v;
                out[base + w2 + 1] = v;
            }
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::computed(
        vec![c, h2, w2],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            px.with_grad_buf(|dx| {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (ch * h2 + 2 * y) * w2 + 2 * xx;
                            dx[(ch * h + y) * w + xx] +=
                                g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
                        }
                    }
                }
            });
        }),
    ))
}

// ── normalization ───────────────────────────────────────────────────────────

struct BnStats {
    mean: Vec<f64>,
    istd: Vec<f64>,
}

/// Per-channel mean and biased variance over `groups` groups of `n` strided
/// samples; `index(g, i, c)` maps to the flat buffer.
fn bn_normalize(
    xd: &[f64],
    n: usize,
    c: usize,
    eps: f64,
    index: impl Fn(usize, usize) -> usize,
) -> (BnStats, Vec<f64>) {
    let mut mean = vec![0.0; c];
    let mut istd = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += xd[index(i, j)];
        }
        mean[j] = s / n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let d = xd[index(i, j)] - mean[j];
            v += d * d;
        }
        istd[j] = 1.0 / (v / n as f64 + eps).sqrt();
    }
    let mut xhat = vec![0.0; xd.len()];
    for j in 0..c {
        for i in 0..n {
            let idx = index(i, j);
            xhat[idx] = (xd[idx] - mean[j]) * istd[j];
        }
    }
    (BnStats { mean, istd }, xhat)
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_impl(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    run_mean: &mut [f64],
    run_var: &mut [f64],
    momentum: f64,
    eps: f64,
    training: bool,
    n: usize,
    c: usize,
    index: impl Fn(usize, usize) -> usize + Clone + 'static,
) -> Result<Tensor> {
    if gamma.shape() != [c] || beta.shape() != [c] || run_mean.len() != c || run_var.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "scale/shift/running extents must all be [{c}], got {} and {}",
                fmt_shape(gamma.shape()),
                fmt_shape(beta.shape())
            ),
        ));
    }
    let xd = x.data();
    let (stats, xhat) = if training {
        bn_normalize(&xd, n, c, eps, &index)
    } else {
        let istd: Vec<f64> = run_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for j in 0..c {
            for i in 0..n {
                let idx = index(i, j);
                xhat[idx] = (xd[idx] - run_mean[j]) * istd[j];
            }
        }
        (
            BnStats {
                mean: run_mean.to_vec(),
                istd,
            },
            xhat,
        )
    };
    drop(xd);
    if training {
        for j in 0..c {
            let var = 1.0 / (stats.istd[j] * stats.istd[j]) - eps;
            run_mean[j] = (1.0 - momentum) * run_mean[j] + momentum * stats.mean[j];
            run_var[j] = (1.0 - momentum) * run_var[j] + momentum * var;
        }
    }
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xhat.len()];
    for j in 0..c {
        for i in 0..n {
            let idx = index(i, j);
            out[idx] = gd[j] * xhat[idx] + bd[j];
        }
    }
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    let istd = stats.istd;
    let shape = x.shape().to_vec();
    Ok(Tensor::computed(
        shape,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gd = pg.data();
            for j in 0..c {
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for i in 0..n {
                    let idx = index(i, j);
                    sg += g[idx];
                    sgx += g[idx] * xhat[idx];
                }
                if pb.requires_grad() {
                    pb.with_grad_buf(|db| db[j] += sg);
                }
                if pg.requires_grad() {
                    pg.with_grad_buf(|dg| dg[j] += sgx);
                }
                if px.requires_grad() {
                    let coef = gd[j] * istd[j];
                    px.with_grad_buf(|dx| {
                        if training {
                            let nf = n as f64;
                            for i in 0..n {
                                let idx = index(i, j);
                                dx[idx] += coef / nf * (nf * g[idx] - sg - xhat[idx] * sgx);
                            }
                        } else {
                            for i in 0..n {
                                let idx = index(i, j);
                                dx[idx] += coef * g[idx];
                            }
                        }
                    });
                }
            }
        }),
    ))
}

/// Batch normalization of an n×c matrix: each channel (column) is normalized
/// over the n sequence/batch positions.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_rows(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    run_mean: &mut [f64],
    run_var: &mut [f64],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<Tensor> {
    let (n, c) = dims2(x, "batchnorm input")?;
    batchnorm_impl(
        x,
        gamma,
        beta,
        run_mean,
        run_var,
        momentum,
        eps,
        training,
        n,
        c,
        move |i, j| i * c + j,
    )
}

/// Batch normalization of a [c,h,w] feature map: each channel is normalized
/// over its h*w spatial positions.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_chw(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    run_mean: &mut [f64],
    run_var: &mut [f64],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "batchnorm input")?;
    let hw = h * w;
    batchnorm_impl(
        x,
        gamma,
        beta,
        run_mean,
        run_var,
        momentum,
        eps,
        training,
        hw,
        c,
        move |i, j| j * hw + i,
    )
}

// ── losses ──────────────────────────────────────────────────────────────────

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy between probabilities and a {0,1} target.
/// Probabilities are clamped to [1e-7, 1-1e-7]; clamped entries get zero
/// gradient. The target is treated as data even if it tracks gradients.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape("bce_loss", pred, gt)?;
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let n = pred.numel();
    let gt_saved = gt.to_vec();
    let mut acc = 0.0;
    {
        let pd = pred.data();
        for (&p, &t) in pd.iter().zip(&gt_saved) {
            let pc = p.clamp(lo, hi);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
    }
    let val = acc / n as f64;
    let pp = pred.clone();
    Ok(Tensor::computed(
        vec![1],
        vec![val],
        vec![pred.clone()],
        Box::new(move |g| {
            let g0 = g[0];
            let pd = pp.data();
            let contrib: Vec<f64> = pd
                .iter()
                .zip(&gt_saved)
                .map(|(&p, &t)| {
                    if p <= lo || p >= hi {
                        0.0
                    } else {
                        g0 * (p - t) / (p * (1.0 - p)) / n as f64
                    }
                })
                .collect();
            drop(pd);
            pp.accum_grad(&contrib);
        }),
    ))
}

// ── method sugar ────────────────────────────────────────────────────────────

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul(self, rhs)
    }

    pub fn t(&self) -> Result<Tensor> {
        transpose2(self)
    }

    pub fn relu(&self) -> Tensor {
        relu(self)
    }

    pub fn sigmoid(&self) -> Tensor {
        sigmoid(self)
    }

    pub fn tanh(&self) -> Tensor {
        tanh(self)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        add(self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        sub(self, rhs)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        hadamard(self, rhs)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        scale(self, c)
    }

    pub fn add_bias(&self, b: &Tensor) -> Result<Tensor> {
        add_bias(self, b)
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        softmax_last(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        reshape(self, shape)
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor> {
        slice_rows(self, from, to)
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor> {
        slice_cols(self, from, to)
    }

    pub fn reduce_mean_axis(&self, axis: usize) -> Result<Tensor> {
        reduce_mean_axis(self, axis)
    }

    pub fn reduce_mean_all(&self) -> Tensor {
        reduce_mean_all(self)
    }
}
