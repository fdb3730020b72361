//! Reusable neural building blocks: linear layers, batch normalization,
//! multi-head attention, convolution, positional embeddings, and the
//! bidirectional recurrent language encoder.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::{self, Tensor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Shared handle to a batch-norm running-statistics buffer. Buffers are not
/// differentiated; they are updated in place during training forwards and
/// serialized alongside parameters.
pub type Buffer = Rc<RefCell<Vec<f64>>>;

fn buffer(v: Vec<f64>) -> Buffer {
    Rc::new(RefCell::new(v))
}

/// Draws a parameter tensor with entries uniform in `[-k, k]`.
pub(crate) fn uniform_param(r: &mut Rng, shape: &[usize], k: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng::uniform(r, -k, k)).collect();
    Tensor::param(shape, data).expect("parameter shape")
}

/// Pointwise activation applied at the end of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::None => x,
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

// ── batch normalization ─────────────────────────────────────────────────────

/// Per-channel batch normalization with learnable scale/shift and running
/// statistics (momentum 0.1, ε=1e-5). Within a forward, the normalization
/// axis is the row axis for `[n×c]` inputs and the spatial axes for
/// `[c×h×w]` inputs.
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            scale: Tensor::param(&[c], vec![1.0; c]).expect("norm scale"),
            shift: Tensor::param(&[c], vec![0.0; c]).expect("norm shift"),
            running_mean: buffer(vec![0.0; c]),
            running_var: buffer(vec![1.0; c]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes `x[n×c]` per channel over the n axis.
    pub fn forward_rows(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        autodiff::batchnorm_rows(
            x,
            &self.scale,
            &self.shift,
            &mut self.running_mean.borrow_mut(),
            &mut self.running_var.borrow_mut(),
            self.momentum,
            self.eps,
            training,
        )
    }

    /// Normalizes `x[c×h×w]` per channel over the h·w positions.
    pub fn forward_chw(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        autodiff::batchnorm_chw(
            x,
            &self.scale,
            &self.shift,
            &mut self.running_mean.borrow_mut(),
            &mut self.running_var.borrow_mut(),
            self.momentum,
            self.eps,
            training,
        )
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.scale"), self.scale.clone()));
        params.push((format!("{prefix}.shift"), self.shift.clone()));
        buffers.push((format!("{prefix}.running_mean"), Rc::clone(&self.running_mean)));
        buffers.push((format!("{prefix}.running_var"), Rc::clone(&self.running_var)));
    }
}

// ── linear layer ────────────────────────────────────────────────────────────

/// Affine map `y = act(norm(xW + b))` with optional batch normalization and
/// activation. Weights are `[in×out]`; inputs are row-major `[n×in]`.
/// Normalized layers carry no bias: the normalization subtracts the
/// per-channel mean, which would cancel a constant bias exactly and leave
/// it without gradient — its role is taken by the normalization shift.
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
}

impl Linear {
    pub fn new(r: &mut Rng, in_dim: usize, out_dim: usize, norm: bool, act: Activation) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: uniform_param(r, &[in_dim, out_dim], k),
            b: (!norm).then(|| uniform_param(r, &[out_dim], k)),
            norm: norm.then(|| BatchNorm::new(out_dim)),
            act,
        }
    }

    /// A bare affine map: no normalization, no activation. Used for
    /// projections inside attention blocks and other exempt positions.
    pub fn plain(r: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        Self::new(r, in_dim, out_dim, false, Activation::None)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = x.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.add_bias(b)?;
        }
        if let Some(n) = &self.norm {
            y = n.forward_rows(&y, training)?;
        }
        Ok(self.act.apply(y))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.weight"), self.w.clone()));
        if let Some(b) = &self.b {
            params.push((format!("{prefix}.bias"), b.clone()));
        }
        if let Some(n) = &self.norm {
            n.collect(&format!("{prefix}.norm"), params, buffers);
        }
    }
}

// ── multi-head attention ────────────────────────────────────────────────────

/// Scaled dot-product multi-head attention. Query/key/value/output
/// projections are bare affine maps; scaling is `1/√(C/heads)` per head.
/// `key_mask[j] == true` excludes key j by a large negative logit bias.
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// Additive logit bias for masked keys. Large enough that masked weights
/// underflow to exactly zero after the max-subtracted softmax.
pub const MASK_LOGIT: f64 = -1e30;

/// Builds the `[lk]` additive bias row for a key mask.
pub fn key_mask_bias(mask: &[bool]) -> Tensor {
    let data: Vec<f64> = mask.iter().map(|&m| if m { MASK_LOGIT } else { 0.0 }).collect();
    Tensor::from_vec(&[mask.len()], data).expect("mask bias shape")
}

impl MultiHeadAttention {
    pub fn new(r: &mut Rng, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {c} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            head_dim: c / heads,
            wq: Linear::plain(r, c, c),
            wk: Linear::plain(r, c, c),
            wv: Linear::plain(r, c, c),
            wo: Linear::plain(r, c, c),
        })
    }

    pub fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v, key_mask)?.0)
    }

    /// Returns the attended output and the softmaxed `[lq×lk]` weight matrix
    /// of every head.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let c = self.heads * self.head_dim;
        for (name, t) in [("query", q), ("key", k), ("value", v)] {
            if t.rank() != 2 || t.shape()[1] != c {
                return Err(Error::shape(
                    "attention",
                    format!("{name} must be [n x {c}], got {}", crate::error::fmt_shape(t.shape())),
                ));
            }
        }
        let lk = k.shape()[0];
        if v.shape()[0] != lk {
            return Err(Error::shape(
                "attention",
                format!("key rows {lk} != value rows {}", v.shape()[0]),
            ));
        }
        let bias = match key_mask {
            Some(m) => {
                if m.len() != lk {
                    return Err(Error::shape(
                        "attention",
                        format!("mask length {} != key rows {lk}", m.len()),
                    ));
                }
                Some(key_mask_bias(m))
            }
            None => None,
        };
        let qp = self.wq.forward(q, false)?;
        let kp = self.wk.forward(k, false)?;
        let vp = self.wv.forward(v, false)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * self.head_dim;
            let hi = lo + self.head_dim;
            let qh = qp.slice_cols(lo, hi)?;
            let kh = kp.slice_cols(lo, hi)?;
            let vh = vp.slice_cols(lo, hi)?;
            let mut scores = qh.matmul(&kh.t()?)?.scale(scale);
            if let Some(b) = &bias {
                scores = scores.add_bias(b)?;
            }
            let attn = scores.softmax_last()?;
            outs.push(attn.matmul(&vh)?);
            weights.push(attn);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let cat = autodiff::concat_cols(&refs)?;
        Ok((self.wo.forward(&cat, false)?, weights))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.wq.collect(&format!("{prefix}.query"), params, buffers);
        self.wk.collect(&format!("{prefix}.key"), params, buffers);
        self.wv.collect(&format!("{prefix}.value"), params, buffers);
        self.wo.collect(&format!("{prefix}.out"), params, buffers);
    }
}

// ── convolution layer ───────────────────────────────────────────────────────

/// Same-padded square convolution with optional batch normalization and
/// activation, in the order conv → norm → act.
/// Normalized convolutions carry no bias for the same reason as normalized
/// linear layers: the per-channel mean subtraction would cancel it.
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
}

impl Conv2d {
    pub fn new(
        r: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        norm: bool,
        act: Activation,
    ) -> Self {
        let k = 1.0 / ((in_ch * ksize * ksize) as f64).sqrt();
        Conv2d {
            kernel: uniform_param(r, &[out_ch, in_ch, ksize, ksize], k),
            bias: (!norm).then(|| uniform_param(r, &[out_ch], k)),
            stride,
            norm: norm.then(|| BatchNorm::new(out_ch)),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = autodiff::conv2d(&self.kernel, self.bias.as_ref(), x, self.stride)?;
        if let Some(n) = &self.norm {
            y = n.forward_chw(&y, training)?;
        }
        Ok(self.act.apply(y))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.kernel"), self.kernel.clone()));
        if let Some(b) = &self.bias {
            params.push((format!("{prefix}.bias"), b.clone()));
        }
        if let Some(n) = &self.norm {
            n.collect(&format!("{prefix}.norm"), params, buffers);
        }
    }
}

// ── positional embeddings ───────────────────────────────────────────────────

/// Sinusoidal positional embedding `[n×c]` with
/// `e[pos][2i] = sin(pos/10000^(2i/c))`, `e[pos][2i+1] = cos(...)`.
/// Requires even `c`. Entries lie in `[-1, 1]`; the result is a constant.
pub fn positional_embedding_1d(n: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 2 != 0 {
        return Err(Error::Config(format!(
            "positional embedding width must be even and positive, got {c}"
        )));
    }
    let mut data = vec![0.0; n * c];
    for pos in 0..n {
        for i in 0..c / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / c as f64);
            data[pos * c + 2 * i] = angle.sin();
            data[pos * c + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(&[n, c], data)
}

/// Two-dimensional positional embedding `[h·w × c]`: the first `c/2`
/// channels embed the row index, the last `c/2` embed the column index.
/// Requires `c % 4 == 0`. Row-major position order (row `y`, then column `x`).
pub fn positional_embedding_2d(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::Config(format!(
            "2d positional embedding width must be divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let rows = positional_embedding_1d(h, half)?;
    let cols = positional_embedding_1d(w, half)?;
    let rd = rows.data();
    let cd = cols.data();
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * c;
            data[p..p + half].copy_from_slice(&rd[y * half..(y + 1) * half]);
            data[p + half..p + c].copy_from_slice(&cd[x * half..(x + 1) * half]);
        }
    }
    Tensor::from_vec(&[h * w, c], data)
}

// ── recurrent language encoder ──────────────────────────────────────────────

/// One gated recurrent cell with input/forget/cell/output gates. Gate
/// pre-activations are laid out `[i, f, g, o]` along the last axis; the
/// forget-gate bias is initialized to +1.
pub struct LstmCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(r: &mut Rng, in_dim: usize, hidden: usize) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let w_ih = uniform_param(r, &[in_dim, 4 * hidden], k);
        let w_hh = uniform_param(r, &[hidden, 4 * hidden], k);
        let bias = uniform_param(r, &[4 * hidden], k);
        {
            let mut b = bias.data_mut();
            for v in &mut b[hidden..2 * hidden] {
                *v += 1.0;
            }
        }
        LstmCell { w_ih, w_hh, bias, hidden }
    }

    /// Advances the cell one step: `x[1×in]`, state `(h, c)` each `[1×hidden]`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let hid = self.hidden;
        let z = x
            .matmul(&self.w_ih)?
            .add(&h.matmul(&self.w_hh)?)?
            .add_bias(&self.bias)?;
        let i = z.slice_cols(0, hid)?.sigmoid();
        let f = z.slice_cols(hid, 2 * hid)?.sigmoid();
        let g = z.slice_cols(2 * hid, 3 * hid)?.tanh();
        let o = z.slice_cols(3 * hid, 4 * hid)?.sigmoid();
        let c_next = f.hadamard(c)?.add(&i.hadamard(&g)?)?;
        let h_next = o.hadamard(&c_next.tanh())?;
        Ok((h_next, c_next))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        _buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.w_ih"), self.w_ih.clone()));
        params.push((format!("{prefix}.w_hh"), self.w_hh.clone()));
        params.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Bidirectional recurrent language encoder: token embedding, one cell per
/// direction (hidden width C each), and a shared `2C→C` output projection.
///
/// The projection is a bare affine map: normalizing the single sentence row
/// would collapse it to the shift parameter, so the blanket norm rule is
/// deliberately not applied here.
pub struct LanguageEncoder {
    pub embedding: Tensor,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub proj: Linear,
    pub c: usize,
    pub vocab: usize,
    pub pad_id: usize,
}

impl LanguageEncoder {
    pub fn new(r: &mut Rng, vocab: usize, c: usize, pad_id: usize) -> Self {
        let k = 1.0 / (c as f64).sqrt();
        LanguageEncoder {
            embedding: uniform_param(r, &[vocab, c], k),
            fwd: LstmCell::new(r, c, c),
            bwd: LstmCell::new(r, c, c),
            proj: Linear::plain(r, 2 * c, c),
            c,
            vocab,
            pad_id,
        }
    }

    /// Encodes a padded token sequence into per-word features `[n×C]`, a
    /// sentence feature `[1×C]`, and the pad mask (`true` at pad positions).
    ///
    /// Per-word rows concatenate the two directions' states at that position.
    /// The sentence feature concatenates the forward state at the last
    /// non-pad position (last position if all-pad) with the backward state at
    /// position 0, through the same projection.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor, Tensor, Vec<bool>)> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot encode an empty token sequence".into()));
        }
        let n = tokens.len();
        let emb = autodiff::gather_rows(&self.embedding, tokens)?;
        let xs: Vec<Tensor> = (0..n)
            .map(|t| emb.slice_rows(t, t + 1))
            .collect::<Result<_>>()?;

        let zero = || Tensor::from_vec(&[1, self.c], vec![0.0; self.c]).expect("state shape");
        let (mut h, mut c) = (zero(), zero());
        let mut hf = Vec::with_capacity(n);
        for x in &xs {
            let (h2, c2) = self.fwd.step(x, &h, &c)?;
            hf.push(h2.clone());
            h = h2;
            c = c2;
        }
        let (mut h, mut c) = (zero(), zero());
        let mut hb = vec![zero(); n];
        for t in (0..n).rev() {
            let (h2, c2) = self.bwd.step(&xs[t], &h, &c)?;
            hb[t] = h2.clone();
            h = h2;
            c = c2;
        }

        let per_word: Vec<Tensor> = (0..n)
            .map(|t| autodiff::concat_cols(&[&hf[t], &hb[t]]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = per_word.iter().collect();
        let stacked = autodiff::concat_rows(&refs)?;
        let f_t = self.proj.forward(&stacked, false)?;

        let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == self.pad_id).collect();
        let last = pad_mask.iter().rposition(|&p| !p).unwrap_or(n - 1);
        let sent = autodiff::concat_cols(&[&hf[last], &hb[0]])?;
        let f_sent = self.proj.forward(&sent, false)?;
        Ok((f_t, f_sent, pad_mask))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.embedding"), self.embedding.clone()));
        self.fwd.collect(&format!("{prefix}.fwd"), params, buffers);
        self.bwd.collect(&format!("{prefix}.bwd"), params, buffers);
        self.proj.collect(&format!("{prefix}.proj"), params, buffers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(l: &mut Linear, dim: usize) {
        let mut w = l.w.data_mut();
        w.fill(0.0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        drop(w);
        l.b.as_ref().unwrap().data_mut().fill(0.0);
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let mut r = rng::seeded(1);
        let mut l = Linear::new(&mut r, 3, 3, false, Activation::None);
        identity(&mut l, 3);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        let y = l.forward(&x, true).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn linear_zero_input_gives_relu_of_bias() {
        let mut r = rng::seeded(2);
        let l = Linear::new(&mut r, 2, 3, false, Activation::Relu);
        l.b.as_ref().unwrap().data_mut().copy_from_slice(&[1.5, -2.0, 0.25]);
        let x = Tensor::from_vec(&[4, 2], vec![0.0; 8]).unwrap();
        let y = l.forward(&x, true).unwrap();
        for row in 0..4 {
            assert_eq!(&y.data()[row * 3..(row + 1) * 3], &[1.5, 0.0, 0.25]);
        }
    }

    #[test]
    fn single_head_identity_attention_returns_the_row() {
        let mut r = rng::seeded(3);
        let mut mha = MultiHeadAttention::new(&mut r, 4, 1).unwrap();
        for l in [&mut mha.wq, &mut mha.wk, &mut mha.wv, &mut mha.wo] {
            identity(l, 4);
        }
        let q = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let y = mha.forward(&q, &q, &q, None).unwrap();
        assert_eq!(y.to_vec(), q.to_vec());
    }

    #[test]
    fn mask_all_but_one_key_selects_that_value_exactly() {
        let mut r = rng::seeded(4);
        let mut mha = MultiHeadAttention::new(&mut r, 4, 2).unwrap();
        for l in [&mut mha.wq, &mut mha.wk, &mut mha.wv, &mut mha.wo] {
            identity(l, 4);
        }
        let q = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let kv = Tensor::from_vec(
            &[3, 4],
            vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.5, -2.0, 0.0, 1.0, 0.0, -1.0],
        )
        .unwrap();
        let mask = vec![true, false, true];
        let y = mha.forward(&q, &kv, &kv, Some(&mask)).unwrap();
        assert_eq!(y.to_vec(), vec![-1.0, 0.5, 2.5, -2.0]);
    }

    #[test]
    fn attention_rejects_indivisible_width() {
        let mut r = rng::seeded(5);
        assert!(MultiHeadAttention::new(&mut r, 5, 2).is_err());
        assert!(MultiHeadAttention::new(&mut r, 4, 0).is_err());
    }

    #[test]
    fn batchnorm_constant_channels_collapse_to_near_zero() {
        let bn = BatchNorm::new(2);
        let x = Tensor::from_vec(&[4, 2], vec![3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]).unwrap();
        let y = bn.forward_rows(&x, true).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-2));
    }

    #[test]
    fn batchnorm_zero_scale_broadcasts_shift() {
        let bn = BatchNorm::new(3);
        bn.scale.data_mut().fill(0.0);
        bn.shift.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut r = rng::seeded(6);
        let x = uniform_param(&mut r, &[5, 3], 1.0);
        let y = bn.forward_rows(&x, true).unwrap();
        for row in 0..5 {
            assert_eq!(&y.data()[row * 3..(row + 1) * 3], &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv_identity_1x1_kernel_is_identity() {
        let mut r = rng::seeded(7);
        let conv = Conv2d::new(&mut r, 2, 2, 1, 1, false, Activation::None);
        {
            let mut k = conv.kernel.data_mut();
            k.fill(0.0);
            k[0] = 1.0; // out 0 <- in 0
            k[3] = 1.0; // out 1 <- in 1
        }
        conv.bias.as_ref().unwrap().data_mut().fill(0.0);
        let x = uniform_param(&mut r, &[2, 3, 3], 1.0);
        let y = conv.forward(&x, true).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn positional_embedding_entries_bounded_and_rows_distinct() {
        let e = positional_embedding_1d(512, 4).unwrap();
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = e.data();
        for a in 0..512 {
            for b in (a + 1)..512 {
                let dist: f64 = (0..4)
                    .map(|j| (d[a * 4 + j] - d[b * 4 + j]).powi(2))
                    .sum();
                assert!(dist > 0.0, "rows {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn positional_embedding_2d_concatenates_row_and_col_codes() {
        let e = positional_embedding_2d(3, 2, 8).unwrap();
        assert_eq!(e.shape(), &[6, 8]);
        let rows = positional_embedding_1d(3, 4).unwrap();
        let cols = positional_embedding_1d(2, 4).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                let p = (y * 2 + x) * 8;
                assert_eq!(&e.data()[p..p + 4], &rows.data()[y * 4..(y + 1) * 4]);
                assert_eq!(&e.data()[p + 4..p + 8], &cols.data()[x * 4..(x + 1) * 4]);
            }
        }
        assert!(positional_embedding_2d(2, 2, 6).is_err());
    }

    #[test]
    fn encoder_all_pad_sequence_is_flagged_and_deterministic() {
        let build = || {
            let mut r = rng::seeded(11);
            LanguageEncoder::new(&mut r, 8, 6, 0)
        };
        let enc = build();
        let (f_t, f_sent, mask) = enc.encode(&[0, 0, 0, 0]).unwrap();
        assert_eq!(f_t.shape(), &[4, 6]);
        assert_eq!(f_sent.shape(), &[1, 6]);
        assert!(mask.iter().all(|&m| m));

        let enc2 = build();
        let (f_t2, f_sent2, _) = enc2.encode(&[0, 0, 0, 0]).unwrap();
        assert_eq!(f_t.to_vec(), f_t2.to_vec());
        assert_eq!(f_sent.to_vec(), f_sent2.to_vec());
    }

    #[test]
    fn encoder_rejects_out_of_vocabulary_ids() {
        let mut r = rng::seeded(12);
        let enc = LanguageEncoder::new(&mut r, 8, 4, 0);
        let err = enc.encode(&[1, 9, 0]).unwrap_err();
        assert!(matches!(err, Error::Vocab(_)));
    }

    #[test]
    fn encoder_single_token_shapes() {
        let mut r = rng::seeded(13);
        let enc = LanguageEncoder::new(&mut r, 8, 4, 0);
        let (f_t, f_sent, mask) = enc.encode(&[3, 0, 0]).unwrap();
        assert_eq!(f_t.shape(), &[3, 4]);
        assert_eq!(f_sent.shape(), &[1, 4]);
        assert_eq!(mask, vec![false, true, true]);
    }
}
