//! Vision transformer encoder and the multi-modal decoder stack: each
//! decoder layer composes query self-attention, mutual attention against the
//! encoded vision feature, and cross-attention over the fused feature, with
//! post-norm residuals around every sub-block.

use crate::autodiff::{scope, Tensor};
use crate::imi::{ImiChain, ImiMode};
use crate::mutual::{AttentionMode, MutualAttention, MutualAttentionState};
use crate::nn::{positional_embedding_2d, Activation, BatchNorm, Buffer, Linear, MultiHeadAttention};
use crate::rng::Rng;
use crate::{Error, Result};

// ── encoder ─────────────────────────────────────────────────────────────────

/// One encoder layer: self-attention and a 4× feed-forward, each wrapped in
/// a post-norm residual. The expansion layer carries the blanket norm+ReLU;
/// the contraction is bare so the residual stream stays signed.
pub struct EncoderLayer {
    pub sa: MultiHeadAttention,
    pub norm1: BatchNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: BatchNorm,
}

impl EncoderLayer {
    pub fn new(r: &mut Rng, c: usize, heads: usize) -> Result<Self> {
        Ok(EncoderLayer {
            sa: MultiHeadAttention::new(r, c, heads)?,
            norm1: BatchNorm::new(c),
            ff1: Linear::new(r, c, 4 * c, true, Activation::Relu),
            ff2: Linear::plain(r, 4 * c, c),
            norm2: BatchNorm::new(c),
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let attended = self.sa.forward(x, x, x, None)?;
        let x1 = self.norm1.forward_rows(&x.add(&attended)?, training)?;
        let ff = self.ff2.forward(&self.ff1.forward(&x1, training)?, training)?;
        self.norm2.forward_rows(&x1.add(&ff)?, training)
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.sa.collect(&format!("{prefix}.sa"), params, buffers);
        self.norm1.collect(&format!("{prefix}.norm1"), params, buffers);
        self.ff1.collect(&format!("{prefix}.ff1"), params, buffers);
        self.ff2.collect(&format!("{prefix}.ff2"), params, buffers);
        self.norm2.collect(&format!("{prefix}.norm2"), params, buffers);
    }
}

/// Encoder stack over flattened vision features `[HW×C]`. A fixed 2D
/// sinusoidal positional embedding is added once at the input.
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub pos: Tensor,
    pub hw: usize,
}

impl EncoderStack {
    pub fn new(r: &mut Rng, c: usize, heads: usize, n_enc: usize, h: usize, w: usize) -> Result<Self> {
        let layers = (0..n_enc)
            .map(|_| EncoderLayer::new(r, c, heads))
            .collect::<Result<_>>()?;
        Ok(EncoderStack {
            layers,
            pos: positional_embedding_2d(h, w, c)?,
            hw: h * w,
        })
    }

    pub fn forward(&self, f_vis: &Tensor, training: bool) -> Result<Tensor> {
        if f_vis.rank() != 2 || f_vis.shape()[0] != self.hw {
            return Err(Error::Config(format!(
                "encoder is configured for {} positions, input is {}",
                self.hw,
                crate::error::fmt_shape(f_vis.shape())
            )));
        }
        let _s = scope("encoder");
        let mut x = f_vis.add(&self.pos)?;
        for layer in &self.layers {
            x = layer.forward(&x, training)?;
        }
        Ok(x)
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.layer{}", i + 1), params, buffers);
        }
    }
}

// ── decoder layers ──────────────────────────────────────────────────────────

/// A full decoder layer: query self-attention, mutual attention against the
/// encoder output, and cross-attention that queries the fused feature with
/// the query stream (key = value = fused feature). Post-norm residuals
/// around all three sub-blocks; pad positions are masked as keys in both
/// attention blocks when a mask is given.
pub struct DecoderLayer {
    pub sa: MultiHeadAttention,
    pub norm1: BatchNorm,
    pub m3att: MutualAttention,
    pub norm2: BatchNorm,
    pub ca: MultiHeadAttention,
    pub norm3: BatchNorm,
}

impl DecoderLayer {
    pub fn new(
        r: &mut Rng,
        c: usize,
        heads: usize,
        hw_cfg: usize,
        mode: AttentionMode,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            sa: MultiHeadAttention::new(r, c, heads)?,
            norm1: BatchNorm::new(c),
            m3att: MutualAttention::new(r, c, hw_cfg, mode),
            norm2: BatchNorm::new(c),
            ca: MultiHeadAttention::new(r, c, heads)?,
            norm3: BatchNorm::new(c),
        })
    }

    pub fn forward(
        &self,
        query_in: &Tensor,
        f_enc: &Tensor,
        pad_mask: Option<&[bool]>,
        training: bool,
    ) -> Result<(Tensor, MutualAttentionState)> {
        let attended = self.sa.forward(query_in, query_in, query_in, pad_mask)?;
        let f_q = self.norm1.forward_rows(&query_in.add(&attended)?, training)?;
        let (fused, state) = self.m3att.forward(&f_q, f_enc)?;
        let fused_res = self.norm2.forward_rows(&f_q.add(&fused)?, training)?;
        let crossed = self.ca.forward(&f_q, &fused_res, &fused_res, pad_mask)?;
        let out = self.norm3.forward_rows(&f_q.add(&crossed)?, training)?;
        Ok((out, state))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.sa.collect(&format!("{prefix}.sa"), params, buffers);
        self.norm1.collect(&format!("{prefix}.norm1"), params, buffers);
        self.m3att.collect(&format!("{prefix}.m3att"), params, buffers);
        self.norm2.collect(&format!("{prefix}.norm2"), params, buffers);
        self.ca.collect(&format!("{prefix}.ca"), params, buffers);
        self.norm3.collect(&format!("{prefix}.norm3"), params, buffers);
    }
}

/// Baseline layer replacing mutual attention with one-directional
/// cross-attention: language queries attend over vision keys/values.
pub struct GenericLavLayer {
    pub sa: MultiHeadAttention,
    pub norm1: BatchNorm,
    pub ca: MultiHeadAttention,
    pub norm2: BatchNorm,
}

impl GenericLavLayer {
    pub fn new(r: &mut Rng, c: usize, heads: usize) -> Result<Self> {
        Ok(GenericLavLayer {
            sa: MultiHeadAttention::new(r, c, heads)?,
            norm1: BatchNorm::new(c),
            ca: MultiHeadAttention::new(r, c, heads)?,
            norm2: BatchNorm::new(c),
        })
    }

    pub fn forward(
        &self,
        query_in: &Tensor,
        f_enc: &Tensor,
        pad_mask: Option<&[bool]>,
        training: bool,
    ) -> Result<Tensor> {
        let attended = self.sa.forward(query_in, query_in, query_in, pad_mask)?;
        let f_q = self.norm1.forward_rows(&query_in.add(&attended)?, training)?;
        let crossed = self.ca.forward(&f_q, f_enc, f_enc, None)?;
        self.norm2.forward_rows(&f_q.add(&crossed)?, training)
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.sa.collect(&format!("{prefix}.sa"), params, buffers);
        self.norm1.collect(&format!("{prefix}.norm1"), params, buffers);
        self.ca.collect(&format!("{prefix}.ca"), params, buffers);
        self.norm2.collect(&format!("{prefix}.norm2"), params, buffers);
    }
}

/// Reversed baseline for the divergence probe: the vision stream is the
/// query and language rows are keys/values, so the stack output stays at
/// vision shape `[HW×C]`.
pub struct GenericValLayer {
    pub sa: MultiHeadAttention,
    pub norm1: BatchNorm,
    pub ca: MultiHeadAttention,
    pub norm2: BatchNorm,
}

impl GenericValLayer {
    pub fn new(r: &mut Rng, c: usize, heads: usize) -> Result<Self> {
        Ok(GenericValLayer {
            sa: MultiHeadAttention::new(r, c, heads)?,
            norm1: BatchNorm::new(c),
            ca: MultiHeadAttention::new(r, c, heads)?,
            norm2: BatchNorm::new(c),
        })
    }

    pub fn forward(
        &self,
        vis_stream: &Tensor,
        f_t: &Tensor,
        pad_mask: Option<&[bool]>,
        training: bool,
    ) -> Result<Tensor> {
        let attended = self.sa.forward(vis_stream, vis_stream, vis_stream, None)?;
        let f_q = self.norm1.forward_rows(&vis_stream.add(&attended)?, training)?;
        let crossed = self.ca.forward(&f_q, f_t, f_t, pad_mask)?;
        self.norm2.forward_rows(&f_q.add(&crossed)?, training)
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.sa.collect(&format!("{prefix}.sa"), params, buffers);
        self.norm1.collect(&format!("{prefix}.norm1"), params, buffers);
        self.ca.collect(&format!("{prefix}.ca"), params, buffers);
        self.norm2.collect(&format!("{prefix}.norm2"), params, buffers);
    }
}

// ── decoder stack ───────────────────────────────────────────────────────────

/// The stack variants selectable as baselines.
pub enum DecoderKind {
    Mutual {
        layers: Vec<DecoderLayer>,
        imi: ImiChain,
    },
    GenericLav {
        layers: Vec<GenericLavLayer>,
    },
    GenericVal {
        layers: Vec<GenericValLayer>,
    },
}

/// Output bundle of one stack forward.
pub struct DecoderOutputs {
    /// Final decoder feature: `[N_t×C]` for the mutual and LAV variants,
    /// `[HW×C]` for the reversed baseline.
    pub f_dec: Tensor,
    /// Per-layer mutual-attention states (mutual variant only).
    pub states: Vec<MutualAttentionState>,
    /// Per-gap injection attention maps (mutual variant with injection).
    pub imi_attn: Vec<Option<Tensor>>,
}

pub struct DecoderStack {
    pub kind: DecoderKind,
}

impl DecoderStack {
    /// Builds the mutual-attention stack. The injection chain is constructed
    /// by the caller so its parameters come from an independent stream.
    pub fn new_mutual(
        r: &mut Rng,
        c: usize,
        heads: usize,
        hw_cfg: usize,
        n_dec: usize,
        mode: AttentionMode,
        imi: ImiChain,
    ) -> Result<Self> {
        if n_dec == 0 {
            return Err(Error::Config("decoder stack cannot be empty".into()));
        }
        if imi.mode != ImiMode::Off && imi.blocks.len() != n_dec - 1 {
            return Err(Error::Config(format!(
                "injection chain has {} blocks for {} decoder gaps",
                imi.blocks.len(),
                n_dec - 1
            )));
        }
        let layers = (0..n_dec)
            .map(|_| DecoderLayer::new(r, c, heads, hw_cfg, mode))
            .collect::<Result<_>>()?;
        Ok(DecoderStack {
            kind: DecoderKind::Mutual { layers, imi },
        })
    }

    pub fn new_generic_lav(r: &mut Rng, c: usize, heads: usize, n_dec: usize) -> Result<Self> {
        if n_dec == 0 {
            return Err(Error::Config("decoder stack cannot be empty".into()));
        }
        let layers = (0..n_dec)
            .map(|_| GenericLavLayer::new(r, c, heads))
            .collect::<Result<_>>()?;
        Ok(DecoderStack {
            kind: DecoderKind::GenericLav { layers },
        })
    }

    pub fn new_generic_val(r: &mut Rng, c: usize, heads: usize, n_dec: usize) -> Result<Self> {
        if n_dec == 0 {
            return Err(Error::Config("decoder stack cannot be empty".into()));
        }
        let layers = (0..n_dec)
            .map(|_| GenericValLayer::new(r, c, heads))
            .collect::<Result<_>>()?;
        Ok(DecoderStack {
            kind: DecoderKind::GenericVal { layers },
        })
    }

    /// Runs the stack. Word features enter only the first layer; between
    /// layers, the injection chain (when active) adjusts the stream.
    pub fn forward(
        &self,
        f_t: &Tensor,
        f_enc: &Tensor,
        pad_mask: Option<&[bool]>,
        training: bool,
    ) -> Result<DecoderOutputs> {
        let _s = scope("decoder");
        match &self.kind {
            DecoderKind::Mutual { layers, imi } => {
                let mut stream = f_t.clone();
                let mut f_lang = f_t.clone();
                let mut states = Vec::with_capacity(layers.len());
                let mut imi_attn = Vec::new();
                for (i, layer) in layers.iter().enumerate() {
                    let out = {
                        let _l = scope(&format!("layer{}", i + 1));
                        let (out, state) = layer.forward(&stream, f_enc, pad_mask, training)?;
                        states.push(state);
                        out
                    };
                    stream = out;
                    if i + 1 < layers.len() {
                        if imi.mode == ImiMode::Off {
                            imi_attn.push(None);
                        } else {
                            let _g = scope(&format!("gap{}", i + 1));
                            let o = imi.blocks[i].forward(&stream, &f_lang, f_t, imi.mode, training)?;
                            stream = o.f_dec;
                            f_lang = o.f_lang;
                            imi_attn.push(o.attn);
                        }
                    }
                }
                Ok(DecoderOutputs { f_dec: stream, states, imi_attn })
            }
            DecoderKind::GenericLav { layers } => {
                let mut stream = f_t.clone();
                for (i, layer) in layers.iter().enumerate() {
                    let _l = scope(&format!("layer{}", i + 1));
                    stream = layer.forward(&stream, f_enc, pad_mask, training)?;
                }
                Ok(DecoderOutputs { f_dec: stream, states: Vec::new(), imi_attn: Vec::new() })
            }
            DecoderKind::GenericVal { layers } => {
                let mut stream = f_enc.clone();
                for (i, layer) in layers.iter().enumerate() {
                    let _l = scope(&format!("layer{}", i + 1));
                    stream = layer.forward(&stream, f_t, pad_mask, training)?;
                }
                Ok(DecoderOutputs { f_dec: stream, states: Vec::new(), imi_attn: Vec::new() })
            }
        }
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        match &self.kind {
            DecoderKind::Mutual { layers, imi } => {
                for (i, l) in layers.iter().enumerate() {
                    l.collect(&format!("{prefix}.layer{}", i + 1), params, buffers);
                }
                imi.collect(&format!("{prefix}.imi"), params, buffers);
            }
            DecoderKind::GenericLav { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    l.collect(&format!("{prefix}.layer{}", i + 1), params, buffers);
                }
            }
            DecoderKind::GenericVal { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    l.collect(&format!("{prefix}.layer{}", i + 1), params, buffers);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_t(r: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng::uniform(r, -1.0, 1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn zero_depth_encoder_adds_only_the_positional_code() {
        let mut r = rng::seeded(1);
        let enc = EncoderStack::new(&mut r, 8, 2, 0, 2, 2).unwrap();
        let x = rand_t(&mut r, &[4, 8]);
        let y = enc.forward(&x, true).unwrap();
        let want: Vec<f64> = x
            .data()
            .iter()
            .zip(enc.pos.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(y.to_vec(), want);
    }

    #[test]
    fn encoder_keeps_shape_and_rejects_wrong_spatial_size() {
        let mut r = rng::seeded(2);
        let enc = EncoderStack::new(&mut r, 8, 2, 2, 2, 3).unwrap();
        let x = rand_t(&mut r, &[6, 8]);
        let y = enc.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[6, 8]);
        let bad = rand_t(&mut r, &[4, 8]);
        assert!(enc.forward(&bad, true).is_err());
    }

    #[test]
    fn zeroed_sublayers_fall_through_to_the_normalized_query() {
        let mut r = rng::seeded(3);
        let layer = DecoderLayer::new(&mut r, 6, 2, 4, AttentionMode::Shared).unwrap();
        let zero = |l: &Linear| {
            l.w.data_mut().fill(0.0);
            l.b.as_ref().unwrap().data_mut().fill(0.0);
        };
        for mha in [&layer.sa, &layer.ca] {
            zero(&mha.wq);
            zero(&mha.wk);
            zero(&mha.wv);
            zero(&mha.wo);
        }
        zero(&layer.m3att.lang_key);
        zero(&layer.m3att.lang_value);
        zero(&layer.m3att.vis_key);
        zero(&layer.m3att.vis_value);
        zero(&layer.m3att.out_proj);

        let x = rand_t(&mut r, &[3, 6]);
        let f_enc = rand_t(&mut r, &[4, 6]);
        let (out, _) = layer.forward(&x, &f_enc, None, true).unwrap();
        let fresh = BatchNorm::new(6);
        let want = fresh.forward_rows(&x, true).unwrap();
        let diff = out
            .data()
            .iter()
            .zip(want.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-4, "fall-through drifted by {diff}");
    }

    #[test]
    fn paper_width_layer_contract() {
        let mut r = rng::seeded(4);
        let layer = DecoderLayer::new(&mut r, 256, 8, 4, AttentionMode::Shared).unwrap();
        let x = rand_t(&mut r, &[15, 256]);
        let f_enc = rand_t(&mut r, &[4, 256]);
        let (out, state) = layer.forward(&x, &f_enc, None, true).unwrap();
        assert_eq!(out.shape(), &[15, 256]);
        assert_eq!(state.logits_lav.shape(), &[15, 4]);
    }

    #[test]
    fn single_layer_stack_equals_the_layer() {
        let mut r = rng::seeded(5);
        let imi = ImiChain::new(&mut rng::substream(5, 9), 6, 1, ImiMode::Off);
        let stack =
            DecoderStack::new_mutual(&mut r, 6, 2, 4, 1, AttentionMode::Shared, imi).unwrap();
        let f_t = rand_t(&mut r, &[3, 6]);
        let f_enc = rand_t(&mut r, &[4, 6]);
        let out = stack.forward(&f_t, &f_enc, None, false).unwrap();
        let DecoderKind::Mutual { layers, .. } = &stack.kind else {
            unreachable!()
        };
        let (direct, _) = layers[0].forward(&f_t, &f_enc, None, false).unwrap();
        assert_eq!(out.f_dec.to_vec(), direct.to_vec());
        assert_eq!(out.states.len(), 1);
    }

    #[test]
    fn depth_sweep_runs_and_keeps_shapes() {
        for n_dec in 1..=4 {
            let mut r = rng::seeded(6);
            let imi = ImiChain::new(&mut rng::substream(6, 9), 8, n_dec, ImiMode::Full);
            let stack =
                DecoderStack::new_mutual(&mut r, 8, 2, 4, n_dec, AttentionMode::Shared, imi)
                    .unwrap();
            let f_t = rand_t(&mut r, &[3, 8]);
            let f_enc = rand_t(&mut r, &[4, 8]);
            let out = stack.forward(&f_t, &f_enc, None, true).unwrap();
            assert_eq!(out.f_dec.shape(), &[3, 8]);
            assert_eq!(out.states.len(), n_dec);
            assert_eq!(out.imi_attn.len(), n_dec - 1);
            assert!(out.imi_attn.iter().all(|a| a.is_some()));
        }
    }

    #[test]
    fn generic_baselines_keep_their_stream_shapes() {
        let mut r = rng::seeded(7);
        let lav = DecoderStack::new_generic_lav(&mut r, 8, 2, 2).unwrap();
        let val = DecoderStack::new_generic_val(&mut r, 8, 2, 2).unwrap();
        let f_t = rand_t(&mut r, &[3, 8]);
        let f_enc = rand_t(&mut r, &[6, 8]);
        let mask = vec![false, false, true];
        let out_lav = lav.forward(&f_t, &f_enc, Some(&mask), true).unwrap();
        let out_val = val.forward(&f_t, &f_enc, Some(&mask), true).unwrap();
        assert_eq!(out_lav.f_dec.shape(), &[3, 8]);
        assert_eq!(out_val.f_dec.shape(), &[6, 8]);
    }

    #[test]
    fn empty_stack_is_rejected() {
        let mut r = rng::seeded(8);
        let imi = ImiChain::new(&mut rng::substream(8, 9), 4, 1, ImiMode::Off);
        assert!(DecoderStack::new_mutual(&mut r, 4, 2, 4, 0, AttentionMode::Shared, imi).is_err());
        assert!(DecoderStack::new_generic_lav(&mut r, 4, 2, 0).is_err());
    }

    #[test]
    fn mismatched_chain_length_is_rejected() {
        let mut r = rng::seeded(9);
        let imi = ImiChain::new(&mut rng::substream(9, 9), 4, 2, ImiMode::Full);
        assert!(DecoderStack::new_mutual(&mut r, 4, 2, 4, 3, AttentionMode::Shared, imi).is_err());
    }
}
