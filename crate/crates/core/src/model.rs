//! Full referring-segmentation model: a small convolutional backbone, a
//! recurrent language encoder, a transformer encoder over pixels, the
//! mutual-attention decoder with optional between-layer language injection,
//! the language-reconstruction head, and a dynamic-kernel mask head —
//! together with the combined training loss.

use crate::autodiff::{self, scope, Tensor};
use crate::decoder::{DecoderStack, EncoderStack};
use crate::error::fmt_shape;
use crate::imi::{ImiChain, ImiMode};
use crate::lfr::{lfr_loss, LfrHead};
use crate::maskdec::MaskHead;
use crate::mutual::{AttentionMode, MutualAttentionState};
use crate::nn::{Activation, Buffer, Conv2d, LanguageEncoder};
use crate::rng;
use crate::{Error, Result};

/// Which decoder the model runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    /// The mutual-attention decoder.
    M3Att,
    /// Standard cross-attention, language querying vision.
    GenericLav,
    /// Vision querying language; converges poorly and exists for the
    /// divergence experiment.
    GenericVal,
}

/// Every knob of the assembled model. `default()` carries the full-scale
/// constants; `toy()` is the desk-scale configuration the harness trains.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared feature width.
    pub c: usize,
    /// Mask-head trunk width.
    pub d: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub heads: usize,
    /// Token pad length; every sequence entering the model has this length.
    pub n_t: usize,
    pub vocab: usize,
    /// Square input image extent; the backbone downsamples by 4.
    pub image_size: usize,
    pub attention: AttentionMode,
    pub imi: ImiMode,
    pub lfr: bool,
    pub baseline: BaselineMode,
    pub w_mask: f64,
    pub w_rec: f64,
    /// Exclude pad positions from attention over words.
    pub pad_masking: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 256,
            d: 512,
            n_enc: 2,
            n_dec: 3,
            heads: 8,
            n_t: 15,
            vocab: 16,
            image_size: 64,
            attention: AttentionMode::Shared,
            imi: ImiMode::Full,
            lfr: true,
            baseline: BaselineMode::M3Att,
            w_mask: 1.0,
            w_rec: 0.1,
            pad_masking: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: one CPU core trains it in minutes. The pad
    /// length matches the synthetic grammar's longest phrase; the mask-head
    /// width is kept narrow because its convolutions run at full mask
    /// resolution and dominate the step cost.
    pub fn toy() -> Self {
        ModelConfig {
            c: 32,
            d: 16,
            n_t: 9,
            image_size: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("C", self.c),
            ("D", self.d),
            ("N_enc", self.n_enc),
            ("N_dec", self.n_dec),
            ("heads", self.heads),
            ("N_t", self.n_t),
            ("image size", self.image_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "C={} is not divisible by heads={}",
                self.c, self.heads
            )));
        }
        if self.c % 4 != 0 {
            return Err(Error::Config(format!(
                "C={} must be divisible by 4 for the 2-d positional code",
                self.c
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("D={} must be even", self.d)));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by the backbone stride 4",
                self.image_size
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config(
                "vocabulary needs at least a pad id and one word".into(),
            ));
        }
        if self.w_mask < 0.0 || self.w_rec < 0.0 || !self.w_mask.is_finite() || !self.w_rec.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got w_mask={} w_rec={}",
                self.w_mask, self.w_rec
            )));
        }
        if self.baseline != BaselineMode::M3Att && self.imi != ImiMode::Off {
            return Err(Error::Config(
                "language injection applies only to the mutual-attention decoder".into(),
            ));
        }
        Ok(())
    }

    /// Encoder-resolution spatial extent.
    pub fn enc_extent(&self) -> usize {
        self.image_size / 4
    }
}

/// Everything one forward produces, kept for loss computation, metrics,
/// dumping, and structural assertions.
pub struct ModelOutputs {
    /// Predicted mask `[1×S×S]`, values in (0,1).
    pub mask: Tensor,
    /// Final decoder stream (`[N_t×C]`, or `[HW×C]` for the vision-query
    /// baseline).
    pub f_dec: Tensor,
    /// Per-layer mutual-attention intermediates (mutual decoder only).
    pub states: Vec<MutualAttentionState>,
    /// Per-gap injection attention (mutual decoder, full injection only).
    pub imi_attn: Vec<Option<Tensor>>,
    /// Word features `[N_t×C]`.
    pub f_t: Tensor,
    /// Sentence feature `[1×C]`.
    pub f_sent: Tensor,
    pub pad_mask: Vec<bool>,
    /// Encoded pixels as rows `[HW×C]`.
    pub f_enc_seq: Tensor,
    /// Encoded pixels as a map `[C×H×W]`.
    pub f_enc_map: Tensor,
}

/// The loss and its parts. The total is exactly
/// `w_mask·L_mask + w_rec·L_rec` in that evaluation order.
pub struct LossBreakdown {
    pub total: Tensor,
    pub l_mask: Tensor,
    pub l_rec: Tensor,
    pub w_mask: f64,
    pub w_rec: f64,
}

/// Mean binary cross-entropy over pixels with the predictions clamped away
/// from 0 and 1.
pub fn bce_mask_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "bce_mask_loss",
            format!(
                "prediction {} and target {} differ",
                fmt_shape(pred.shape()),
                fmt_shape(gt.shape())
            ),
        ));
    }
    autodiff::bce_loss(pred, gt)
}

/// Combines the two losses under the configured weights.
pub fn total_loss(l_mask: &Tensor, l_rec: &Tensor, w_mask: f64, w_rec: f64) -> Result<LossBreakdown> {
    for (name, t) in [("mask loss", l_mask), ("reconstruction loss", l_rec)] {
        if t.numel() != 1 {
            return Err(Error::shape(
                "total_loss",
                format!("{name} must be a scalar, got {}", fmt_shape(t.shape())),
            ));
        }
    }
    let total = l_mask.scale(w_mask).add(&l_rec.scale(w_rec))?;
    Ok(LossBreakdown {
        total,
        l_mask: l_mask.clone(),
        l_rec: l_rec.clone(),
        w_mask,
        w_rec,
    })
}

/// The assembled model. Every submodule draws its parameters from its own
/// seed substream, so toggling one module on or off never shifts another's
/// initialization.
pub struct Model {
    pub cfg: ModelConfig,
    /// 3→32→64→C feature extractor, strides 2, 2, 1.
    pub backbone: [Conv2d; 3],
    pub lang: LanguageEncoder,
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
    pub lfr: Option<LfrHead>,
    pub mask_head: MaskHead,
}

/// Pad id used throughout: tokens equal to 0 are padding.
pub const PAD_ID: usize = 0;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.enc_extent();
        let hw = h * h;

        let mut backbone_rng = rng::substream(cfg.seed, 1);
        let mut lang_rng = rng::substream(cfg.seed, 2);
        let mut enc_rng = rng::substream(cfg.seed, 3);
        let mut dec_rng = rng::substream(cfg.seed, 4);
        let mut imi_rng = rng::substream(cfg.seed, 5);
        let mut lfr_rng = rng::substream(cfg.seed, 6);
        let mut mask_rng = rng::substream(cfg.seed, 7);

        let backbone = [
            Conv2d::new(&mut backbone_rng, 3, 32, 3, 2, true, Activation::Relu),
            Conv2d::new(&mut backbone_rng, 32, 64, 3, 2, true, Activation::Relu),
            Conv2d::new(&mut backbone_rng, 64, cfg.c, 3, 1, true, Activation::Relu),
        ];
        let lang = LanguageEncoder::new(&mut lang_rng, cfg.vocab, cfg.c, PAD_ID);
        let encoder = EncoderStack::new(&mut enc_rng, cfg.c, cfg.heads, cfg.n_enc, h, h)?;
        let decoder = match cfg.baseline {
            BaselineMode::M3Att => {
                let chain = ImiChain::new(&mut imi_rng, cfg.c, cfg.n_dec, cfg.imi);
                DecoderStack::new_mutual(
                    &mut dec_rng,
                    cfg.c,
                    cfg.heads,
                    hw,
                    cfg.n_dec,
                    cfg.attention,
                    chain,
                )?
            }
            BaselineMode::GenericLav => {
                DecoderStack::new_generic_lav(&mut dec_rng, cfg.c, cfg.heads, cfg.n_dec)?
            }
            BaselineMode::GenericVal => {
                DecoderStack::new_generic_val(&mut dec_rng, cfg.c, cfg.heads, cfg.n_dec)?
            }
        };
        let lfr = if cfg.lfr {
            Some(LfrHead::new(&mut lfr_rng, cfg.c, cfg.n_t, false)?)
        } else {
            None
        };
        let mask_head = match cfg.baseline {
            BaselineMode::GenericVal => MaskHead::new_direct(&mut mask_rng, cfg.c, cfg.d)?,
            _ => MaskHead::new_dynamic(&mut mask_rng, cfg.c, cfg.heads, cfg.n_t, cfg.d)?,
        };
        Ok(Model {
            cfg,
            backbone,
            lang,
            encoder,
            decoder,
            lfr,
            mask_head,
        })
    }

    /// Runs image and tokens through the whole pipeline.
    pub fn forward(&self, image: &Tensor, tokens: &[usize], training: bool) -> Result<ModelOutputs> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(
                "model",
                format!(
                    "image must be [3\u{d7}{s}\u{d7}{s}], got {}",
                    fmt_shape(image.shape())
                ),
            ));
        }
        if tokens.len() != self.cfg.n_t {
            return Err(Error::Data(format!(
                "token sequence must be padded to {}, got {} tokens",
                self.cfg.n_t,
                tokens.len()
            )));
        }
        let h = self.cfg.enc_extent();

        let mut x = image.clone();
        {
            let _s = scope("backbone");
            for conv in &self.backbone {
                x = conv.forward(&x, training)?;
            }
        }
        let f_vis_seq = x.reshape(&[self.cfg.c, h * h])?.t()?;
        let f_enc_seq = self.encoder.forward(&f_vis_seq, training)?;
        let f_enc_map = f_enc_seq.t()?.reshape(&[self.cfg.c, h, h])?;

        let (f_t, f_sent, pad_mask) = {
            let _s = scope("lang");
            self.lang.encode(tokens)?
        };
        let mask_opt = self.cfg.pad_masking.then_some(pad_mask.as_slice());
        let dec = self.decoder.forward(&f_t, &f_enc_seq, mask_opt, training)?;
        let mask = {
            let _s = scope("mask");
            self.mask_head.forward(&dec.f_dec, &f_enc_map, training)?
        };
        Ok(ModelOutputs {
            mask,
            f_dec: dec.f_dec,
            states: dec.states,
            imi_attn: dec.imi_attn,
            f_t,
            f_sent,
            pad_mask,
            f_enc_seq,
            f_enc_map,
        })
    }

    /// Computes the combined loss for one sample. The reconstruction term
    /// enters the graph only when the head is present and its weight is
    /// nonzero, so a zero weight leaves the backward pass of the mask
    /// pathway untouched.
    pub fn loss(&self, out: &ModelOutputs, gt_mask: &Tensor, training: bool) -> Result<LossBreakdown> {
        let l_mask = bce_mask_loss(&out.mask, gt_mask)?;
        let l_rec = match &self.lfr {
            Some(head) if self.cfg.w_rec > 0.0 => {
                let target = head.project_language_target(&out.f_t, &out.f_sent)?;
                let rec = head.reconstruct_language(&out.f_dec, training)?;
                lfr_loss(&rec, &target)?
            }
            _ => Tensor::scalar(0.0),
        };
        total_loss(&l_mask, &l_rec, self.cfg.w_mask, self.cfg.w_rec)
    }

    /// Stable name → tensor registry covering every learnable parameter.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.collect(&mut params, &mut buffers);
        params
    }

    /// Stable name → buffer registry covering the normalization statistics.
    pub fn named_buffers(&self) -> Vec<(String, Buffer)> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.collect(&mut params, &mut buffers);
        buffers
    }

    fn collect(&self, params: &mut Vec<(String, Tensor)>, buffers: &mut Vec<(String, Buffer)>) {
        for (i, conv) in self.backbone.iter().enumerate() {
            conv.collect(&format!("backbone.conv{}", i + 1), params, buffers);
        }
        self.lang.collect("lang", params, buffers);
        self.encoder.collect("encoder", params, buffers);
        self.decoder.collect("decoder", params, buffers);
        if let Some(head) = &self.lfr {
            head.collect("lfr", params, buffers);
        }
        self.mask_head.collect("mask", params, buffers);
    }
}
