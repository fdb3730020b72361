//! Mutual attention: one cross-modal affinity matrix normalized along both
//! axes, producing a language-attended vision feature (LAV) and a
//! vision-attended language feature (VAL), fused back into a multi-modal
//! feature of language shape.

use crate::autodiff::Tensor;
use crate::nn::{Buffer, Linear};
use crate::rng::Rng;
use crate::{Error, Result};

/// Whether both attention directions read one affinity matrix or each
/// direction projects its own keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Shared,
    Independent,
}

/// Parameters of the mutual-attention block. All projections are bare
/// affine maps `C→C` except `out_proj`, which maps the fused `HW_cfg`-wide
/// feature back to `C`. The spatial size is fixed at construction; inputs
/// with a different `HW` are rejected.
pub struct MutualAttention {
    pub lang_key: Linear,
    pub lang_value: Linear,
    pub vis_key: Linear,
    pub vis_value: Linear,
    /// Second key pair (language, vision) for the second attention
    /// direction; present only in independent mode.
    pub lang_key2: Option<Linear>,
    pub vis_key2: Option<Linear>,
    pub out_proj: Linear,
    pub mode: AttentionMode,
    pub c: usize,
    pub hw_cfg: usize,
}

/// Every intermediate of one mutual-attention forward, kept for inspection,
/// dumping, and structural assertions.
pub struct MutualAttentionState {
    /// Affinity logits consumed by the LAV direction, `[N_t×HW]`.
    pub logits_lav: Tensor,
    /// Affinity logits consumed by the VAL direction, `[N_t×HW]`. In shared
    /// mode this is the same graph node as `logits_lav`.
    pub logits_val: Tensor,
    /// Softmaxed LAV weights over the spatial axis, `[N_t×HW]`.
    pub lav_weights: Tensor,
    /// Softmaxed VAL weights over the word axis, `[HW×N_t]`.
    pub val_weights: Tensor,
    /// Language-attended vision feature, `[N_t×C]`.
    pub lav: Tensor,
    /// Vision-attended language feature, `[HW×C]`.
    pub val: Tensor,
    /// Fused multi-modal map before the output projection, `[N_t×HW]`.
    pub fused: Tensor,
    /// Block output, `[N_t×C]`.
    pub output: Tensor,
}

/// Affinity between every word and every pixel: `(1/√C)·K_L·K_Vᵀ`.
pub fn mutual_matrix(lang_key: &Tensor, vis_key: &Tensor) -> Result<Tensor> {
    let c = lang_key.shape().get(1).copied().unwrap_or(0);
    if vis_key.rank() != 2 || vis_key.shape()[1] != c || c == 0 {
        return Err(Error::shape(
            "mutual_matrix",
            format!(
                "key widths differ: {} vs {}",
                crate::error::fmt_shape(lang_key.shape()),
                crate::error::fmt_shape(vis_key.shape())
            ),
        ));
    }
    Ok(lang_key
        .matmul(&vis_key.t()?)?
        .scale(1.0 / (c as f64).sqrt()))
}

/// Language-attended vision: softmax over the spatial axis of each word's
/// affinity row, then a weighted sum of vision values. Returns the attended
/// feature `[N_t×C]` and the weights `[N_t×HW]`.
pub fn attend_lav(a_mut: &Tensor, vis_value: &Tensor) -> Result<(Tensor, Tensor)> {
    let weights = a_mut.softmax_last()?;
    let out = weights.matmul(vis_value)?;
    Ok((out, weights))
}

/// Vision-attended language: softmax over the word axis of each pixel's
/// affinity column, then a weighted sum of language values. Returns the
/// attended feature `[HW×C]` and the weights `[HW×N_t]`.
pub fn attend_val(a_mut: &Tensor, lang_value: &Tensor) -> Result<(Tensor, Tensor)> {
    let weights = a_mut.t()?.softmax_last()?;
    let out = weights.matmul(lang_value)?;
    Ok((out, weights))
}

/// Fuses the two attended features: `F_mul = LAV·VALᵀ ∈ [N_t×HW]`, then the
/// output projection maps the spatial width back to `C`. Returns the output
/// and the pre-projection map.
pub fn fuse(lav: &Tensor, val: &Tensor, out_proj: &Linear) -> Result<(Tensor, Tensor)> {
    let fused = lav.matmul(&val.t()?)?;
    let out = out_proj.forward(&fused, false)?;
    Ok((out, fused))
}

impl MutualAttention {
    pub fn new(r: &mut Rng, c: usize, hw_cfg: usize, mode: AttentionMode) -> Self {
        let lang_key = Linear::plain(r, c, c);
        let lang_value = Linear::plain(r, c, c);
        let vis_key = Linear::plain(r, c, c);
        let vis_value = Linear::plain(r, c, c);
        let (lang_key2, vis_key2) = match mode {
            AttentionMode::Shared => (None, None),
            AttentionMode::Independent => {
                (Some(Linear::plain(r, c, c)), Some(Linear::plain(r, c, c)))
            }
        };
        let out_proj = Linear::plain(r, hw_cfg, c);
        MutualAttention {
            lang_key,
            lang_value,
            vis_key,
            vis_value,
            lang_key2,
            vis_key2,
            out_proj,
            mode,
            c,
            hw_cfg,
        }
    }

    /// Runs the block on word features `f_q[N_t×C]` and vision features
    /// `f_enc[HW×C]`.
    pub fn forward(&self, f_q: &Tensor, f_enc: &Tensor) -> Result<(Tensor, MutualAttentionState)> {
        for (name, t) in [("word input", f_q), ("vision input", f_enc)] {
            if t.rank() != 2 || t.shape()[1] != self.c {
                return Err(Error::shape(
                    "mutual_attention",
                    format!(
                        "{name} must be [n x {}], got {}",
                        self.c,
                        crate::error::fmt_shape(t.shape())
                    ),
                ));
            }
        }
        if f_enc.shape()[0] != self.hw_cfg {
            return Err(Error::Config(format!(
                "mutual attention is configured for {} spatial positions, input has {}",
                self.hw_cfg,
                f_enc.shape()[0]
            )));
        }

        let k_l = self.lang_key.forward(f_q, false)?;
        let v_l = self.lang_value.forward(f_q, false)?;
        let k_v = self.vis_key.forward(f_enc, false)?;
        let v_v = self.vis_value.forward(f_enc, false)?;

        let logits_lav = mutual_matrix(&k_l, &k_v)?;
        let logits_val = match (&self.lang_key2, &self.vis_key2) {
            (Some(lk2), Some(vk2)) => {
                let k_l2 = lk2.forward(f_q, false)?;
                let k_v2 = vk2.forward(f_enc, false)?;
                mutual_matrix(&k_l2, &k_v2)?
            }
            _ => logits_lav.clone(),
        };

        let (lav, lav_weights) = attend_lav(&logits_lav, &v_v)?;
        let (val, val_weights) = attend_val(&logits_val, &v_l)?;
        let (output, fused) = fuse(&lav, &val, &self.out_proj)?;

        let state = MutualAttentionState {
            logits_lav,
            logits_val,
            lav_weights,
            val_weights,
            lav,
            val,
            fused,
            output: output.clone(),
        };
        Ok((output, state))
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.lang_key.collect(&format!("{prefix}.lang_key"), params, buffers);
        self.lang_value.collect(&format!("{prefix}.lang_value"), params, buffers);
        self.vis_key.collect(&format!("{prefix}.vis_key"), params, buffers);
        self.vis_value.collect(&format!("{prefix}.vis_value"), params, buffers);
        if let Some(l) = &self.lang_key2 {
            l.collect(&format!("{prefix}.lang_key2"), params, buffers);
        }
        if let Some(l) = &self.vis_key2 {
            l.collect(&format!("{prefix}.vis_key2"), params, buffers);
        }
        self.out_proj.collect(&format!("{prefix}.out_proj"), params, buffers);
    }
}
