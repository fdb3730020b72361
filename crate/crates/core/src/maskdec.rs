//! Mask head: decoder features act as dynamic 1×1 kernels over the encoder
//! map, and a convolutional trunk with interleaved upsampling turns the
//! resulting maps into a single-channel probability mask at four times the
//! encoder resolution.

use crate::autodiff::{self, Tensor};
use crate::error::fmt_shape;
use crate::nn::{Activation, BatchNorm, Buffer, Conv2d, MultiHeadAttention};
use crate::rng::Rng;
use crate::{Error, Result};

/// Applies each row of `f_dec_sa[n×C]` as a 1×1 kernel over
/// `f_enc[C×H×W]`: `map_i[h][w] = Σ_c f_dec_sa[i][c] · f_enc[c][h][w]`,
/// producing `[n×H×W]`.
pub fn dynamic_conv_maps(f_dec_sa: &Tensor, f_enc: &Tensor) -> Result<Tensor> {
    let (n, c) = match f_dec_sa.shape() {
        [n, c] => (*n, *c),
        s => {
            return Err(Error::shape(
                "dynamic_conv_maps",
                format!("kernel bank must be rank 2, got {}", fmt_shape(s)),
            ))
        }
    };
    let (ce, h, w) = match f_enc.shape() {
        [ce, h, w] => (*ce, *h, *w),
        s => {
            return Err(Error::shape(
                "dynamic_conv_maps",
                format!("feature map must be rank 3, got {}", fmt_shape(s)),
            ))
        }
    };
    if c != ce {
        return Err(Error::shape(
            "dynamic_conv_maps",
            format!("channel mismatch: kernels are {c}-wide, map has {ce} channels"),
        ));
    }
    let flat = f_enc.reshape(&[ce, h * w])?;
    f_dec_sa.matmul(&flat)?.reshape(&[n, h, w])
}

/// Convolutional mask head. In dynamic mode the decoder features pass
/// through a self-attention block and become per-row 1×1 kernels over the
/// encoder map; in direct mode a spatial decoder stream is reshaped into the
/// trunk without any kernel stage (used by the vision-query baseline).
pub struct MaskHead {
    /// Self-attention over the decoder rows (dynamic mode only).
    pub sa: Option<MultiHeadAttention>,
    /// Residual normalization after the self-attention.
    pub sa_norm: Option<BatchNorm>,
    /// Four stacked 3×3 convolutions: `in→D`, `D→D`, `D→D/2`, `D/2→1`,
    /// normalized and rectified except the last, which applies a sigmoid.
    /// Upsampling doubles the resolution after the first and second.
    pub convs: [Conv2d; 4],
    /// Trunk input width: the kernel count in dynamic mode, the decoder
    /// width in direct mode.
    pub in_channels: usize,
    pub d: usize,
}

impl MaskHead {
    /// Dynamic-kernel head: `n_t` decoder rows of width `c` become `n_t`
    /// maps feeding the trunk.
    pub fn new_dynamic(r: &mut Rng, c: usize, heads: usize, n_t: usize, d: usize) -> Result<Self> {
        let sa = MultiHeadAttention::new(r, c, heads)?;
        let sa_norm = BatchNorm::new(c);
        Ok(MaskHead {
            sa: Some(sa),
            sa_norm: Some(sa_norm),
            convs: Self::trunk(r, n_t, d)?,
            in_channels: n_t,
            d,
        })
    }

    /// Direct head for the vision-query baseline: the decoder stream is
    /// already spatial, so the trunk consumes its `c` channels as-is.
    pub fn new_direct(r: &mut Rng, c: usize, d: usize) -> Result<Self> {
        Ok(MaskHead {
            sa: None,
            sa_norm: None,
            convs: Self::trunk(r, c, d)?,
            in_channels: c,
            d,
        })
    }

    fn trunk(r: &mut Rng, in_ch: usize, d: usize) -> Result<[Conv2d; 4]> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "mask-head width must be a positive even number, got {d}"
            )));
        }
        Ok([
            Conv2d::new(r, in_ch, d, 3, 1, true, Activation::Relu),
            Conv2d::new(r, d, d, 3, 1, true, Activation::Relu),
            Conv2d::new(r, d, d / 2, 3, 1, true, Activation::Relu),
            Conv2d::new(r, d / 2, 1, 3, 1, false, Activation::Sigmoid),
        ])
    }

    /// `f_dec` is `[N_t×C]` in dynamic mode or `[HW×C]` in direct mode;
    /// `f_enc` is `[C×H×W]`. Returns the mask as `[1×4H×4W]` with every
    /// value in (0,1).
    pub fn forward(&self, f_dec: &Tensor, f_enc: &Tensor, training: bool) -> Result<Tensor> {
        let (ce, h, w) = match f_enc.shape() {
            [ce, h, w] => (*ce, *h, *w),
            s => {
                return Err(Error::shape(
                    "mask_head",
                    format!("encoder map must be rank 3, got {}", fmt_shape(s)),
                ))
            }
        };
        let mut x = match (&self.sa, &self.sa_norm) {
            (Some(sa), Some(norm)) => {
                let attended = sa.forward(f_dec, f_dec, f_dec, None)?;
                let f_sa = norm.forward_rows(&f_dec.add(&attended)?, training)?;
                let maps = dynamic_conv_maps(&f_sa, f_enc)?;
                if maps.shape()[0] != self.in_channels {
                    return Err(Error::shape(
                        "mask_head",
                        format!(
                            "trunk expects {} kernel maps, got {}",
                            self.in_channels,
                            maps.shape()[0]
                        ),
                    ));
                }
                maps
            }
            _ => {
                if f_dec.shape() != [h * w, ce] || ce != self.in_channels {
                    return Err(Error::shape(
                        "mask_head",
                        format!(
                            "direct stream must be [{}\u{d7}{}], got {}",
                            h * w,
                            self.in_channels,
                            fmt_shape(f_dec.shape())
                        ),
                    ));
                }
                f_dec.t()?.reshape(&[ce, h, w])?
            }
        };
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, training)?;
            if i < 2 {
                x = autodiff::upsample2x(&x)?;
            }
        }
        Ok(x)
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        if let (Some(sa), Some(norm)) = (&self.sa, &self.sa_norm) {
            sa.collect(&format!("{prefix}.sa"), params, buffers);
            norm.collect(&format!("{prefix}.sa_norm"), params, buffers);
        }
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.conv{}", i + 1), params, buffers);
        }
    }
}
