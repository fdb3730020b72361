//! Language feature reconstruction: the input word and sentence features are
//! projected to a pooled target vector, a comparable vector is reconstructed
//! from the final decoder output, and their mean-squared distance becomes an
//! auxiliary training signal. The head touches the mask path nowhere, so a
//! zero reconstruction weight leaves predicted masks bit-identical to a
//! build without it.

use crate::autodiff::Tensor;
use crate::error::fmt_shape;
use crate::nn::{self, Activation, Buffer, Linear};
use crate::rng::Rng;
use crate::{Error, Result};

/// Reconstruction head. The projection side pools a position-coded copy of
/// the word features together with the sentence feature; the reconstruction
/// side runs the decoder output through three stacked linear layers and
/// pools over the sequence axis.
pub struct LfrHead {
    /// Bare projection `[C×C]` applied to the concatenated language block.
    pub w_proj: Tensor,
    /// Fixed sinusoidal position code `[max_len×C]` added to the word rows
    /// (not learned, not stored in checkpoints).
    pub pos: Tensor,
    /// Three stacked reconstruction layers `C→C`. The first two are
    /// normalized and rectified; the last keeps its normalization but drops
    /// the activation by default so the reconstruction can move below zero.
    pub trunk: [Linear; 3],
    pub c: usize,
    pub max_len: usize,
}

impl LfrHead {
    /// `strict_relu` keeps the rectifier on the final trunk layer, matching
    /// the other two; the default (`false`) drops it.
    pub fn new(r: &mut Rng, c: usize, max_len: usize, strict_relu: bool) -> Result<Self> {
        let k = 1.0 / (c as f64).sqrt();
        let w_proj = nn::uniform_param(r, &[c, c], k);
        let pos = nn::positional_embedding_1d(max_len, c)?;
        let last_act = if strict_relu {
            Activation::Relu
        } else {
            Activation::None
        };
        let trunk = [
            Linear::new(r, c, c, true, Activation::Relu),
            Linear::new(r, c, c, true, Activation::Relu),
            Linear::new(r, c, c, true, last_act),
        ];
        Ok(LfrHead {
            w_proj,
            pos,
            trunk,
            c,
            max_len,
        })
    }

    /// Pools word features `f_t[n×C]` and the sentence feature
    /// `f_sent[1×C]` into the projection target `[1×C]`:
    /// the position code is added to the word rows only, the sentence row is
    /// appended, and the projected, rectified block is averaged over its
    /// `n+1` rows.
    pub fn project_language_target(&self, f_t: &Tensor, f_sent: &Tensor) -> Result<Tensor> {
        let n = self.check_rows(f_t, "projection word features")?;
        if n > self.max_len {
            return Err(Error::Config(format!(
                "projection target holds {n} word rows but the position code covers only {}",
                self.max_len
            )));
        }
        if f_sent.shape() != [1, self.c] {
            return Err(Error::shape(
                "project_language_target",
                format!(
                    "sentence feature must be [1\u{d7}{}], got {}",
                    self.c,
                    fmt_shape(f_sent.shape())
                ),
            ));
        }
        let coded = f_t.add(&self.pos.slice_rows(0, n)?)?;
        let block = crate::autodiff::concat_rows(&[&coded, f_sent])?;
        let projected = block.matmul(&self.w_proj)?.relu();
        projected.reduce_mean_axis(0)
    }

    /// Reconstructs a `[1×C]` language vector from the decoder output
    /// `f_dec[n×C]`: the trunk is applied row-wise, then rows are averaged.
    pub fn reconstruct_language(&self, f_dec: &Tensor, training: bool) -> Result<Tensor> {
        self.check_rows(f_dec, "reconstruction input")?;
        let mut x = f_dec.clone();
        for layer in &self.trunk {
            x = layer.forward(&x, training)?;
        }
        x.reduce_mean_axis(0)
    }

    fn check_rows(&self, x: &Tensor, what: &str) -> Result<usize> {
        match x.shape() {
            [n, c] if *c == self.c && *n > 0 => Ok(*n),
            s => Err(Error::shape(
                "lfr",
                format!(
                    "{what} must be [n\u{d7}{}] with n > 0, got {}",
                    self.c,
                    fmt_shape(s)
                ),
            )),
        }
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        params.push((format!("{prefix}.project"), self.w_proj.clone()));
        for (i, layer) in self.trunk.iter().enumerate() {
            layer.collect(&format!("{prefix}.trunk{}", i + 1), params, buffers);
        }
    }
}

/// Mean over channels of the squared difference between the reconstruction
/// and the projection target. Zero exactly when the two agree.
pub fn lfr_loss(f_rec: &Tensor, f_proj: &Tensor) -> Result<Tensor> {
    if f_rec.shape() != f_proj.shape() || f_rec.rank() != 2 || f_rec.shape()[0] != 1 {
        return Err(Error::shape(
            "lfr_loss",
            format!(
                "expected two [1\u{d7}C] inputs, got {} and {}",
                fmt_shape(f_rec.shape()),
                fmt_shape(f_proj.shape())
            ),
        ));
    }
    let d = f_rec.sub(f_proj)?;
    Ok(d.hadamard(&d)?.reduce_mean_all())
}
