//! Iterative multi-modal interaction: a parallel language pathway that
//! re-injects transformed language features between decoder layers through a
//! learnable scalar gate.

use crate::autodiff::{self, Tensor};
use crate::nn::{Activation, BatchNorm, Buffer, Linear};
use crate::rng::Rng;
use crate::{Error, Result};

/// How the injection pathway behaves between decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImiMode {
    /// Attention-reorganized language features are gated into the decoder
    /// stream.
    Full,
    /// The reorganized feature is replaced by the raw word features — the
    /// simplified variant. The language chain passes through unchanged.
    Star,
    /// Bitwise passthrough: the block adds no operations.
    Off,
}

/// One injection block sitting between two decoder layers.
pub struct ImiBlock {
    /// Plain `C→C` transform advancing the language chain.
    pub lang_transform: Linear,
    /// Attention projection applied to the decoder stream (ReLU, no norm —
    /// the equation defines the activation alone).
    pub w_a: Linear,
    /// Value transform applied to the language chain (ReLU, no norm).
    pub w_l: Linear,
    /// Learnable injection gate, initialized to 0 so training starts from
    /// the un-injected decoder.
    pub w_ci: Tensor,
    /// Output normalization over channels.
    pub norm: BatchNorm,
}

/// Results of one injection step.
pub struct ImiOutput {
    /// Adjusted decoder stream `[N_t×C]`.
    pub f_dec: Tensor,
    /// Advanced language chain `[N_t×C]`.
    pub f_lang: Tensor,
    /// Attention over words `[N_t×N_t]` (rows: decoder positions), present
    /// in full mode only.
    pub attn: Option<Tensor>,
    /// The injected feature before gating, present in full mode only.
    pub injected: Option<Tensor>,
}

impl ImiBlock {
    pub fn new(r: &mut Rng, c: usize) -> Self {
        ImiBlock {
            lang_transform: Linear::plain(r, c, c),
            w_a: Linear::new(r, c, c, false, Activation::Relu),
            w_l: Linear::new(r, c, c, false, Activation::Relu),
            w_ci: Tensor::param(&[1], vec![0.0]).expect("gate shape"),
            norm: BatchNorm::new(c),
        }
    }

    /// Applies the block: advances the language chain and injects language
    /// content into the decoder stream according to `mode`.
    ///
    /// Full mode: `F_l = Linear(F_l_prev)`; `A = softmax(ReLU(F_dec·W_a)·F_lᵀ)`
    /// over the word axis (no scaling term); `F_i = A·ReLU(F_l·W_l)`;
    /// output `BN(F_dec + w_ci·F_i)`.
    pub fn forward(
        &self,
        f_dec: &Tensor,
        f_l_prev: &Tensor,
        f_t: &Tensor,
        mode: ImiMode,
        training: bool,
    ) -> Result<ImiOutput> {
        if mode == ImiMode::Off {
            return Ok(ImiOutput {
                f_dec: f_dec.clone(),
                f_lang: f_l_prev.clone(),
                attn: None,
                injected: None,
            });
        }
        for (name, t) in [("decoder", f_dec), ("language", f_l_prev), ("words", f_t)] {
            if t.rank() != 2 || t.shape() != f_dec.shape() {
                return Err(Error::shape(
                    "imi",
                    format!(
                        "{name} stream has shape {}, expected {}",
                        crate::error::fmt_shape(t.shape()),
                        crate::error::fmt_shape(f_dec.shape())
                    ),
                ));
            }
        }
        if mode == ImiMode::Star {
            let gated = autodiff::mul_scalar(&self.w_ci, f_t)?;
            let out = self.norm.forward_rows(&f_dec.add(&gated)?, training)?;
            return Ok(ImiOutput {
                f_dec: out,
                f_lang: f_l_prev.clone(),
                attn: None,
                injected: None,
            });
        }

        let f_lang = self.lang_transform.forward(f_l_prev, false)?;
        let queries = self.w_a.forward(f_dec, false)?;
        let attn = queries.matmul(&f_lang.t()?)?.softmax_last()?;
        let values = self.w_l.forward(&f_lang, false)?;
        let injected = attn.matmul(&values)?;
        let gated = autodiff::mul_scalar(&self.w_ci, &injected)?;
        let out = self.norm.forward_rows(&f_dec.add(&gated)?, training)?;
        Ok(ImiOutput {
            f_dec: out,
            f_lang,
            attn: Some(attn),
            injected: Some(injected),
        })
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        self.lang_transform
            .collect(&format!("{prefix}.lang_transform"), params, buffers);
        self.w_a.collect(&format!("{prefix}.attn_proj"), params, buffers);
        self.w_l.collect(&format!("{prefix}.value_proj"), params, buffers);
        params.push((format!("{prefix}.gate"), self.w_ci.clone()));
        self.norm.collect(&format!("{prefix}.norm"), params, buffers);
    }
}

/// The per-gap blocks of a decoder stack: `N_dec−1` blocks, applied between
/// consecutive layers. The first block's language input is the word feature.
/// In `Off` mode no blocks are constructed at all, so a disabled chain is
/// structurally identical to an absent one.
pub struct ImiChain {
    pub blocks: Vec<ImiBlock>,
    pub mode: ImiMode,
}

impl ImiChain {
    pub fn new(r: &mut Rng, c: usize, n_dec: usize, mode: ImiMode) -> Self {
        let gaps = if mode == ImiMode::Off {
            0
        } else {
            n_dec.saturating_sub(1)
        };
        let blocks = (0..gaps).map(|_| ImiBlock::new(r, c)).collect();
        ImiChain { blocks, mode }
    }

    pub fn collect(
        &self,
        prefix: &str,
        params: &mut Vec<(String, Tensor)>,
        buffers: &mut Vec<(String, Buffer)>,
    ) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{}", i + 1), params, buffers);
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
    fn closed_gate_reduces_to_normalization() {
        let mut r = rng::seeded(1);
        let block = ImiBlock::new(&mut r, 4);
        let f_dec = rand_t(&mut r, &[3, 4]);
        let f_t = rand_t(&mut r, &[3, 4]);
        let out = block
            .forward(&f_dec, &f_t, &f_t, ImiMode::Full, true)
            .unwrap();
        let fresh = BatchNorm::new(4);
        let want = fresh.forward_rows(&f_dec, true).unwrap();
        assert_eq!(out.f_dec.to_vec(), want.to_vec());
    }

    #[test]
    fn zero_attention_projection_gives_uniform_weights() {
        let mut r = rng::seeded(2);
        let block = ImiBlock::new(&mut r, 4);
        block.w_a.w.data_mut().fill(0.0);
        block.w_a.b.as_ref().unwrap().data_mut().fill(0.0);
        let f_dec = rand_t(&mut r, &[3, 4]);
        let f_t = rand_t(&mut r, &[3, 4]);
        let out = block
            .forward(&f_dec, &f_t, &f_t, ImiMode::Full, true)
            .unwrap();
        let attn = out.attn.unwrap();
        assert!(attn.data().iter().all(|&w| (w - 1.0 / 3.0).abs() <= 1e-12));

        // Every injected row is the column mean of the transformed values.
        let f_lang = block.lang_transform.forward(&f_t, false).unwrap();
        let values = block.w_l.forward(&f_lang, false).unwrap();
        let vd = values.data();
        let inj = out.injected.unwrap();
        for row in 0..3 {
            for col in 0..4 {
                let mean: f64 = (0..3).map(|i| vd[i * 4 + col]).sum::<f64>() / 3.0;
                assert!((inj.data()[row * 4 + col] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn off_mode_is_a_bitwise_passthrough() {
        let mut r = rng::seeded(3);
        let block = ImiBlock::new(&mut r, 4);
        let f_dec = rand_t(&mut r, &[2, 4]);
        let f_l = rand_t(&mut r, &[2, 4]);
        let out = block.forward(&f_dec, &f_l, &f_l, ImiMode::Off, true).unwrap();
        assert!(Tensor::same_node(&out.f_dec, &f_dec));
        assert!(Tensor::same_node(&out.f_lang, &f_l));
        assert!(out.attn.is_none());
    }

    #[test]
    fn star_mode_injects_raw_word_features() {
        let mut r = rng::seeded(4);
        let block = ImiBlock::new(&mut r, 4);
        block.w_ci.data_mut()[0] = 0.5;
        let f_dec = rand_t(&mut r, &[3, 4]);
        let f_l = rand_t(&mut r, &[3, 4]);
        let f_t = rand_t(&mut r, &[3, 4]);
        let out = block.forward(&f_dec, &f_l, &f_t, ImiMode::Star, true).unwrap();
        // Language chain passes through untouched.
        assert!(Tensor::same_node(&out.f_lang, &f_l));

        let mixed: Vec<f64> = f_dec
            .data()
            .iter()
            .zip(f_t.data().iter())
            .map(|(d, t)| d + 0.5 * t)
            .collect();
        let fresh = BatchNorm::new(4);
        let want = fresh
            .forward_rows(&Tensor::from_vec(&[3, 4], mixed).unwrap(), true)
            .unwrap();
        assert_eq!(out.f_dec.to_vec(), want.to_vec());
    }

    #[test]
    fn attention_rows_are_convex_weights() {
        let mut r = rng::seeded(5);
        let block = ImiBlock::new(&mut r, 6);
        let f_dec = rand_t(&mut r, &[4, 6]);
        let f_l = rand_t(&mut r, &[4, 6]);
        let out = block.forward(&f_dec, &f_l, &f_l, ImiMode::Full, true).unwrap();
        let attn = out.attn.unwrap();
        for row in 0..4 {
            let r = &attn.data()[row * 4..(row + 1) * 4];
            assert!(r.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn closed_gate_still_receives_gradient() {
        let mut r = rng::seeded(6);
        let block = ImiBlock::new(&mut r, 4);
        let f_dec = rand_t(&mut r, &[3, 4]);
        let f_l = rand_t(&mut r, &[3, 4]);
        let out = block.forward(&f_dec, &f_l, &f_l, ImiMode::Full, true).unwrap();
        let loss = out
            .f_dec
            .hadamard(&rand_t(&mut r, &[3, 4]))
            .unwrap()
            .reduce_mean_all();
        loss.backward().unwrap();
        let g = block.w_ci.grad().unwrap()[0];
        assert!(g != 0.0, "gate gradient vanished at init");
    }

    #[test]
    fn chain_holds_one_block_per_gap() {
        let mut r = rng::seeded(7);
        assert_eq!(ImiChain::new(&mut r, 4, 3, ImiMode::Full).blocks.len(), 2);
        assert_eq!(ImiChain::new(&mut r, 4, 1, ImiMode::Full).blocks.len(), 0);
        assert_eq!(ImiChain::new(&mut r, 4, 3, ImiMode::Off).blocks.len(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut r = rng::seeded(8);
        let block = ImiBlock::new(&mut r, 4);
        let f_dec = rand_t(&mut r, &[3, 4]);
        let f_l = rand_t(&mut r, &[2, 4]);
        assert!(block.forward(&f_dec, &f_l, &f_l, ImiMode::Full, true).is_err());
    }
}
