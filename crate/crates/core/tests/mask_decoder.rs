//! Oracle and gradient tests for the dynamic-kernel mask head.

mod common;

use common::*;
use m3att_core::autodiff::{grad_check_sampled, GradCheckOpts, Tensor};
use m3att_core::maskdec::{dynamic_conv_maps, MaskHead};
use m3att_core::rng;

#[test]
fn dynamic_maps_match_the_per_pixel_dot_product_oracle() {
    for case in 0..20 {
        let mut r = rng::seeded(4000 + case);
        let n = 1 + rng::below(&mut r, 5);
        let c = 1 + rng::below(&mut r, 8);
        let h = 1 + rng::below(&mut r, 5);
        let w = 1 + rng::below(&mut r, 5);
        let bank = rand_vec(&mut r, n * c, -2.0, 2.0);
        let fmap = rand_vec(&mut r, c * h * w, -2.0, 2.0);
        let maps = dynamic_conv_maps(
            &Tensor::from_vec(&[n, c], bank.clone()).unwrap(),
            &Tensor::from_vec(&[c, h, w], fmap.clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(maps.shape(), [n, h, w]);
        let got = maps.to_vec();
        for i in 0..n {
            for p in 0..h * w {
                let want: f64 = (0..c).map(|ch| bank[i * c + ch] * fmap[ch * h * w + p]).sum();
                let diff = (got[i * h * w + p] - want).abs();
                assert!(
                    diff <= 1e-12,
                    "case {case} map {i} pixel {p}: |{} - {want}| = {diff}",
                    got[i * h * w + p]
                );
            }
        }
    }
}

#[test]
fn whole_head_passes_sampled_grad_check() {
    for seed in 0..2 {
        let mut r = rng::seeded(800 + seed);
        let (c, n_t, d, h, w) = (6, 3, 4, 3, 3);
        let head = MaskHead::new_dynamic(&mut r, c, 2, n_t, d).unwrap();
        let f_dec = rand_param(&mut r, &[n_t, c], -1.0, 1.0);
        let f_enc = rand_param(&mut r, &[c, h, w], -1.0, 1.0);
        let wmix = rand_const(&mut r, &[1, 4 * h * 4 * w], -1.0, 1.0);
        let mut params = vec![
            ("f_dec".to_string(), f_dec.clone()),
            ("f_enc".to_string(), f_enc.clone()),
        ];
        head.collect("mask", &mut params, &mut Vec::new());
        let mut f = || {
            let mask = head.forward(&f_dec, &f_enc, true)?;
            let flat = mask.reshape(&[1, 4 * h * 4 * w])?;
            Ok(flat.hadamard(&wmix)?.reduce_mean_all())
        };
        let opts = GradCheckOpts {
            samples_per_tensor: 4,
            seed: 11,
            ..GradCheckOpts::default()
        };
        let report = grad_check_sampled(&mut f, &params, 1e-4, 1e-4, opts).unwrap();
        assert!(report.pass(), "seed {seed}: {report}");
    }
}

#[test]
fn direct_head_passes_sampled_grad_check() {
    let mut r = rng::seeded(820);
    let (c, h, w) = (4, 3, 3);
    let head = MaskHead::new_direct(&mut r, c, 4).unwrap();
    let stream = rand_param(&mut r, &[h * w, c], -1.0, 1.0);
    let f_enc = rand_const(&mut r, &[c, h, w], -1.0, 1.0);
    let wmix = rand_const(&mut r, &[1, 4 * h * 4 * w], -1.0, 1.0);
    let mut params = vec![("stream".to_string(), stream.clone())];
    head.collect("mask", &mut params, &mut Vec::new());
    let mut f = || {
        let mask = head.forward(&stream, &f_enc, true)?;
        let flat = mask.reshape(&[1, 4 * h * 4 * w])?;
        Ok(flat.hadamard(&wmix)?.reduce_mean_all())
    };
    let opts = GradCheckOpts {
        samples_per_tensor: 4,
        seed: 12,
        ..GradCheckOpts::default()
    };
    let report = grad_check_sampled(&mut f, &params, 1e-4, 1e-4, opts).unwrap();
    assert!(report.pass(), "{report}");
}
