//! Oracle and gradient tests for the language-reconstruction head.

mod common;

use common::*;
use m3att_core::autodiff::{consumers_of, grad_check, Tensor};
use m3att_core::lfr::{lfr_loss, LfrHead};
use m3att_core::rng;

#[test]
fn projection_target_matches_the_formula_loop_oracle() {
    for case in 0..20 {
        let mut r = rng::seeded(3000 + case);
        let n = 1 + rng::below(&mut r, 5);
        let c = 2 * (1 + rng::below(&mut r, 4));
        let max_len = n + rng::below(&mut r, 3);
        let head = LfrHead::new(&mut r, c, max_len, false).unwrap();
        let f_t = rand_vec(&mut r, n * c, -1.5, 1.5);
        let f_sent = rand_vec(&mut r, c, -1.5, 1.5);
        let out = head
            .project_language_target(
                &Tensor::from_vec(&[n, c], f_t.clone()).unwrap(),
                &Tensor::from_vec(&[1, c], f_sent.clone()).unwrap(),
            )
            .unwrap();
        let want = oracle_lfr_project(&head, n, c, &f_t, &f_sent);
        assert_eq!(out.shape(), [1, c]);
        assert!(
            max_abs_diff(&out.data(), &want) <= 1e-10,
            "case {case} ({n}x{c}): projection target diverged from loop oracle"
        );
    }
}

#[test]
fn reconstruction_matches_the_composed_primitive_oracle() {
    for case in 0..20 {
        let mut r = rng::seeded(3100 + case);
        let n = 2 + rng::below(&mut r, 4);
        let c = 2 * (1 + rng::below(&mut r, 4));
        let strict = case % 2 == 1;
        let head = LfrHead::new(&mut r, c, 4, strict).unwrap();
        let f_dec = rand_vec(&mut r, n * c, -1.5, 1.5);
        let out = head
            .reconstruct_language(&Tensor::from_vec(&[n, c], f_dec.clone()).unwrap(), true)
            .unwrap();
        let want = oracle_lfr_reconstruct(&head, n, c, &f_dec);
        assert_eq!(out.shape(), [1, c]);
        assert!(
            max_abs_diff(&out.data(), &want) <= 1e-10,
            "case {case} ({n}x{c}, strict={strict}): reconstruction diverged from oracle"
        );
    }
}

#[test]
fn whole_head_passes_grad_check() {
    for seed in 0..5 {
        let mut r = rng::seeded(700 + seed);
        let (n, c) = (3, 6);
        let head = LfrHead::new(&mut r, c, n, false).unwrap();
        let f_t = rand_param(&mut r, &[n, c], -1.0, 1.0);
        let f_sent = rand_param(&mut r, &[1, c], -1.0, 1.0);
        let f_dec = rand_param(&mut r, &[n, c], -1.0, 1.0);
        let mut params = vec![
            ("f_t".to_string(), f_t.clone()),
            ("f_sent".to_string(), f_sent.clone()),
            ("f_dec".to_string(), f_dec.clone()),
        ];
        head.collect("lfr", &mut params, &mut Vec::new());
        let mut f = || {
            let target = head.project_language_target(&f_t, &f_sent)?;
            let rec = head.reconstruct_language(&f_dec, true)?;
            lfr_loss(&rec, &target)
        };
        let report = grad_check(&mut f, &params, 1e-4, 1e-4).unwrap();
        assert!(report.pass(), "seed {seed}: {report}");
    }
}

#[test]
fn loss_gradient_reaches_every_head_parameter() {
    let mut r = rng::seeded(41);
    let (n, c) = (3, 6);
    let head = LfrHead::new(&mut r, c, n, false).unwrap();
    let f_t = rand_param(&mut r, &[n, c], -1.0, 1.0);
    let f_sent = rand_param(&mut r, &[1, c], -1.0, 1.0);
    let f_dec = rand_param(&mut r, &[n, c], -1.0, 1.0);
    let target = head.project_language_target(&f_t, &f_sent).unwrap();
    let rec = head.reconstruct_language(&f_dec, true).unwrap();
    let loss = lfr_loss(&rec, &target).unwrap();
    loss.backward().unwrap();
    let mut params = Vec::new();
    head.collect("lfr", &mut params, &mut Vec::new());
    for (name, p) in &params {
        let g = p.grad().expect("gradient buffer");
        assert!(
            g.iter().any(|v| *v != 0.0),
            "{name} received an all-zero gradient"
        );
    }
}

#[test]
fn head_parameters_never_enter_a_dataflow_lacking_the_loss() {
    // The reconstruction pathway is a pure consumer of decoder output:
    // walking the consumers of the decoder features from a root that skips
    // the reconstruction loss finds no trunk or projection nodes.
    let mut r = rng::seeded(42);
    let (n, c) = (3, 6);
    let head = LfrHead::new(&mut r, c, n, false).unwrap();
    let f_dec = rand_param(&mut r, &[n, c], -1.0, 1.0);
    // A stand-in for the mask pathway: any computation over f_dec that
    // ignores the head entirely.
    let mask_root = f_dec.relu().reduce_mean_all();
    // Build the reconstruction too, from the same decoder features.
    let _rec = head.reconstruct_language(&f_dec, true).unwrap();
    let consumers = consumers_of(&mask_root, &f_dec);
    assert!(!consumers.is_empty());
    for node in &consumers {
        for parent in node.parents() {
            assert!(
                !Tensor::same_node(parent, &head.w_proj),
                "projection parameter found in the mask pathway"
            );
        }
    }
}
