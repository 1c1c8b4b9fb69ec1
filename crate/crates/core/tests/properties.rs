//! Property tests over random shapes and seeds.

use lora_lab::lora::{entry_zero_probability, DropoutMask, LoraLayer, MaskKey};
use lora_lab::rng::rng_from;
use lora_lab::tensor::{grad_check, Graph, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut r = rng_from(&[seed]);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn composite_graph_gradients_match_differences(
        n in 1usize..5, d in 1usize..5, k in 2usize..5, seed in any::<u64>(),
    ) {
        let x = random_matrix(n, d, seed);
        let w = random_matrix(k, d, seed ^ 1);
        let b = random_matrix(1, k, seed ^ 2);
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % k).collect();
        // Smooth ops only: matmul, transpose, add_row, hadamard, squares, softmax.
        let err = grad_check(
            |g: &mut Graph<f64>, ids| {
                let xw = g.constant(x.clone());
                let wt = g.transpose(ids[0]);
                let z = g.matmul(xw, wt)?;
                let z = g.add_row(z, ids[1])?;
                let sq = g.hadamard(z, z)?;
                let z = g.add(z, sq)?;
                let ce = g.softmax_cross_entropy(z, &labels)?;
                let reg = g.sum_squares(ids[0]);
                let reg = g.scale(reg, 0.1);
                g.add(ce, reg)
            },
            &[w, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn fan_out_accumulates_gradients(seed in any::<u64>()) {
        // f(a) = Σ(a⊙a) + Σ(a⊙a)·2 uses `a` through several paths; ∂f/∂a = 6a.
        let a = random_matrix(3, 2, seed);
        let mut g = Graph::new();
        let id = g.param(a.clone());
        let s1 = g.sum_squares(id);
        let s2 = g.sum_squares(id);
        let s2 = g.scale(s2, 2.0);
        let f = g.add(s1, s2).unwrap();
        g.backward(f).unwrap();
        let grad = g.grad(id);
        for (gv, av) in grad.as_slice().iter().zip(a.as_slice()) {
            prop_assert!((gv - 6.0 * av).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_lora_forward_matches_merged_weight(
        n1 in 1usize..6, n2 in 1usize..6, r in 1usize..4, p in 0.0f64..0.95, seed in any::<u64>(),
    ) {
        let r = r.min(n1).min(n2);
        let w0 = random_matrix(n1, n2, seed);
        let a = random_matrix(r, n2, seed ^ 3);
        let b = random_matrix(n1, r, seed ^ 4);
        let layer = LoraLayer::from_parts(w0.clone(), a, b, 1.5).unwrap();
        let mask = DropoutMask::sample(0, n1, n2, p, &mut rng_from(&[seed, 9])).unwrap();
        let x = random_matrix(2, n2, seed ^ 5);
        let y = layer.forward(&x, Some(&mask)).unwrap();
        let delta = layer.merged_delta(Some(&mask)).unwrap();
        let weight = Matrix::from_fn(n1, n2, |i, j| w0[(i, j)] + delta[(i, j)]);
        let expect = x.matmul(&weight.transpose()).unwrap();
        for (u, v) in y.as_slice().iter().zip(expect.as_slice()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        // Dropped output rows and input columns contribute nothing.
        for i in 0..n1 {
            for j in 0..n2 {
                if !mask.output[i] || !mask.input[j] {
                    prop_assert_eq!(delta[(i, j)], 0.0);
                }
            }
        }
    }
}

#[test]
fn mask_keep_rate_and_entry_zero_rate() {
    let p = 0.4;
    let (n1, n2, draws) = (16, 16, 20_000);
    let mut kept = 0usize;
    let mut zero = 0usize;
    for t in 0..draws {
        let mut r = MaskKey::train(3, 0, t).rng(0, 0);
        let m = DropoutMask::sample(0, n1, n2, p, &mut r).unwrap();
        kept += m.kept();
        for i in 0..n1 {
            for j in 0..n2 {
                if !m.output[i] || !m.input[j] {
                    zero += 1;
                }
            }
        }
    }
    let keep = kept as f64 / (draws * (n1 + n2)) as f64;
    let zero = zero as f64 / (draws * n1 * n2) as f64;
    assert!((keep - 0.6).abs() < 0.005, "keep rate {keep}");
    assert!((zero - (1.0 - 0.6 * 0.6)).abs() < 0.005, "zero rate {zero}");
    assert_eq!(entry_zero_probability(p), 1.0 - 0.6 * 0.6);
}

#[test]
fn mask_streams_are_reproducible() {
    let a = DropoutMask::sample(1, 7, 5, 0.5, &mut MaskKey::eval(11, 2, 3).rng(1, 1)).unwrap();
    let b = DropoutMask::sample(1, 7, 5, 0.5, &mut MaskKey::eval(11, 2, 3).rng(1, 1)).unwrap();
    let c = DropoutMask::sample(1, 7, 5, 0.5, &mut MaskKey::eval(11, 2, 3).rng(2, 1)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
