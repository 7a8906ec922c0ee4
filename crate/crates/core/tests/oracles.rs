mod common;

use common::*;
use hazard_core::evaluation::{auc, auc_from_scores, LabeledScore, PositiveClass};
use hazard_core::preprocessing::Label;
use hazard_core::rng::Stream;
use hazard_core::tensor::{conv2d, conv2d_transpose, dense};
use hazard_core::Tensor;
use proptest::prelude::*;

#[test]
fn ops_match_loop_references() {
    let e = forward_oracle_error(100);
    assert!(e <= ORACLE_TOLERANCE, "max deviation {e:e}");
}

#[test]
fn transposed_conv_is_adjoint() {
    let e = adjoint_error(100);
    assert!(e <= 1e-5, "adjoint mismatch {e:e}");
}

#[test]
fn tape_gradients_match_central_differences() {
    let e = gradient_error(20);
    assert!(e <= GRADIENT_TOLERANCE, "relative gradient error {e:e}");
}

#[test]
fn auc_matches_pairwise_counting() {
    let e = auc_oracle_error(1000);
    assert!(e <= 1e-9, "max deviation {e:e}");
}

#[test]
fn constant_scorer_is_exactly_half() {
    for n in [1usize, 2, 7, 100] {
        let pos = vec![0.3; n];
        let neg = vec![0.3; n + 3];
        assert_eq!(auc_from_scores(&pos, &neg), 0.5);
    }
}

#[test]
fn auc_extremes() {
    let sep: Vec<LabeledScore> = (0..10)
        .map(|i| LabeledScore {
            frame_id: i.to_string(),
            score: i as f64,
            label: if i < 5 { Label::Normal } else { Label::from("haze-global") },
        })
        .collect();
    assert_eq!(auc(&sep, &PositiveClass::AnyAnomaly).unwrap(), 1.0);
    let flipped: Vec<LabeledScore> = sep.iter().cloned().map(|mut s| {
        s.score = -s.score;
        s
    }).collect();
    assert_eq!(auc(&flipped, &PositiveClass::AnyAnomaly).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_symmetric_under_label_swap(seed in 0u64..10_000) {
        let (p, n) = random_score_set(seed);
        let a = auc_from_scores(&p, &n);
        let b = auc_from_scores(&n, &p);
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(seed in 0u64..10_000) {
        let (p, n) = random_score_set(seed);
        let f = |v: &f64| (v * 0.5).exp() + 3.0;
        let a = auc_from_scores(&p, &n);
        let b = auc_from_scores(&p.iter().map(f).collect::<Vec<_>>(), &n.iter().map(f).collect::<Vec<_>>());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..10_000) {
        let mut rng = Stream::new(seed);
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let y = random_tensor(&mut rng, &[2, 6, 6]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let zero = Tensor::zeros([3]);
        let sum = Tensor::new([2, 6, 6], x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect()).unwrap();
        let lhs = conv2d(&sum, &k, &zero, 1, 1).unwrap();
        let a = conv2d(&x, &k, &zero, 1, 1).unwrap();
        let b = conv2d(&y, &k, &zero, 1, 1).unwrap();
        for ((l, a), b) in lhs.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((l - (a + b)).abs() < 1e-5);
        }
    }

    #[test]
    fn stride_two_round_trip_restores_extent(h in 1usize..6, c in 1usize..4) {
        let mut rng = Stream::new((h * 10 + c) as u64);
        let x = random_tensor(&mut rng, &[c, 2 * h, 2 * h]);
        let k = random_tensor(&mut rng, &[c, c, 3, 3]);
        let zero = Tensor::zeros([c]);
        let down = conv2d(&x, &k, &zero, 2, 1).unwrap();
        prop_assert_eq!(down.shape(), &[c, h, h]);
        let up = conv2d_transpose(&down, &k, &zero, 2, 1).unwrap();
        prop_assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn dense_batch_rows_are_independent(rows in 1usize..5, n in 1usize..8, m in 1usize..6) {
        let mut rng = Stream::new((rows * 100 + n * 10 + m) as u64);
        let x = random_tensor(&mut rng, &[rows, n]);
        let w = random_tensor(&mut rng, &[m, n]);
        let b = random_tensor(&mut rng, &[m]);
        let batched = dense(&x, &w, &b).unwrap();
        for r in 0..rows {
            let row = Tensor::new([n], x.data()[r * n..(r + 1) * n].to_vec()).unwrap();
            let single = dense(&row, &w, &b).unwrap();
            for (u, v) in single.data().iter().zip(&batched.data()[r * m..(r + 1) * m]) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }
}

/// Textbook scalar Adam, one step from zero moments.
fn adam_reference(p: f64, g: f64, c: &hazard_core::tensor::AdamConfig) -> f64 {
    let (lr, b1, b2, eps) = (c.lr as f64, c.beta1 as f64, c.beta2 as f64, c.epsilon as f64);
    let m = (1.0 - b1) * g / (1.0 - b1);
    let v = (1.0 - b2) * g * g / (1.0 - b2);
    p - lr * m / (v.sqrt() + eps)
}

#[test]
fn adam_first_step_matches_scalar_reference() {
    use hazard_core::tensor::{adam_step, AdamConfig, AdamState};
    let config = AdamConfig::default();
    let p = Tensor::new([4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let g = Tensor::new([4], vec![0.3, -2.0, 1e-3, 5.0]).unwrap();
    let (next, _) = adam_step(&p, &g, &AdamState::new(&[4], config)).unwrap();
    for i in 0..4 {
        let want = adam_reference(p.data()[i] as f64, g.data()[i] as f64, &config);
        assert!((next.data()[i] as f64 - want).abs() < 1e-6, "{i}: {} vs {want}", next.data()[i]);
        // first step moves by about lr against the gradient sign
        let moved = (p.data()[i] - next.data()[i]) as f64;
        assert!((moved - config.lr as f64 * (g.data()[i] as f64).signum()).abs() < 1e-5);
    }
}
