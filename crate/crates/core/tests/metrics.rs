use dcsau_core::autograd::Graph;
use dcsau_core::gradcheck::grad_check;
use dcsau_core::metrics::{confusion, dice_loss, metrics_from_counts, DICE_SMOOTH};
use dcsau_core::oracle;
use dcsau_core::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss_value(probs: Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    dice_loss(g.constant(probs), target, DICE_SMOOTH).unwrap().value().data()[0]
}

#[test]
fn dice_perfect_overlap_is_nearly_zero() {
    let t = Tensor::<f64>::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, x| if y < 40 && x < 30 { 1.0 } else { 0.0 });
    assert!(t.sum_f64() >= 1000.0);
    let l = loss_value(t.clone(), &t);
    assert!((0.0..1e-3).contains(&l), "{l}");
}

#[test]
fn dice_disjoint_eight_pixel_sets() {
    let p = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, _| if y < 2 { 1.0 } else { 0.0 });
    let t = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, _| if y >= 2 { 1.0 } else { 0.0 });
    assert!((loss_value(p, &t) - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
}

#[test]
fn dice_empty_target_and_prediction_is_zero() {
    let z = Tensor::<f64>::zeros(Shape::new(2, 1, 8, 8));
    assert_eq!(loss_value(z.clone(), &z), 0.0);
}

#[test]
fn dice_rejects_shape_mismatch() {
    let g = Graph::new();
    let p = g.constant(Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4)));
    assert!(dice_loss(p, &Tensor::zeros(Shape::new(1, 1, 4, 4)), 1.0).is_err());
}

#[test]
fn dice_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 3, 4, 4);
        let p = Tensor::<f64>::uniform(shape, 0.05, 0.95, &mut rng);
        let t = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng).map(|v| v.round());
        let r = grad_check(|_, v| dice_loss(v[0], &t, DICE_SMOOTH), &[p], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

fn masks(max_side: usize) -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (2usize..=4, 1usize..=max_side, 1usize..=max_side).prop_flat_map(|(k, h, w)| {
        let labels = proptest::collection::vec(0u8..k as u8, h * w);
        (Just(k), labels.clone(), labels)
    })
}

proptest! {
    #[test]
    fn counts_and_scores_match_brute_force((k, pred, gt) in masks(8)) {
        let counts = confusion(&pred, &gt, k).unwrap();
        let expected = oracle::confusion(&pred, &gt, k);
        for (c, e) in counts.classes.iter().zip(&expected) {
            prop_assert_eq!([c.tp, c.fp, c.fn_, c.tn], *e);
        }
        let got = metrics_from_counts(&counts).values();
        let want = oracle::scores(&pred, &gt, k);
        for (g, w) in got.iter().zip(want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{:?} vs {:?}", got, want);
        }
    }

    #[test]
    fn scores_are_permutation_invariant((k, pred, gt) in masks(8), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..pred.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        let g2: Vec<u8> = order.iter().map(|&i| gt[i]).collect();
        let a = metrics_from_counts(&confusion(&pred, &gt, k).unwrap());
        let b = metrics_from_counts(&confusion(&p2, &g2, k).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn binary_f1_is_harmonic_mean((_, pred, gt) in masks(8)) {
        let pred: Vec<u8> = pred.iter().map(|&v| v % 2).collect();
        let gt: Vec<u8> = gt.iter().map(|&v| v % 2).collect();
        let s = metrics_from_counts(&confusion(&pred, &gt, 2).unwrap());
        if s.precision + s.recall > 0.0 {
            let h = 2.0 * s.precision * s.recall / (s.precision + s.recall);
            prop_assert!((s.f1 - h).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_loss_is_bounded(seed in any::<u64>(), k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, k, 5, 3);
        let p = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng);
        let t = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng).map(|v| v.round());
        let l = loss_value(p, &t);
        prop_assert!((0.0..=1.0).contains(&l));
    }
}
