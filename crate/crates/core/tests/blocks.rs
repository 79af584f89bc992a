use dcsau_core::autograd::Graph;
use dcsau_core::nn::{CsaBlock, Ctx, DoubleConv, Module, PfcBlock};
use dcsau_core::selftest;
use dcsau_core::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0xabcd))
}

/// Counts trainable scalars by walking the archive and skipping running statistics.
fn enumerate_trainable<M: Module<f64>>(m: &M) -> usize {
    m.to_archive()
        .entries
        .iter()
        .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
        .map(|(_, t)| t.len())
        .sum()
}

fn zero_weights_and_betas<M: Module<f64>>(m: &mut M) {
    m.visit_mut(&mut |p| {
        if p.name().ends_with(".weight") || p.name().ends_with(".beta") {
            p.value.fill(0.0);
        }
    });
}

fn jitter_bn<M: Module<f64>>(m: &mut M, seed: u64) {
    let mut r = rng(seed);
    m.visit_mut(&mut |p| {
        let s = p.value.shape();
        if p.name().ends_with(".gamma") {
            p.value = Tensor::uniform(s, 0.5, 1.5, &mut r);
        } else if p.name().ends_with(".beta") || p.name().ends_with(".bias") {
            p.value = Tensor::uniform(s, -0.2, 0.2, &mut r);
        }
    });
}

#[test]
fn pfc_param_count_matches_closed_form() {
    let block = PfcBlock::<f64>::new("pfc", 3, 64, 7, &mut rng(0)).unwrap();
    let head = 3 * 64 * 9 + 64 + 128;
    let depthwise = 49 * 64 + 64 + 128;
    let pointwise = 64 * 64 + 64 + 128;
    assert_eq!(head + depthwise + pointwise, 9536);
    assert_eq!(block.num_trainable(), 9536);
    assert_eq!(enumerate_trainable(&block), 9536);
}

#[test]
fn double_conv_param_count_matches_closed_form() {
    let block = DoubleConv::<f64>::new("enc", 3, 64, &mut rng(0));
    assert_eq!((3 * 64 * 9 + 64 + 128) + (64 * 64 * 9 + 64 + 128), 38976);
    assert_eq!(block.num_trainable(), 38976);
    assert_eq!(enumerate_trainable(&block), 38976);
}

#[test]
fn pfc_zero_branch_passes_head_through() {
    let mut block = PfcBlock::<f64>::new("pfc", 3, 8, 7, &mut rng(1)).unwrap();
    jitter_bn(&mut block, 2);
    for unit in [&mut block.depthwise, &mut block.pointwise] {
        unit.conv.weight.value.fill(0.0);
        unit.conv.bias.value.fill(0.0);
        unit.bn.beta.value.fill(0.0);
    }
    let x = input(Shape::new(2, 3, 8, 8), 3);
    let g = Graph::new();
    let ctx = Ctx::train(&g);
    let mut head = block.head.clone();
    let expected = head.forward(&ctx, g.constant(x.clone())).unwrap().value();
    let y = block.forward(&ctx, g.constant(x)).unwrap().value();
    assert_eq!(y, expected);
}

#[test]
fn pfc_preserves_spatial_extent_for_every_kernel() {
    for k in [3, 5, 7, 9] {
        let mut block = PfcBlock::<f64>::new("pfc", 3, 6, k, &mut rng(k as u64)).unwrap();
        let g = Graph::new();
        let y = block.forward(&Ctx::train(&g), g.constant(input(Shape::new(2, 3, 10, 12), 4))).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 6, 10, 12));
    }
    assert!(PfcBlock::<f64>::new("pfc", 3, 6, 4, &mut rng(0)).is_err());
}

#[test]
fn pfc_rejects_wrong_channel_count() {
    let mut block = PfcBlock::<f64>::new("pfc", 3, 6, 7, &mut rng(0)).unwrap();
    let g = Graph::new();
    let err = block.forward(&Ctx::train(&g), g.constant(input(Shape::new(1, 4, 8, 8), 0))).unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn double_conv_with_zero_weights_is_constant_per_channel() {
    let mut block = DoubleConv::<f64>::new("enc", 3, 4, &mut rng(5));
    block.visit_mut(&mut |p| {
        if p.name().ends_with(".weight") {
            p.value.fill(0.0);
        }
    });
    block.conv2.bn.beta.value = Tensor::channel_vector(&[-1.0, 0.0, 0.5, 2.0]);
    let g = Graph::new();
    let y = block.forward(&Ctx::train(&g), g.constant(input(Shape::new(2, 3, 6, 6), 6))).unwrap().value();
    for n in 0..2 {
        for (c, want) in [0.0, 0.0, 0.5, 2.0].into_iter().enumerate() {
            assert!(y.plane(n, c).iter().all(|&v| v == want));
        }
    }
}

#[test]
fn csa_zero_branches_return_input_exactly() {
    let mut block = CsaBlock::<f64>::new("csa", 8, 8, &mut rng(7)).unwrap();
    assert!(block.shortcut.is_none());
    zero_weights_and_betas(&mut block);
    let x = input(Shape::new(2, 8, 6, 6), 8);
    let g = Graph::new();
    let trace = block.forward_traced(&Ctx::train(&g), g.constant(x.clone())).unwrap();
    assert!(trace.u1.value().data().iter().all(|&v| v == 0.0));
    assert!(trace.u2.value().data().iter().all(|&v| v == 0.0));
    assert!(trace.a1.value().data().iter().all(|&v| v == 0.5));
    assert_eq!(trace.output.value(), x);
}

#[test]
fn csa_attention_sums_to_one() {
    for seed in 0..5 {
        let mut block = CsaBlock::<f64>::new("csa", 6, 10, &mut rng(seed)).unwrap();
        jitter_bn(&mut block, seed + 100);
        let g = Graph::new();
        let t = block.forward_traced(&Ctx::train(&g), g.constant(input(Shape::new(3, 6, 8, 8), seed))).unwrap();
        let (a1, a2) = (t.a1.value(), t.a2.value());
        assert_eq!(a1.shape(), Shape::new(3, 10, 1, 1));
        for (p, q) in a1.data().iter().zip(a2.data()) {
            assert!((p + q - 1.0).abs() <= 1e-6);
            assert!(*p > 0.0 && *q > 0.0);
        }
    }
}

#[test]
fn csa_fusion_and_reweighting_match_recorded_intermediates() {
    let mut block = CsaBlock::<f64>::new("csa", 4, 6, &mut rng(11)).unwrap();
    let x = input(Shape::new(2, 4, 8, 8), 12);
    let g = Graph::new();
    let t = block.forward_traced(&Ctx::train(&g), g.constant(x.clone())).unwrap();
    let (u1, u2) = (t.u1.value(), t.u2.value());
    let (a1, a2) = (t.a1.value(), t.a2.value());
    let fused = t.fused.value();
    let weighted = t.weighted.value();
    let shape = u1.shape();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let (w1, w2) = (a1.at(n, c, 0, 0), a2.at(n, c, 0, 0));
            let mut mean = 0.0;
            for i in 0..shape.plane() {
                let (p, q) = (u1.plane(n, c)[i], u2.plane(n, c)[i]);
                assert_eq!(fused.plane(n, c)[i], p + q);
                assert_eq!(weighted.plane(n, c)[i], w1 * p + w2 * q);
                mean += p + q;
            }
            mean /= shape.plane() as f64;
            assert!((t.stats.value().at(n, c, 0, 0) - mean).abs() < 1e-12);
        }
    }

    // Doubling the last BN gammas of group one doubles its output; the fused
    // map of the rerun equals the sum of the rerun's group outputs.
    let mut doubled = block.clone();
    doubled.g1_conv.bn.gamma.value.scale_in_place(2.0);
    doubled.g2_fuse.bn.gamma.value.scale_in_place(2.0);
    let g2 = Graph::new();
    let t2 = doubled.forward_traced(&Ctx::train(&g2), g2.constant(x)).unwrap();
    let twice: Vec<f64> = u1.data().iter().map(|v| 2.0 * v).collect();
    assert!(t2.u1.value().data().iter().zip(&twice).all(|(a, b)| (a - b).abs() <= 1e-5));
    let (v1, v2, f2) = (t2.u1.value(), t2.u2.value(), t2.fused.value());
    for i in 0..f2.len() {
        assert!((f2.data()[i] - (v1.data()[i] + v2.data()[i])).abs() <= 1e-5);
    }
}

#[test]
fn csa_output_shape_follows_shortcut() {
    for (cin, cout) in [(4, 4), (4, 8), (8, 4), (2, 16), (16, 2)] {
        let mut block = CsaBlock::<f64>::new("csa", cin, cout, &mut rng(0)).unwrap();
        assert_eq!(block.shortcut.is_some(), cin != cout);
        let g = Graph::new();
        let x = g.constant(input(Shape::new(2, cin, 6, 4), 1));
        let t = block.forward_traced(&Ctx::train(&g), x).unwrap();
        assert_eq!(t.output.shape(), t.shortcut.shape());
        assert_eq!(t.output.shape(), Shape::new(2, cout, 6, 4));
    }
    assert!(CsaBlock::<f64>::new("csa", 5, 4, &mut rng(0)).is_err());
}

#[test]
fn blocks_use_hierarchical_names() {
    let pfc = PfcBlock::<f64>::new("encoder.stage0.pfc", 3, 4, 7, &mut rng(0)).unwrap();
    let names = pfc.param_names();
    assert!(names.contains(&"encoder.stage0.pfc.depthwise.weight".to_owned()));
    assert!(names.contains(&"encoder.stage0.pfc.head.bn.running_var".to_owned()));
    let csa = CsaBlock::<f64>::new("encoder.stage1", 4, 8, &mut rng(0)).unwrap();
    let names = csa.param_names();
    for want in ["encoder.stage1.group2.conv3.weight", "encoder.stage1.attention.fc2.bias", "encoder.stage1.shortcut.bn.gamma"] {
        assert!(names.contains(&want.to_owned()), "{want}");
    }
}

#[test]
fn pfc_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = selftest::pfc_gradients(seed).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn csa_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = selftest::csa_gradients(seed).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}
