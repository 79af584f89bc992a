use dcsau_core::analysis::{count_flops, count_params, CostReport};
use dcsau_core::autograd::Graph;
use dcsau_core::model::{predict_mask, DcsauNet, ModelConfig, Variant};
use dcsau_core::nn::{Ctx, Module};
use dcsau_core::selftest;
use dcsau_core::tensor::{Mask, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image<T: dcsau_core::scalar::Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    Tensor::uniform(Shape::new(n, 3, h, w), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn mini(variant: Variant, widths: &[usize]) -> ModelConfig {
    ModelConfig::new(variant).with_widths(widths)
}

fn archive_trainable<M: Module<f32>>(m: &M) -> u64 {
    let bytes = m.to_archive().to_bytes();
    let archive = dcsau_core::serialize::Archive::<f32>::from_bytes(&bytes).unwrap();
    archive
        .entries
        .iter()
        .filter(|(n, _)| !n.ends_with(".running_mean") && !n.ends_with(".running_var"))
        .map(|(_, t)| t.len() as u64)
        .sum()
}

#[test]
fn dcsau_census_has_five_encoder_four_decoder_stages_and_a_head() {
    let full = mini(Variant::Dcsau, &[64, 128, 256, 512, 1024]);
    let report = CostReport::new(&full, 256, 256).unwrap();
    // Same block topology at a width that is cheap to build.
    let model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[2, 4, 8, 16, 32]), 0).unwrap();
    let mut census = Vec::new();
    model.census(&mut census);
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(census, names);
    let stages = |prefix: &str| {
        let mut s: Vec<&str> = census
            .iter()
            .filter(|n| n.starts_with(prefix))
            .map(|n| &n[..prefix.len() + 6])
            .collect();
        s.dedup();
        s.len()
    };
    assert_eq!(stages("encoder."), 5);
    assert_eq!(stages("decoder."), 4);
    assert_eq!(census.iter().filter(|n| *n == "head").count(), 1);
    assert!(census[0].starts_with("encoder.stage0.pfc.head"));
}

#[test]
fn unet_is_built_from_double_conv_stages() {
    let model = DcsauNet::<f32>::build(&mini(Variant::Unet, &[4, 8, 16]), 0).unwrap();
    let names = model.param_names();
    assert!(names.iter().all(|n| n == "head.weight" || n == "head.bias" || n.contains(".plain.conv")));
    let per_stage = names.iter().filter(|n| n.starts_with("encoder.stage1.")).count();
    assert_eq!(per_stage, 2 * 6);
}

#[test]
fn analytic_counts_match_built_models() {
    for v in Variant::ALL {
        for config in [ModelConfig::new(v), mini(v, &[4, 8, 16]).with_classes(3)] {
            let model = DcsauNet::<f32>::build(&config, 1).unwrap();
            let n = count_params(&config);
            assert_eq!(model.num_trainable() as u64, n, "{v}");
            assert_eq!(archive_trainable(&model), n, "{v}");
        }
    }
}

#[test]
fn analytic_macs_match_executed_op_counts() {
    for v in Variant::ALL {
        for (widths, h, w, classes) in [(vec![4, 8, 16], 16, 24, 1), (vec![6, 6, 10, 12], 32, 16, 3), (vec![8], 8, 8, 2)] {
            let config = mini(v, &widths).with_classes(classes);
            let mut model = DcsauNet::<f64>::build(&config, 2).unwrap();
            let g = Graph::new();
            model.forward(&Ctx::inference(&g), g.constant(image(1, h, w, 3))).unwrap();
            assert_eq!(g.op_count(), count_flops(&config, h, w).unwrap(), "{v} {widths:?}");
        }
    }
}

#[test]
fn logits_match_input_extent() {
    let mut model = DcsauNet::<f32>::build(&ModelConfig::new(Variant::Dcsau), 0).unwrap();
    let y = model.infer(&image(1, 256, 256, 0)).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 256, 256));
    let mut model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[8, 16, 16, 32, 32]).with_classes(3), 0).unwrap();
    let y = model.infer(&image(1, 512, 512, 0)).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 3, 512, 512));
}

#[test]
fn encoder_stages_halve_extents() {
    let mut model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[4, 6, 8, 10]), 0).unwrap();
    let g = Graph::new();
    let feats = model.encode(&Ctx::inference(&g), g.constant(image(2, 32, 48, 1))).unwrap();
    for (i, f) in feats.iter().enumerate() {
        assert_eq!((f.shape().h, f.shape().w), (32 >> i, 48 >> i));
    }
}

#[test]
fn indivisible_input_names_the_divisor() {
    let mut model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[4, 6, 8, 10]), 0).unwrap();
    let err = model.infer(&image(1, 36, 32, 0)).unwrap_err();
    assert!(err.to_string().contains("divisible by 8"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn odd_widths_are_rejected_for_split_attention() {
    assert!(DcsauNet::<f32>::build(&mini(Variant::UnetCsa, &[4, 7]), 0).is_err());
    assert!(DcsauNet::<f32>::build(&mini(Variant::Unet, &[4, 7]), 0).is_ok());
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let config = mini(Variant::Dcsau, &[4, 8, 16]);
    let a = DcsauNet::<f32>::build(&config, 9).unwrap().to_archive().to_bytes();
    let b = DcsauNet::<f32>::build(&config, 9).unwrap().to_archive().to_bytes();
    let c = DcsauNet::<f32>::build(&config, 10).unwrap().to_archive().to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn eval_forward_is_pure() {
    let mut model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[4, 8, 16]), 3).unwrap();
    let x = image(2, 16, 16, 4);
    let first = model.infer(&x).unwrap();
    assert_eq!(model.infer(&x).unwrap(), first);
}

#[test]
fn checkpoint_load_restores_outputs_and_rejects_mismatches() {
    let config = mini(Variant::Dcsau, &[4, 8]);
    let mut a = DcsauNet::<f32>::build(&config, 1).unwrap();
    let mut b = DcsauNet::<f32>::build(&config, 2).unwrap();
    let x = image(1, 8, 8, 0);
    b.load_archive(&a.to_archive()).unwrap();
    assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    let mut other = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[4, 10]), 1).unwrap();
    let err = other.load_archive(&a.to_archive()).unwrap_err();
    assert!(err.to_string().contains("encoder.stage1.csa"), "{err}");
}

#[test]
fn miniature_gradients_are_finite_under_dice_loss() {
    let mut model = DcsauNet::<f32>::build(&mini(Variant::Dcsau, &[8, 16, 32]), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.gen_range(0..2)).collect();
    let target = Mask::from_vec(2, 16, 16, labels).unwrap().one_hot::<f32>(1);
    let g = Graph::new();
    let logits = model.forward(&Ctx::train(&g), g.constant(image(2, 16, 16, 7))).unwrap();
    let loss = model.activate(logits).unwrap().dice_loss(&target, 1.0).unwrap();
    g.backward(loss).unwrap();
    model.pull_grads(&g).unwrap();
    let mut nonzero = 0;
    model.visit(&mut |p| {
        if p.trainable() {
            assert!(p.grad.is_finite(), "{}", p.name());
            nonzero += usize::from(p.grad.data().iter().any(|&v| v != 0.0));
        }
    });
    assert!(nonzero > 10);
}

#[test]
fn miniature_gradients_match_finite_differences() {
    for seed in 0..5 {
        for v in [Variant::Dcsau, Variant::Unet] {
            let r = selftest::miniature_gradients(v, seed).unwrap();
            assert!(r.max_rel_error < 1e-3, "{v} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn kernel_sweep_is_monotone_with_closed_form_steps() {
    let base = ModelConfig::new(Variant::Dcsau);
    let c0 = base.stage_widths[0] as u64;
    let costs: Vec<(u64, u64)> = [3u64, 5, 7, 9]
        .iter()
        .map(|&k| {
            let c = base.clone().with_kernel(k as usize);
            (count_params(&c), count_flops(&c, 256, 256).unwrap())
        })
        .collect();
    for (i, pair) in costs.windows(2).enumerate() {
        let (k1, k2) = (3 + 2 * i as u64, 5 + 2 * i as u64);
        let dk = k2 * k2 - k1 * k1;
        assert_eq!(pair[1].0 - pair[0].0, dk * c0);
        assert_eq!(pair[1].1 - pair[0].1, dk * c0 * 256 * 256);
    }
}

#[test]
fn summary_is_deterministic_and_consistent() {
    let config = mini(Variant::Dcsau, &[4, 8]);
    let report = CostReport::new(&config, 16, 16).unwrap();
    let mut census = Vec::new();
    DcsauNet::<f32>::build(&config, 0).unwrap().census(&mut census);
    assert_eq!(report.rows.len(), census.len());
    assert_eq!(report.total_params, count_params(&config));
    assert_eq!(report.total_macs, count_flops(&config, 16, 16).unwrap());
    let text = report.render();
    assert_eq!(text, CostReport::new(&config, 16, 16).unwrap().render());
    assert!(text.contains(&format!("total  {:>12}", report.total_params).replace("total ", "total")) || text.contains("total"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["total_macs"].as_u64(), Some(report.total_macs));
    assert_eq!(json["rows"].as_array().unwrap().len(), census.len());
}

#[test]
fn predicted_masks_follow_conventions() {
    let logits = Tensor::<f32>::from_vec(Shape::new(1, 3, 1, 3), vec![2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
    assert_eq!(predict_mask(&logits, 0.5).data(), &[0, 0, 2]);
    let binary = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, -0.01, 3.0]).unwrap();
    assert_eq!(predict_mask(&binary, 0.5).data(), &[1, 0, 1]);
}
