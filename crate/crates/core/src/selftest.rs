//! Oracle, gradient and invariant checks runnable without a test harness.
//!
//! Every check compares a fast path against an independent reference or a
//! finite difference and reports its worst deviation against a tolerance.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{count_flops, count_params};
use crate::autograd::{Graph, Var};
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheck};
use crate::kernels::{self, BnMode, ConvGeometry};
use crate::metrics::{confusion, dice_loss, metrics_from_counts};
use crate::model::{DcsauNet, ModelConfig, Variant};
use crate::nn::{grad_check_params, CsaBlock, Ctx, Module, PfcBlock};
use crate::oracle;
use crate::tensor::{Mask, Shape, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the oracle comparisons.
const ORACLE_FLOOR: f64 = 1e-6;
/// Structurally cancelled gradients must stay below this.
const CANCELLED_TOLERANCE: f64 = 1e-10;
const FD_STEP: f64 = 1e-4;

/// Deliberate defects for checking that the suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the fast convolution's output before it meets its oracle.
    FlipConvSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Options {
    pub seeds: u64,
    pub fault: Option<Fault>,
}

impl Default for Options {
    fn default() -> Self {
        Options { seeds: 5, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub op: String,
    pub worst: f64,
    pub tolerance: f64,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

impl Check {
    fn measured(module: &'static str, op: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Check {
            module,
            op: op.into(),
            worst,
            tolerance,
            error: None,
        }
    }

    fn from_result(module: &'static str, op: impl Into<String>, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(worst) => Check::measured(module, op, worst, tolerance),
            Err(e) => Check {
                module,
                op: op.into(),
                worst: f64::NAN,
                tolerance,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "ok  " } else { "FAIL" };
        match &self.error {
            Some(e) => write!(f, "{status} {}/{}: {e}", self.module, self.op),
            None => write!(f, "{status} {}/{}: worst {:.3e} (limit {:.0e})", self.module, self.op, self.worst, self.tolerance),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

// ---------------------------------------------------------------- oracles

fn conv_oracle(seed: u64, fault: Option<Fault>) -> f64 {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
    let (h, w, k) = (r.gen_range(3..9), r.gen_range(3..9), [1, 3][r.gen_range(0..2)]);
    let (stride, padding) = (r.gen_range(1..3), r.gen_range(0..2));
    let x = uniform(Shape::new(n, cin, h, w), seed ^ 1).cast::<f32>();
    let wt = uniform(Shape::new(cout, cin, k, k), seed ^ 2).cast::<f32>();
    let b = uniform(Shape::new(1, cout, 1, 1), seed ^ 3).cast::<f32>();
    let mut fast = kernels::conv2d(&x, &wt, Some(&b), ConvGeometry::new(stride, padding)).expect("valid geometry");
    if fault == Some(Fault::FlipConvSign) {
        fast = fast.map(|v| -v);
    }
    fast.max_rel_diff(&oracle::conv2d(&x, &wt, Some(&b), stride, padding), ORACLE_FLOOR)
}

fn depthwise_oracle(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(3..9), r.gen_range(3..9));
    let k = [1, 3, 5, 7][r.gen_range(0..4)];
    let padding = k / 2;
    let x = uniform(Shape::new(n, c, h, w), seed ^ 1).cast::<f32>();
    let wt = uniform(Shape::new(c, 1, k, k), seed ^ 2).cast::<f32>();
    let b = uniform(Shape::new(1, c, 1, 1), seed ^ 3).cast::<f32>();
    let fast = kernels::depthwise_conv2d(&x, &wt, Some(&b), ConvGeometry::new(1, padding)).expect("valid geometry");
    fast.max_rel_diff(&oracle::depthwise_by_slices(&x, &wt, Some(&b), 1, padding), ORACLE_FLOOR)
}

fn pooling_oracle(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
    let x = uniform(Shape::new(n, c, 2 * h, 2 * w), seed ^ 1).cast::<f32>();
    let (pooled, _) = kernels::maxpool2x2(&x).expect("even extents");
    let max = pooled.max_rel_diff(&oracle::maxpool2x2(&x), ORACLE_FLOOR);
    let gap = kernels::global_avg_pool(&x).max_rel_diff(&oracle::global_avg_pool(&x), ORACLE_FLOOR);
    let up = kernels::resize_bilinear(&pooled, 2 * h, 2 * w).max_rel_diff(&oracle::resize_bilinear(&pooled, 2 * h, 2 * w), ORACLE_FLOOR);
    (max, gap, up)
}

/// Largest count mismatch (exact) and score deviation.
fn metrics_oracle(seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let classes = r.gen_range(2..5);
    let len = r.gen_range(1..65);
    let gt: Vec<u8> = (0..len).map(|_| r.gen_range(0..classes) as u8).collect();
    let pred: Vec<u8> = (0..len).map(|_| r.gen_range(0..classes) as u8).collect();
    let counts = confusion(&pred, &gt, classes)?;
    let want = oracle::confusion(&pred, &gt, classes);
    let count_err = counts
        .classes
        .iter()
        .zip(&want)
        .map(|(c, w)| if [c.tp, c.fp, c.fn_, c.tn] == *w { 0.0 } else { 1.0 })
        .fold(0.0, f64::max);
    let got = metrics_from_counts(&counts).values();
    let score_err = got
        .iter()
        .zip(oracle::scores(&pred, &gt, classes))
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(ORACLE_FLOOR))
        .fold(0.0, f64::max);
    Ok((count_err, score_err))
}

/// Kernel-versus-reference comparisons over `seeds` random instances each.
pub fn oracle_checks(options: &Options) -> Vec<Check> {
    let seeds = 0..options.seeds.max(1) * 8;
    let worst = |f: &dyn Fn(u64) -> f64| seeds.clone().map(f).fold(0.0, f64::max);
    let mut checks = vec![
        Check::measured("tensor-autograd", "conv2d oracle", worst(&|s| conv_oracle(s, options.fault)), ORACLE_TOLERANCE),
        Check::measured("tensor-autograd", "depthwise_conv2d oracle", worst(&depthwise_oracle), ORACLE_TOLERANCE),
        Check::measured("tensor-autograd", "maxpool2d oracle", worst(&|s| pooling_oracle(s).0), ORACLE_TOLERANCE),
        Check::measured("tensor-autograd", "global_avg_pool oracle", worst(&|s| pooling_oracle(s).1), ORACLE_TOLERANCE),
        Check::measured("tensor-autograd", "upsample2x oracle", worst(&|s| pooling_oracle(s).2), ORACLE_TOLERANCE),
    ];
    let metrics: Result<(f64, f64)> = seeds.clone().try_fold((0.0, 0.0), |(c, s), seed| {
        let (dc, ds) = metrics_oracle(seed)?;
        Ok((f64::max(c, dc), f64::max(s, ds)))
    });
    checks.push(Check::from_result("metrics-loss", "confusion counts oracle", 0.0, metrics.as_ref().map(|m| m.0).map_err(clone_err)));
    checks.push(Check::from_result("metrics-loss", "five metrics oracle", ORACLE_TOLERANCE, metrics.map(|m| m.1)));
    checks
}

fn clone_err(e: &Error) -> Error {
    Error::invalid("selftest", e.to_string())
}

// ------------------------------------------------------------- gradients

type Composite = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>], &Tensor<f64>) -> Result<Var<'g, f64>>;

struct Primitive {
    name: &'static str,
    inputs: &'static [[usize; 4]],
    out: [usize; 4],
    f: Composite,
}

fn bn_train<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>], p: &Tensor<f64>) -> Result<Var<'g, f64>> {
    let (y, _) = v[0].batchnorm(v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], BnMode::Train, 1e-5)?;
    y.weighted_sum(p)
}

fn bn_eval<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>], p: &Tensor<f64>) -> Result<Var<'g, f64>> {
    let (y, _) = v[0].batchnorm(v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], BnMode::Eval, 1e-5)?;
    y.weighted_sum(p)
}

const PRIMITIVES: &[Primitive] = &[
    Primitive {
        name: "conv2d",
        inputs: &[[2, 2, 5, 5], [3, 2, 3, 3], [1, 3, 1, 1]],
        out: [2, 3, 5, 5],
        f: |_, v, p| v[0].conv2d(v[1], Some(v[2]), ConvGeometry::new(1, 1))?.weighted_sum(p),
    },
    Primitive {
        name: "conv2d stride 2",
        inputs: &[[1, 2, 6, 6], [2, 2, 3, 3]],
        out: [1, 2, 3, 3],
        f: |_, v, p| v[0].conv2d(v[1], None, ConvGeometry::new(2, 1))?.weighted_sum(p),
    },
    Primitive {
        name: "depthwise_conv2d",
        inputs: &[[2, 3, 6, 6], [3, 1, 5, 5], [1, 3, 1, 1]],
        out: [2, 3, 6, 6],
        f: |_, v, p| v[0].depthwise_conv2d(v[1], Some(v[2]), ConvGeometry::new(1, 2))?.weighted_sum(p),
    },
    Primitive {
        name: "maxpool2x2",
        inputs: &[[2, 2, 4, 6]],
        out: [2, 2, 2, 3],
        f: |_, v, p| v[0].maxpool2x2()?.weighted_sum(p),
    },
    Primitive {
        name: "upsample2x",
        inputs: &[[1, 2, 3, 4]],
        out: [1, 2, 6, 8],
        f: |_, v, p| v[0].upsample2x().weighted_sum(p),
    },
    Primitive {
        name: "batchnorm train",
        inputs: &[[2, 3, 4, 4], [1, 3, 1, 1], [1, 3, 1, 1]],
        out: [2, 3, 4, 4],
        f: bn_train,
    },
    Primitive {
        name: "batchnorm eval",
        inputs: &[[2, 3, 4, 4], [1, 3, 1, 1], [1, 3, 1, 1]],
        out: [2, 3, 4, 4],
        f: bn_eval,
    },
    Primitive {
        name: "relu",
        inputs: &[[1, 2, 4, 4]],
        out: [1, 2, 4, 4],
        f: |_, v, p| v[0].relu().weighted_sum(p),
    },
    Primitive {
        name: "sigmoid",
        inputs: &[[1, 2, 4, 4]],
        out: [1, 2, 4, 4],
        f: |_, v, p| v[0].sigmoid().weighted_sum(p),
    },
    Primitive {
        name: "softmax_groups",
        inputs: &[[2, 6, 2, 2]],
        out: [2, 6, 2, 2],
        f: |_, v, p| v[0].softmax_groups(3)?.weighted_sum(p),
    },
    Primitive {
        name: "global_avg_pool",
        inputs: &[[2, 3, 3, 5]],
        out: [2, 3, 1, 1],
        f: |_, v, p| v[0].global_avg_pool().weighted_sum(p),
    },
    Primitive {
        name: "concat/narrow",
        inputs: &[[1, 2, 3, 3], [1, 3, 3, 3]],
        out: [1, 3, 3, 3],
        f: |_, v, p| v[0].concat_channels(v[1])?.narrow_channels(1, 3)?.weighted_sum(p),
    },
    Primitive {
        name: "add/mul",
        inputs: &[[1, 2, 3, 3], [1, 2, 3, 3]],
        out: [1, 2, 3, 3],
        f: |_, v, p| v[0].add(v[1])?.mul(v[1])?.weighted_sum(p),
    },
    Primitive {
        name: "scale_channels",
        inputs: &[[2, 3, 3, 3], [2, 3, 1, 1]],
        out: [2, 3, 3, 3],
        f: |_, v, p| v[0].scale_channels(v[1])?.weighted_sum(p),
    },
];

fn shape(d: [usize; 4]) -> Shape {
    Shape::new(d[0], d[1], d[2], d[3])
}

/// Gradient of every differentiable primitive on one random instance each.
pub fn primitive_gradients(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, prim)| {
            let base = seed * 1000 + i as u64 * 10;
            let inputs: Vec<Tensor<f64>> = prim.inputs.iter().enumerate().map(|(j, &d)| uniform(shape(d), base + j as u64)).collect();
            let proj = uniform(shape(prim.out), base + 9);
            let f = prim.f;
            Ok((prim.name, grad_check(|g, v| f(g, v, &proj), &inputs, FD_STEP)?))
        })
        .collect()
}

/// Gradient of the soft Dice loss on sigmoid probabilities.
pub fn dice_gradients(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
    let logits = Tensor::uniform(Shape::new(n, c, 4, 4), -2.0, 2.0, &mut r);
    let target = Tensor::from_fn(logits.shape(), |_, _, _, _| f64::from(u8::from(r.gen_bool(0.4))));
    grad_check(|_, v| dice_loss(v[0].sigmoid(), &target, crate::metrics::DICE_SMOOTH), &[logits], FD_STEP)
}

fn jitter_shifts<M: Module<f64>>(m: &mut M, seed: u64) {
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

/// Convolution biases ahead of batch-statistics normalization; their
/// train-mode gradient is exactly zero.
fn cancelled_in_block(name: &str) -> bool {
    name.ends_with(".bias") && !name.contains("attention.fc2")
}

/// Also the shift of the deepest encoder shortcut, whose only consumers
/// are such convolutions.
fn cancelled_in_model(name: &str) -> bool {
    (cancelled_in_block(name) && name != "head.bias") || name == "encoder.stage1.csa.shortcut.bn.beta"
}

fn verify_cancelled<M: Module<f64>>(m: &M, cancelled: fn(&str) -> bool) -> Result<()> {
    let mut res = Ok(());
    m.visit(&mut |p| {
        if res.is_ok() && p.trainable() && cancelled(p.name()) && p.grad.data().iter().any(|g| g.abs() >= CANCELLED_TOLERANCE) {
            res = Err(Error::invalid("selftest", format!("gradient of `{}` should cancel exactly", p.name())));
        }
    });
    res
}

/// Parameter and input gradients of a block in both normalization modes.
fn block_gradients<M, F>(mut block: M, cancelled: fn(&str) -> bool, in_shape: Shape, out_c: usize, per_param: usize, seed: u64, forward: F) -> Result<GradCheck>
where
    M: Module<f64> + Clone,
    F: for<'g> Fn(&mut M, &Ctx<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    jitter_shifts(&mut block, seed + 50);
    let mut report = GradCheck::default();
    for (mode, n) in [(BnMode::Eval, 1), (BnMode::Train, 2)] {
        let x = uniform(Shape::new(n, in_shape.c, in_shape.h, in_shape.w), seed ^ 0xabcd);
        let proj = uniform(Shape::new(n, out_c, in_shape.h, in_shape.w), seed ^ 0x5eed);
        let params = grad_check_params(
            &mut block,
            |m, ctx| forward(m, ctx, ctx.graph.constant(x.clone()))?.weighted_sum(&proj),
            FD_STEP,
            per_param,
            mode,
            &|p| mode == BnMode::Eval || !cancelled(p.name()),
        )?;
        if mode == BnMode::Train {
            verify_cancelled(&block, cancelled)?;
        }
        report.merge(params);
        let wrt_input = grad_check(
            |g, v| {
                let ctx = Ctx { graph: g, mode, trainable: false };
                forward(&mut block.clone(), &ctx, v[0])?.weighted_sum(&proj)
            },
            &[x],
            FD_STEP,
        )?;
        report.merge(wrt_input);
    }
    Ok(report)
}

pub fn pfc_gradients(seed: u64) -> Result<GradCheck> {
    let block = PfcBlock::<f64>::new("pfc", 4, 4, 7, &mut rng(seed))?;
    block_gradients(block, cancelled_in_block, Shape::new(1, 4, 8, 8), 4, 6, seed, |m, ctx, x| m.forward(ctx, x))
}

pub fn csa_gradients(seed: u64) -> Result<GradCheck> {
    let block = CsaBlock::<f64>::new("csa", 4, 6, &mut rng(seed))?;
    block_gradients(block, cancelled_in_block, Shape::new(1, 4, 8, 8), 6, 4, seed, |m, ctx, x| m.forward(ctx, x))
}

/// End-to-end gradients of a two-stage model on 8×8 inputs.
pub fn miniature_gradients(variant: Variant, seed: u64) -> Result<GradCheck> {
    let model = DcsauNet::<f64>::build(&ModelConfig::new(variant).with_widths(&[4, 8]), seed)?;
    block_gradients(model, cancelled_in_model, Shape::new(1, 3, 8, 8), 1, 3, seed, |m, ctx, x| m.forward(ctx, x))
}

/// Every gradient group over `seeds` seeds; each check reports the worst
/// relative error across its seeds.
pub fn gradient_checks(options: &Options) -> Vec<Check> {
    let seeds = 0..options.seeds.max(1);
    let mut checks = Vec::new();
    let primitives: Result<Vec<Vec<(&'static str, GradCheck)>>> = seeds.clone().map(primitive_gradients).collect();
    match primitives {
        Ok(runs) => {
            for (i, prim) in PRIMITIVES.iter().enumerate() {
                let worst = runs.iter().map(|r| r[i].1.max_rel_error).fold(0.0, f64::max);
                checks.push(Check::measured("tensor-autograd", format!("{} gradient", prim.name), worst, GRAD_TOLERANCE));
            }
        }
        Err(e) => checks.push(Check::from_result("tensor-autograd", "primitive gradients", GRAD_TOLERANCE, Err(e))),
    }
    let mut group = |module: &'static str, op: &str, f: &dyn Fn(u64) -> Result<GradCheck>| {
        let worst = seeds.clone().try_fold(0.0, |w: f64, s| Ok(w.max(f(s)?.max_rel_error)));
        checks.push(Check::from_result(module, op, GRAD_TOLERANCE, worst));
    };
    group("metrics-loss", "dice_loss gradient", &dice_gradients);
    group("nn-blocks", "pfc_forward gradient", &pfc_gradients);
    group("nn-blocks", "csa_forward gradient", &csa_gradients);
    group("model", "dcsau miniature gradient", &|s| miniature_gradients(Variant::Dcsau, s));
    group("model", "unet miniature gradient", &|s| miniature_gradients(Variant::Unet, s));
    checks
}

// ------------------------------------------------------------ invariants

/// Largest deviation of per-channel attention sums from one.
pub fn attention_sum_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let cin = 2 * r.gen_range(1..5);
    let cout = r.gen_range(1..9);
    let mut block = CsaBlock::<f64>::new("csa", cin, cout, &mut r)?;
    jitter_shifts(&mut block, seed + 1);
    let x = Tensor::uniform(Shape::new(2, cin, 4, 4), -2.0, 2.0, &mut r);
    let g = Graph::new();
    let trace = block.forward_traced(&Ctx::inference(&g), g.constant(x))?;
    let (a1, a2) = (trace.a1.value(), trace.a2.value());
    Ok(a1.data().iter().zip(a2.data()).map(|(a, b)| (a + b - 1.0).abs()).fold(0.0, f64::max))
}

/// 1 unless a CSA block with zeroed branch weights returns its input bit for bit.
pub fn zero_branch_identity(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = 2 * r.gen_range(1..5);
    let mut block = CsaBlock::<f64>::new("csa", c, c, &mut r)?;
    block.visit_mut(&mut |p| {
        if p.name().ends_with(".weight") || p.name().ends_with(".beta") || p.name().ends_with(".bias") {
            p.value.fill(0.0);
        }
    });
    let x = Tensor::uniform(Shape::new(1, c, 4, 4), -2.0, 2.0, &mut r);
    let g = Graph::new();
    let y = block.forward(&Ctx::inference(&g), g.constant(x.clone()))?.value();
    Ok(if y == x { 0.0 } else { 1.0 })
}

/// Spatial scaling of the cost model from 256² to 512².
///
/// Costs are affine in H·W: every map-sized operation scales with the area
/// and the attention vectors do not. The area-proportional part must grow
/// exactly fourfold (`f(512) - f(256) = 4·(f(256) - f(128))` in integers)
/// and the whole ratio must read 4.000 at three decimals.
pub fn flop_scaling(variant: Variant) -> Result<FlopScaling> {
    let config = ModelConfig::new(variant);
    let f = |side: usize| count_flops(&config, side, side);
    let (f128, f256, f512) = (f(128)?, f(256)?, f(512)?);
    Ok(FlopScaling {
        ratio: f512 as f64 / f256 as f64,
        area_exact: f512 - f256 == 4 * (f256 - f128),
        constant: 4 * f256 as i128 - f512 as i128,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopScaling {
    pub ratio: f64,
    pub area_exact: bool,
    /// Three times the resolution-independent part, `4·f(256) - f(512)`.
    pub constant: i128,
}

impl FlopScaling {
    pub fn passed(&self) -> bool {
        self.area_exact && format!("{:.3}", self.ratio) == "4.000"
    }
}

fn flop_scaling_error(variant: Variant) -> Result<f64> {
    let s = flop_scaling(variant)?;
    Ok(if s.passed() { 0.0 } else { (s.ratio - 4.0).abs().max(f64::MIN_POSITIVE) })
}

/// |analytic params - trainable scalars of a built model|.
pub fn param_count_error(variant: Variant) -> Result<f64> {
    let config = ModelConfig::new(variant).with_widths(&[4, 8, 16]);
    let model = DcsauNet::<f32>::build(&config, 0)?;
    Ok((count_params(&config) as f64 - model.num_trainable() as f64).abs())
}

pub fn invariant_checks(options: &Options) -> Vec<Check> {
    let seeds = 0..options.seeds.max(1) * 4;
    let worst = |f: &dyn Fn(u64) -> Result<f64>| seeds.clone().try_fold(0.0, |w: f64, s| Ok(w.max(f(s)?)));
    let mut checks = vec![
        Check::from_result("nn-blocks", "attention sums to one", 1e-6, worst(&attention_sum_error)),
        Check::from_result("nn-blocks", "zero-branch csa identity", 0.0, worst(&zero_branch_identity)),
    ];
    for v in [Variant::Dcsau, Variant::Unet] {
        checks.push(Check::from_result("analysis", format!("{v} flop scaling"), 0.0, flop_scaling_error(v)));
    }
    for v in Variant::ALL {
        checks.push(Check::from_result("analysis", format!("{v} parameter census"), 0.0, param_count_error(v)));
    }
    let split = [(612, (441, 110, 61)), (670, (483, 120, 67))]
        .iter()
        .try_fold(0.0, |w: f64, &(n, want)| Ok(if SplitSpec::default().sizes(n)? == want { w } else { 1.0 }));
    checks.push(Check::from_result("data-pipeline", "split sizes", 0.0, split));
    let labels = Mask::from_vec(1, 2, 2, vec![0, 1, 1, 0]).map(|m| {
        let t = m.one_hot::<f32>(2);
        if t.sum_f64() == 4.0 { 0.0 } else { 1.0 }
    });
    checks.push(Check::from_result("metrics-loss", "one-hot targets", 0.0, labels));
    checks
}

/// The whole suite.
pub fn run(options: &Options) -> Vec<Check> {
    let mut checks = oracle_checks(options);
    checks.extend(invariant_checks(options));
    checks.extend(gradient_checks(options));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_pass_and_fault_is_caught() {
        let options = Options { seeds: 1, fault: None };
        assert!(oracle_checks(&options).iter().all(Check::passed));
        let faulty = Options {
            seeds: 1,
            fault: Some(Fault::FlipConvSign),
        };
        let failed: Vec<Check> = oracle_checks(&faulty).into_iter().filter(|c| !c.passed()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].op, "conv2d oracle");
    }

    #[test]
    fn invariants_hold() {
        for c in invariant_checks(&Options { seeds: 1, fault: None }) {
            assert!(c.passed(), "{c}");
        }
    }
}
