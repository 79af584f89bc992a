use rand::Rng;

use super::{check_channels, BatchNorm2d, Conv2d, ConvUnit, Ctx, Module, Param};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Two 3×3 conv-BN-ReLU units: the plain U-Net stage.
#[derive(Clone, Debug)]
pub struct DoubleConv<T: Scalar> {
    pub conv1: ConvUnit<T>,
    pub conv2: ConvUnit<T>,
}

impl<T: Scalar> DoubleConv<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        DoubleConv {
            conv1: ConvUnit::new(&format!("{name}.conv1"), cin, cout, 3, rng),
            conv2: ConvUnit::new(&format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(ctx, x)?;
        self.conv2.forward(ctx, h)
    }
}

impl<T: Scalar> Module<T> for DoubleConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }

    fn census(&self, out: &mut Vec<String>) {
        self.conv1.census(out);
        self.conv2.census(out);
    }
}

/// Primary feature conservation block.
///
/// A 3×3 head raises the channel count; a residual branch made of a K×K
/// depthwise convolution and a 1×1 pointwise convolution is added back onto
/// the head output:
///
/// ```text
/// h = head(x)
/// y = h + pointwise(depthwise(h))
/// ```
#[derive(Clone, Debug)]
pub struct PfcBlock<T: Scalar> {
    name: String,
    pub head: ConvUnit<T>,
    pub depthwise: ConvUnit<T>,
    pub pointwise: ConvUnit<T>,
    kernel: usize,
}

impl<T: Scalar> PfcBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::Config(format!("PFC kernel size must be odd, got {kernel}")));
        }
        Ok(PfcBlock {
            name: name.to_owned(),
            head: ConvUnit::new(&format!("{name}.head"), cin, cout, 3, rng),
            depthwise: ConvUnit::depthwise(&format!("{name}.depthwise"), cout, kernel, rng),
            pointwise: ConvUnit::new(&format!("{name}.pointwise"), cout, cout, 1, rng),
            kernel,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        check_channels("pfc_forward", x.shape(), self.head.conv.in_channels())?;
        let h = self.head.forward(ctx, x)?;
        let branch = self.depthwise.forward(ctx, h)?;
        let branch = self.pointwise.forward(ctx, branch)?;
        h.add(branch)
    }
}

impl<T: Scalar> Module<T> for PfcBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.head.visit(f);
        self.depthwise.visit(f);
        self.pointwise.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.head.visit_mut(f);
        self.depthwise.visit_mut(f);
        self.pointwise.visit_mut(f);
    }

    fn census(&self, out: &mut Vec<String>) {
        self.head.census(out);
        self.depthwise.census(out);
        self.pointwise.census(out);
        out.push(format!("{}.residual", self.name));
    }
}

/// Intermediate values of one CSA forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CsaTrace<'g, T: Scalar> {
    /// First group output.
    pub u1: Var<'g, T>,
    /// Second group output (its input already carries `u1`).
    pub u2: Var<'g, T>,
    /// `u1 + u2`.
    pub fused: Var<'g, T>,
    /// Channel statistics of `fused`, N×C×1×1.
    pub stats: Var<'g, T>,
    /// Raw attention logits, N×2C×1×1 (group-major).
    pub logits: Var<'g, T>,
    pub a1: Var<'g, T>,
    pub a2: Var<'g, T>,
    /// `a1 ⊙ u1 + a2 ⊙ u2`.
    pub weighted: Var<'g, T>,
    pub shortcut: Var<'g, T>,
    pub output: Var<'g, T>,
}

/// Compact split-attention block with two cardinal groups.
///
/// The input is split channel-wise in half. Group one applies a 1×1 then
/// a 3×3 unit. Group two applies the same pair, adds group one's output,
/// and passes the sum through one more 3×3 unit. The fused map feeds a
/// squeeze-style head whose logits are normalized across the two groups
/// per channel; the group outputs are reweighted, summed, and added to the
/// (possibly projected) input.
#[derive(Clone, Debug)]
pub struct CsaBlock<T: Scalar> {
    name: String,
    cin: usize,
    cout: usize,
    pub g1_reduce: ConvUnit<T>,
    pub g1_conv: ConvUnit<T>,
    pub g2_reduce: ConvUnit<T>,
    pub g2_conv: ConvUnit<T>,
    pub g2_fuse: ConvUnit<T>,
    pub attn_fc1: Conv2d<T>,
    pub attn_bn: BatchNorm2d<T>,
    pub attn_fc2: Conv2d<T>,
    pub shortcut: Option<ConvUnit<T>>,
}

pub const GROUPS: usize = 2;

/// Width of the attention head's hidden layer.
pub fn attention_hidden(cout: usize) -> usize {
    (cout / 4).max(32)
}

impl<T: Scalar> CsaBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        if !cin.is_multiple_of(GROUPS) || cin == 0 {
            return Err(Error::Config(format!("{name}: CSA input channels must be even, got {cin}")));
        }
        if cout == 0 {
            return Err(Error::Config(format!("{name}: CSA output channels must be positive")));
        }
        let half = cin / GROUPS;
        let hidden = attention_hidden(cout);
        Ok(CsaBlock {
            name: name.to_owned(),
            cin,
            cout,
            g1_reduce: ConvUnit::new(&format!("{name}.group1.conv1"), half, cout, 1, rng),
            g1_conv: ConvUnit::new(&format!("{name}.group1.conv2"), cout, cout, 3, rng),
            g2_reduce: ConvUnit::new(&format!("{name}.group2.conv1"), half, cout, 1, rng),
            g2_conv: ConvUnit::new(&format!("{name}.group2.conv2"), cout, cout, 3, rng),
            g2_fuse: ConvUnit::new(&format!("{name}.group2.conv3"), cout, cout, 3, rng),
            attn_fc1: Conv2d::new(&format!("{name}.attention.fc1"), cout, hidden, 1, rng),
            attn_bn: BatchNorm2d::new(&format!("{name}.attention.bn"), hidden),
            attn_fc2: Conv2d::new(&format!("{name}.attention.fc2"), hidden, GROUPS * cout, 1, rng),
            shortcut: (cin != cout).then(|| ConvUnit::linear(&format!("{name}.shortcut"), cin, cout, 1, rng)),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_traced(ctx, x)?.output)
    }

    pub fn forward_traced<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<CsaTrace<'g, T>> {
        check_channels("csa_forward", x.shape(), self.cin)?;
        let groups = x.split_channels(GROUPS)?;
        let u1 = self.g1_reduce.forward(ctx, groups[0])?;
        let u1 = self.g1_conv.forward(ctx, u1)?;
        let h2 = self.g2_reduce.forward(ctx, groups[1])?;
        let h2 = self.g2_conv.forward(ctx, h2)?;
        let u2 = self.g2_fuse.forward(ctx, h2.add(u1)?)?;

        let fused = u1.add(u2)?;
        let stats = fused.global_avg_pool();
        let z = self.attn_fc1.forward(ctx, stats)?;
        let z = self.attn_bn.forward(ctx, z)?.relu();
        let logits = self.attn_fc2.forward(ctx, z)?;
        let attention = logits.softmax_groups(GROUPS)?;
        let a = attention.split_channels(GROUPS)?;
        let weighted = u1.scale_channels(a[0])?.add(u2.scale_channels(a[1])?)?;

        let shortcut = match self.shortcut.as_mut() {
            Some(t) => t.forward(ctx, x)?,
            None => x,
        };
        let output = weighted.add(shortcut)?;
        Ok(CsaTrace {
            u1,
            u2,
            fused,
            stats,
            logits,
            a1: a[0],
            a2: a[1],
            weighted,
            shortcut,
            output,
        })
    }
}

impl<T: Scalar> Module<T> for CsaBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.g1_reduce.visit(f);
        self.g1_conv.visit(f);
        self.g2_reduce.visit(f);
        self.g2_conv.visit(f);
        self.g2_fuse.visit(f);
        self.attn_fc1.visit(f);
        self.attn_bn.visit(f);
        self.attn_fc2.visit(f);
        if let Some(t) = &self.shortcut {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.g1_reduce.visit_mut(f);
        self.g1_conv.visit_mut(f);
        self.g2_reduce.visit_mut(f);
        self.g2_conv.visit_mut(f);
        self.g2_fuse.visit_mut(f);
        self.attn_fc1.visit_mut(f);
        self.attn_bn.visit_mut(f);
        self.attn_fc2.visit_mut(f);
        if let Some(t) = self.shortcut.as_mut() {
            t.visit_mut(f);
        }
    }

    fn census(&self, out: &mut Vec<String>) {
        let n = &self.name;
        self.g1_reduce.census(out);
        self.g1_conv.census(out);
        self.g2_reduce.census(out);
        self.g2_conv.census(out);
        out.push(format!("{n}.group2.combine"));
        self.g2_fuse.census(out);
        out.push(format!("{n}.fuse"));
        out.push(format!("{n}.pool"));
        self.attn_fc1.census(out);
        self.attn_bn.census(out);
        out.push(format!("{n}.attention.relu"));
        self.attn_fc2.census(out);
        out.push(format!("{n}.attention.softmax"));
        out.push(format!("{n}.reweight"));
        if let Some(t) = &self.shortcut {
            t.census(out);
        }
        out.push(format!("{n}.residual"));
    }
}
