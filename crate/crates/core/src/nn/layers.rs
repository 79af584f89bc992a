use rand::Rng;

use super::{check_channels, init_weight, Ctx, Module, Param};
use crate::autograd::Var;
use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the batch statistic in the running-average update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Dense or depthwise convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    name: String,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: ConvGeometry,
    pub depthwise: bool,
}

impl<T: Scalar> Conv2d<T> {
    /// Stride-1 convolution padded by `kernel / 2` on each side.
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let shape = Shape::new(cout, cin, kernel, kernel);
        Conv2d {
            name: name.to_owned(),
            weight: Param::new(format!("{name}.weight"), init_weight(shape, rng), true),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)), true),
            geom: ConvGeometry::new(1, kernel / 2),
            depthwise: false,
        }
    }

    /// One K×K filter per channel.
    pub fn depthwise<R: Rng + ?Sized>(name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        let shape = Shape::new(channels, 1, kernel, kernel);
        Conv2d {
            name: name.to_owned(),
            weight: Param::new(format!("{name}.weight"), init_weight(shape, rng), true),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1)), true),
            geom: ConvGeometry::new(1, kernel / 2),
            depthwise: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.depthwise {
            self.weight.value.shape().n
        } else {
            self.weight.value.shape().c
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = self.weight.bind(ctx);
        let b = self.bias.bind(ctx);
        if self.depthwise {
            x.depthwise_conv2d(w, Some(b), self.geom)
        } else {
            x.conv2d(w, Some(b), self.geom)
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn census(&self, out: &mut Vec<String>) {
        out.push(self.name.clone());
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let vector = |v: f64| Tensor::full(Shape::new(1, channels, 1, 1), T::from_f64_lossy(v));
        BatchNorm2d {
            name: name.to_owned(),
            gamma: Param::new(format!("{name}.gamma"), vector(1.0), true),
            beta: Param::new(format!("{name}.beta"), vector(0.0), true),
            running_mean: Param::new(format!("{name}.running_mean"), vector(0.0), false),
            running_var: Param::new(format!("{name}.running_var"), vector(1.0), false),
        }
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let gamma = self.gamma.bind(ctx);
        let beta = self.beta.bind(ctx);
        let (y, stats) = x.batchnorm(
            gamma,
            beta,
            self.running_mean.value.data(),
            self.running_var.value.data(),
            ctx.mode,
            BN_EPS,
        )?;
        if let Some(stats) = stats {
            let blend = |old: &mut [T], batch: &[f64]| {
                for (o, &b) in old.iter_mut().zip(batch) {
                    *o = T::from_f64_lossy((1.0 - BN_MOMENTUM) * o.as_f64() + BN_MOMENTUM * b);
                }
            };
            blend(self.running_mean.value.data_mut(), &stats.mean);
            blend(self.running_var.value.data_mut(), &stats.var_unbiased);
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn census(&self, out: &mut Vec<String>) {
        out.push(self.name.clone());
    }
}

/// Convolution followed by batch normalization and, optionally, ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit<T: Scalar> {
    name: String,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        ConvUnit {
            name: name.to_owned(),
            conv: Conv2d::new(name, cin, cout, kernel, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu: true,
        }
    }

    pub fn depthwise<R: Rng + ?Sized>(name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        ConvUnit {
            name: name.to_owned(),
            conv: Conv2d::depthwise(name, channels, kernel, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), channels),
            relu: true,
        }
    }

    /// Variant without the trailing ReLU (used for projection shortcuts).
    pub fn linear<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        ConvUnit {
            relu: false,
            ..Self::new(name, cin, cout, kernel, rng)
        }
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        check_channels("conv_unit", x.shape(), self.conv.in_channels())?;
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

impl<T: Scalar> Module<T> for ConvUnit<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }

    fn census(&self, out: &mut Vec<String>) {
        out.push(format!("{}.conv", self.name));
        out.push(format!("{}.bn", self.name));
        if self.relu {
            out.push(format!("{}.relu", self.name));
        }
    }
}
