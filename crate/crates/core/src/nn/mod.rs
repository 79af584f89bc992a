//! Parameterized, differentiable building blocks.

mod blocks;
mod layers;

pub use blocks::{attention_hidden, CsaBlock, CsaTrace, DoubleConv, PfcBlock, GROUPS};
pub use layers::{BatchNorm2d, Conv2d, ConvUnit, BN_EPS, BN_MOMENTUM};

use rand::Rng;

use crate::autograd::{Graph, NodeId, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, GradCheck};
use crate::kernels::BnMode;
use crate::scalar::Scalar;
use crate::serialize::Archive;
use crate::tensor::{Shape, Tensor};

/// A named tensor owned by a layer.
///
/// Trainable parameters carry a gradient buffer; batch-norm running
/// statistics are stored as non-trainable parameters so that they travel
/// through checkpoints alongside the weights.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    trainable: bool,
    binding: Option<(u64, NodeId)>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            trainable,
            binding: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Enrolls the current value as a leaf of `ctx`'s graph.
    pub fn bind<'g>(&mut self, ctx: &Ctx<'g, T>) -> Var<'g, T> {
        let var = ctx.graph.leaf(self.value.clone(), ctx.trainable && self.trainable);
        self.binding = Some((ctx.graph.id(), var.id()));
        var
    }

    /// Adds the gradient accumulated in `graph` into [`Param::grad`].
    pub fn pull_grad(&mut self, graph: &Graph<T>) -> Result<()> {
        match self.binding {
            Some((gid, id)) if gid == graph.id() && self.trainable => {
                if let Some(g) = graph.var(id).grad() {
                    self.grad.add_assign(&g)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Per-forward settings shared by every layer.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub mode: BnMode,
    /// Bind trainable parameters as gradient-requiring leaves.
    pub trainable: bool,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn train(graph: &'g Graph<T>) -> Self {
        Ctx {
            graph,
            mode: BnMode::Train,
            trainable: true,
        }
    }

    /// Eval-mode forward with parameters still differentiable.
    pub fn eval(graph: &'g Graph<T>) -> Self {
        Ctx {
            graph,
            mode: BnMode::Eval,
            trainable: true,
        }
    }

    /// Eval-mode forward without gradient bookkeeping.
    pub fn inference(graph: &'g Graph<T>) -> Self {
        Ctx {
            graph,
            mode: BnMode::Eval,
            trainable: false,
        }
    }
}

pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    /// Layer names in execution order.
    fn census(&self, out: &mut Vec<String>);

    fn num_trainable(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                total += p.numel();
            }
        });
        total
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name().to_owned()));
        names
    }

    fn pull_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut(&mut |p| {
            if res.is_ok() {
                res = p.pull_grad(graph);
            }
        });
        res
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.grad.fill(T::zero()));
    }

    fn to_archive(&self) -> Archive<T> {
        let mut archive = Archive::default();
        self.visit(&mut |p| archive.push(p.name(), p.value.clone()));
        archive
    }

    /// Loads every parameter by name. Missing names or mismatched extents
    /// are reported with the first offending tensor.
    fn load_archive(&mut self, archive: &Archive<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut(&mut |p| {
            if res.is_err() {
                return;
            }
            res = match archive.get(p.name()) {
                None => Err(Error::Config(format!("checkpoint has no tensor `{}`", p.name()))),
                Some(t) if t.shape() != p.value.shape() => Err(Error::Config(format!(
                    "checkpoint tensor `{}` has shape {}, model expects {}",
                    p.name(),
                    t.shape(),
                    p.value.shape()
                ))),
                Some(t) => {
                    p.value = t.clone();
                    Ok(())
                }
            };
        });
        res?;
        let known = self.param_names();
        if let Some((extra, _)) = archive.entries.iter().find(|(n, _)| !known.contains(n)) {
            return Err(Error::Config(format!("checkpoint tensor `{extra}` does not belong to this model")));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization: `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_weight<T: Scalar, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let bound = 1.0 / fan_in.sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub(crate) fn check_channels(op: &'static str, x: Shape, expected: usize) -> Result<()> {
    if x.c != expected {
        return Err(Error::shape(op, "channel", expected, x.c));
    }
    Ok(())
}

/// Finite-difference check of a module's parameter gradients.
///
/// `loss` runs one forward pass and returns a scalar. At most `per_param`
/// evenly spaced elements of every trainable parameter accepted by `select`
/// are perturbed.
pub fn grad_check_params<T, M, F>(
    module: &mut M,
    mut loss: F,
    step: f64,
    per_param: usize,
    mode: BnMode,
    select: &dyn Fn(&Param<T>) -> bool,
) -> Result<GradCheck>
where
    T: Scalar,
    M: Module<T>,
    F: for<'g> FnMut(&mut M, &Ctx<'g, T>) -> Result<Var<'g, T>>,
{
    module.zero_grads();
    let base = {
        let g = Graph::new();
        let ctx = Ctx {
            graph: &g,
            mode,
            trainable: true,
        };
        let l = loss(module, &ctx)?;
        g.backward(l)?;
        module.pull_grads(&g)?;
        g.branch_signature()
    };
    // Snapshot so train-mode running-stat updates during probing don't leak.
    let snapshot = module.to_archive();
    let mut eval = |m: &mut M| -> Result<(f64, u64)> {
        let g = Graph::new();
        let ctx = Ctx {
            graph: &g,
            mode,
            trainable: false,
        };
        let l = loss(m, &ctx)?;
        let v = l.value_ref().data()[0].as_f64();
        Ok((v, g.branch_signature()))
    };
    let mut targets = Vec::new();
    let mut index = 0;
    module.visit(&mut |p| {
        if p.trainable() && select(p) {
            let n = p.numel();
            let picks = n.min(per_param.max(1));
            for j in 0..picks {
                targets.push((index, j * n / picks, p.grad.data()[j * n / picks].as_f64()));
            }
        }
        index += 1;
    });
    let mut report = GradCheck::default();
    for (param_index, element, analytic) in targets {
        let probe = |delta: f64| -> Result<(f64, u64)> {
            let mut i = 0;
            module.visit_mut(&mut |p| {
                if i == param_index {
                    let v = p.value.data()[element].as_f64();
                    p.value.data_mut()[element] = T::from_f64_lossy(v + delta);
                }
                i += 1;
            });
            let out = eval(module);
            module.load_archive(&snapshot)?;
            out
        };
        let numeric = central_difference(probe, base, step)?;
        report.observe(param_index, element, analytic, numeric);
    }
    Ok(report)
}
