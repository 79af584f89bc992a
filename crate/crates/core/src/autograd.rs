//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every primitive application in execution order; the
//! tape is therefore topologically sorted by construction. [`Var`] is a
//! cheap handle to one recorded value. [`Graph::backward`] replays the
//! gradient rules from the loss back to the leaves, visiting each node once.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, BnMode, BnSaved, BnStats, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub type NodeId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule of a recorded node, together with what its backward pass
/// needs from the forward pass.
enum Op<T> {
    Leaf,
    /// Produced from inputs that do not require gradients; no rule needed.
    Detached,
    Conv2d { geom: ConvGeometry, has_bias: bool },
    Depthwise { geom: ConvGeometry, has_bias: bool },
    MaxPool { argmax: Vec<usize> },
    Upsample2x,
    BatchNorm { saved: BnSaved<T> },
    Relu,
    Sigmoid,
    SoftmaxGroups { groups: usize },
    GlobalAvgPool,
    Concat { split: usize },
    Narrow { start: usize },
    Add,
    Mul,
    ScaleChannels,
    Sum,
    Dice { target: Tensor<T>, smooth: f64 },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached => "detached",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample2x => "upsample2x",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxGroups { .. } => "softmax_over_groups",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Concat { .. } => "concat_channels",
            Op::Narrow { .. } => "split_channels",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ScaleChannels => "scale_channels",
            Op::Sum => "sum",
            Op::Dice { .. } => "dice_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across backward passes.
    grad: Option<Tensor<T>>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// Tape of recorded operations. Confined to one thread at a time.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    ops: Cell<u64>,
    branches: Cell<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("id", &self.id).field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op.name())
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            ops: Cell::new(0),
            branches: Cell::new(FNV_OFFSET),
        }
    }

    /// Process-unique identifier, used to detect handles from stale graphs.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Arithmetic operations executed so far (MACs for convolutions, one
    /// per produced element for everything else).
    pub fn op_count(&self) -> u64 {
        self.ops.get()
    }

    /// Fingerprint of every piecewise decision taken so far (ReLU signs,
    /// max-pool winners). Two evaluations with equal fingerprints lie on
    /// the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    fn note_branches(&self, decisions: impl Iterator<Item = u64>) {
        let mut h = self.branches.get();
        for d in decisions {
            h = (h ^ d).wrapping_mul(FNV_PRIME);
        }
        self.branches.set(h);
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Re-attach a handle obtained from [`Var::id`].
    pub fn var(&self, id: NodeId) -> Var<'_, T> {
        assert!(id < self.len(), "node {id} not in graph");
        Var { graph: self, id }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let grad = matches!(op, Op::Leaf).then(|| Tensor::zeros(value.shape()));
        nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            grad,
        });
        Var { graph: self, id }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId], ops: u64) -> Var<'_, T> {
        self.ops.set(self.ops.get() + ops);
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Detached };
        self.push(value, op, inputs.to_vec(), requires_grad)
    }

    /// Resets every leaf gradient to zero.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that
    /// requires gradients. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape();
        if shape.numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be a scalar, got shape {shape}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(shape));
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward_rule(&node.op, &inputs, &node.value, &need, &g);
            for ((&input, grad), needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let (Some(grad), true) = (grad, *needed) else { continue };
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => grads[input] = Some(grad),
                }
            }
        }
        for (id, g) in leaf_grads {
            nodes[id].grad.as_mut().expect("leaf gradient buffer").add_assign(&g)?;
        }
        Ok(())
    }
}

fn backward_rule<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>], out: &Tensor<T>, need: &[bool], g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Leaf | Op::Detached => vec![None; inputs.len()],
        Op::Conv2d { geom, has_bias } | Op::Depthwise { geom, has_bias } => {
            let flags = [need[0], need[1], *has_bias && need[2]];
            let grads = if matches!(op, Op::Conv2d { .. }) {
                kernels::conv2d_backward(inputs[0], inputs[1], *has_bias, *geom, g, flags)
            } else {
                kernels::depthwise_conv2d_backward(inputs[0], inputs[1], *has_bias, *geom, g, flags)
            };
            let mut v = vec![grads.x, grads.w];
            if *has_bias {
                v.push(grads.bias);
            }
            v
        }
        Op::MaxPool { argmax } => vec![Some(kernels::maxpool2x2_backward(inputs[0].shape(), argmax, g))],
        Op::Upsample2x => vec![Some(kernels::resize_bilinear_backward(inputs[0].shape(), g))],
        Op::BatchNorm { saved } => {
            let (dx, dgamma, dbeta) = kernels::batchnorm_backward(saved, inputs[1], g);
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Op::Relu => vec![Some(kernels::relu_backward(inputs[0], g))],
        Op::Sigmoid => vec![Some(kernels::sigmoid_backward(out, g))],
        Op::SoftmaxGroups { groups } => vec![Some(kernels::softmax_groups_backward(out, *groups, g))],
        Op::GlobalAvgPool => vec![Some(kernels::global_avg_pool_backward(inputs[0].shape(), g))],
        Op::Concat { split } => vec![
            Some(kernels::narrow_channels(g, 0, *split).expect("concat split")),
            Some(kernels::narrow_channels(g, *split, g.shape().c - split).expect("concat split")),
        ],
        Op::Narrow { start } => vec![Some(kernels::narrow_channels_backward(inputs[0].shape(), *start, g))],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => vec![
            Some(kernels::mul(g, inputs[1]).expect("matching extents")),
            Some(kernels::mul(g, inputs[0]).expect("matching extents")),
        ],
        Op::ScaleChannels => {
            let (dx, ds) = kernels::scale_channels_backward(inputs[0], inputs[1], g);
            vec![Some(dx), Some(ds)]
        }
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))],
        Op::Dice { target, smooth } => vec![Some(kernels::dice_loss_backward(inputs[0], target, *smooth, g.data()[0].as_f64()))],
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Shape {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow of the recorded value.
    pub fn value_ref(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    /// Accumulated gradient of a leaf; `None` for non-leaves.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn unary(self, f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>, u64)>) -> Result<Var<'g, T>> {
        let (value, op, ops) = f(&self.value_ref())?;
        Ok(self.graph.record(value, op, &[self.id], ops))
    }

    fn binary(self, other: Var<'g, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<(Tensor<T>, Op<T>, u64)>) -> Result<Var<'g, T>> {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
        let (value, op, ops) = f(&self.value_ref(), &other.value_ref())?;
        Ok(self.graph.record(value, op, &[self.id, other.id], ops))
    }

    fn numel_ops(t: &Tensor<T>) -> u64 {
        t.len() as u64
    }

    pub fn conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, geom: ConvGeometry) -> Result<Var<'g, T>> {
        self.convolve(w, bias, geom, false)
    }

    pub fn depthwise_conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, geom: ConvGeometry) -> Result<Var<'g, T>> {
        self.convolve(w, bias, geom, true)
    }

    fn convolve(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, geom: ConvGeometry, depthwise: bool) -> Result<Var<'g, T>> {
        let (value, macs) = {
            let x = self.value_ref();
            let wv = w.value_ref();
            let b = bias.map(|b| b.value_ref());
            let ws = wv.shape();
            let y = if depthwise {
                kernels::depthwise_conv2d(&x, &wv, b.as_deref(), geom)?
            } else {
                kernels::conv2d(&x, &wv, b.as_deref(), geom)?
            };
            let macs = (y.len() * ws.c * ws.h * ws.w) as u64;
            (y, macs)
        };
        let has_bias = bias.is_some();
        let op = if depthwise {
            Op::Depthwise { geom, has_bias }
        } else {
            Op::Conv2d { geom, has_bias }
        };
        let mut inputs = vec![self.id, w.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.graph.record(value, op, &inputs, macs))
    }

    pub fn maxpool2x2(self) -> Result<Var<'g, T>> {
        self.unary(|x| {
            let (y, argmax) = kernels::maxpool2x2(x)?;
            self.graph.note_branches(argmax.iter().map(|&i| i as u64));
            let n = Self::numel_ops(&y);
            Ok((y, Op::MaxPool { argmax }, n))
        })
    }

    /// Bilinear 2× upsampling with half-pixel centres.
    pub fn upsample2x(self) -> Var<'g, T> {
        self.unary(|x| {
            let s = x.shape();
            let y = kernels::resize_bilinear(x, 2 * s.h, 2 * s.w);
            let n = Self::numel_ops(&y);
            Ok((y, Op::Upsample2x, n))
        })
        .expect("upsampling is infallible")
    }

    /// Batch normalization; in train mode also returns the batch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var<'g, T>, Option<BnStats>)> {
        let (value, saved, stats) = {
            let x = self.value_ref();
            kernels::batchnorm(&x, &gamma.value_ref(), &beta.value_ref(), running_mean, running_var, mode, eps)?
        };
        let n = Self::numel_ops(&value);
        let var = self.graph.record(value, Op::BatchNorm { saved }, &[self.id, gamma.id, beta.id], n);
        Ok((var, stats))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| {
            let y = kernels::relu(x);
            self.graph
                .note_branches(x.data().chunks(64).map(|c| c.iter().fold(0u64, |m, &v| (m << 1) | u64::from(v > T::zero()))));
            let n = Self::numel_ops(&y);
            Ok((y, Op::Relu, n))
        })
        .expect("relu is infallible")
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(|x| {
            let y = kernels::sigmoid(x);
            let n = Self::numel_ops(&y);
            Ok((y, Op::Sigmoid, n))
        })
        .expect("sigmoid is infallible")
    }

    /// Softmax across `groups` equal channel blocks (see [`kernels::softmax_groups`]).
    pub fn softmax_groups(self, groups: usize) -> Result<Var<'g, T>> {
        self.unary(|x| {
            let y = kernels::softmax_groups(x, groups)?;
            let n = Self::numel_ops(&y);
            Ok((y, Op::SoftmaxGroups { groups }, n))
        })
    }

    pub fn global_avg_pool(self) -> Var<'g, T> {
        self.unary(|x| Ok((kernels::global_avg_pool(x), Op::GlobalAvgPool, Self::numel_ops(x))))
            .expect("pooling is infallible")
    }

    /// Stacks `self` then `other` along the channel axis.
    pub fn concat_channels(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| Ok((kernels::concat_channels(a, b)?, Op::Concat { split: a.shape().c }, 0)))
    }

    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        self.unary(|x| Ok((kernels::narrow_channels(x, start, len)?, Op::Narrow { start }, 0)))
    }

    /// Splits the channel axis into `pieces` equal parts.
    pub fn split_channels(self, pieces: usize) -> Result<Vec<Var<'g, T>>> {
        let c = self.shape().c;
        if pieces == 0 || !c.is_multiple_of(pieces) {
            return Err(Error::invalid(
                "split_channels",
                format!("channel extent {c} is not divisible into {pieces} pieces"),
            ));
        }
        let len = c / pieces;
        (0..pieces).map(|i| self.narrow_channels(i * len, len)).collect()
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| {
            let y = kernels::add(a, b)?;
            let n = Self::numel_ops(&y);
            Ok((y, Op::Add, n))
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| {
            let y = kernels::mul(a, b)?;
            let n = Self::numel_ops(&y);
            Ok((y, Op::Mul, n))
        })
    }

    /// Multiplies every channel plane by the matching entry of a N×C×1×1 tensor.
    pub fn scale_channels(self, scale: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(scale, |x, s| {
            let y = kernels::scale_channels(x, s)?;
            let n = Self::numel_ops(&y);
            Ok((y, Op::ScaleChannels, n))
        })
    }

    /// Sum of all elements as a 1×1×1×1 value.
    pub fn sum(self) -> Var<'g, T> {
        self.unary(|x| Ok((Tensor::scalar(T::from_f64_lossy(x.sum_f64())), Op::Sum, 0)))
            .expect("sum is infallible")
    }

    /// `sum(self ⊙ weights)` for a constant weight tensor.
    pub fn weighted_sum(self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let w = self.graph.constant(weights.clone());
        Ok(self.mul(w)?.sum())
    }

    /// Soft Dice loss of probabilities against a constant one-hot target.
    pub fn dice_loss(self, target: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
        self.unary(|p| {
            let loss = kernels::dice_loss(p, target, smooth)?;
            Ok((
                Tensor::scalar(T::from_f64_lossy(loss)),
                Op::Dice {
                    target: target.clone(),
                    smooth,
                },
                0,
            ))
        })
    }
}
