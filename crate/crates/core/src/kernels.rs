//! Forward and backward kernels for every differentiable primitive.
//!
//! Kernels are pure functions over [`Tensor`]s. Reductions accumulate in
//! f64 regardless of the storage type and always run in a fixed order, so
//! results are bit-reproducible. The autograd layer in [`crate::autograd`]
//! records which kernel produced a value and replays the matching backward.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// `C = A·B + beta·C` on row-major f64 buffers with explicit strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Spatial output extents for an input plane and kernel.
    pub fn output_hw(&self, op: &'static str, input: Shape, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let ho = window_extent(input.h, kh, self.stride, self.padding)
            .ok_or_else(|| Error::shape(op, "height", kh, input.h + 2 * self.padding))?;
        let wo = window_extent(input.w, kw, self.stride, self.padding)
            .ok_or_else(|| Error::shape(op, "width", kw, input.w + 2 * self.padding))?;
        Ok((ho, wo))
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(op, "bias", channels, b.len()));
        }
    }
    Ok(())
}

/// Shape of a dense convolution's output; validates every operand.
pub fn conv2d_shape<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Shape> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.c != xs.c {
        return Err(Error::shape("conv2d", "in-channels", xs.c, ws.c));
    }
    check_bias("conv2d", bias, ws.n)?;
    let (ho, wo) = geom.output_hw("conv2d", xs, ws.h, ws.w)?;
    Ok(Shape::new(xs.n, ws.n, ho, wo))
}

/// Unfold one sample into a (Cin·Kh·Kw) × (Hout·Wout) patch matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, kh: usize, kw: usize, geom: ConvGeometry, out_hw: (usize, usize), cols: &mut [f64]) {
    let s = x.shape();
    let (ho, wo) = out_hw;
    let p = ho * wo;
    let mut plane = vec![0.0; s.plane()];
    for ci in 0..s.c {
        for (d, v) in plane.iter_mut().zip(x.plane(n, ci)) {
            *d = v.as_f64();
        }
        for a in 0..kh {
            let rows = tap_span(ho, s.h, a, geom);
            for b in 0..kw {
                let row = ((ci * kh + a) * kw + b) * p;
                let span = tap_span(wo, s.w, b, geom);
                let dst = &mut cols[row..row + p];
                dst[..rows.start * wo].fill(0.0);
                dst[rows.end * wo..].fill(0.0);
                for oh in rows.clone() {
                    let ih = oh * geom.stride + a - geom.padding;
                    let src = &plane[ih * s.w..(ih + 1) * s.w];
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    out[..span.start].fill(0.0);
                    out[span.end..].fill(0.0);
                    let first = span.start * geom.stride + b - geom.padding;
                    if geom.stride == 1 {
                        out[span.clone()].copy_from_slice(&src[first..first + span.len()]);
                    } else {
                        for (j, v) in out[span.clone()].iter_mut().enumerate() {
                            *v = src[first + j * geom.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto one sample's input gradient.
fn col2im(cols: &[f64], shape: Shape, kh: usize, kw: usize, geom: ConvGeometry, out_hw: (usize, usize), dx: &mut [f64]) {
    let (ho, wo) = out_hw;
    let p = ho * wo;
    for ci in 0..shape.c {
        let plane = &mut dx[ci * shape.plane()..(ci + 1) * shape.plane()];
        for a in 0..kh {
            for b in 0..kw {
                let row = ((ci * kh + a) * kw + b) * p;
                for oh in 0..ho {
                    let ih = (oh * geom.stride + a) as isize - geom.padding as isize;
                    if ih < 0 || ih >= shape.h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geom.stride + b) as isize - geom.padding as isize;
                        if iw >= 0 && iw < shape.w as isize {
                            plane[ih as usize * shape.w + iw as usize] += cols[row + oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D cross-correlation over a zero-padded input.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let out_shape = conv2d_shape(x, w, bias, geom)?;
    let ws = w.shape();
    let (cout, kdim, p) = (ws.n, ws.c * ws.h * ws.w, out_shape.plane());
    let wm = to_f64(w.data());
    let mut cols = vec![0.0; kdim * p];
    let mut acc = vec![0.0; cout * p];
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..out_shape.n {
        im2col(x, n, ws.h, ws.w, geom, (out_shape.h, out_shape.w), &mut cols);
        match bias {
            Some(b) => {
                for (co, row) in acc.chunks_mut(p).enumerate() {
                    row.fill(b.data()[co].as_f64());
                }
            }
            None => acc.fill(0.0),
        }
        gemm(cout, kdim, p, &wm, (kdim, 1), &cols, (p, 1), 1.0, &mut acc);
        out.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    let (cout, kdim, p) = (ws.n, ws.c * ws.h * ws.w, ys.plane());
    let wm = to_f64(w.data());
    let mut cols = vec![0.0; kdim * p];
    let mut dw = vec![0.0; cout * kdim];
    let mut db = vec![0.0; cout];
    let mut dx = if need[0] { vec![0.0; xs.numel()] } else { Vec::new() };
    let mut dcols = vec![0.0; if need[0] { kdim * p } else { 0 }];
    let sample_len = xs.c * xs.plane();
    for n in 0..ys.n {
        let dyn_ = to_f64(dy.sample(n));
        if need[2] && has_bias {
            for (co, row) in dyn_.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if need[1] {
            im2col(x, n, ws.h, ws.w, geom, (ys.h, ys.w), &mut cols);
            // dW += dY · colsᵀ
            gemm(cout, p, kdim, &dyn_, (p, 1), &cols, (1, p), 1.0, &mut dw);
        }
        if need[0] {
            // dcols = Wᵀ · dY
            gemm(kdim, cout, p, &wm, (1, kdim), &dyn_, (p, 1), 0.0, &mut dcols);
            col2im(&dcols, xs, ws.h, ws.w, geom, (ys.h, ys.w), &mut dx[n * sample_len..(n + 1) * sample_len]);
        }
    }
    let cast = |shape: Shape, v: Vec<f64>| Tensor::from_vec(shape, v.into_iter().map(T::from_f64_lossy).collect()).expect("gradient extents");
    ConvGrads {
        x: need[0].then(|| cast(xs, dx)),
        w: need[1].then(|| cast(ws, dw)),
        bias: (need[2] && has_bias).then(|| cast(Shape::new(1, cout, 1, 1), db)),
    }
}

/// Validated output shape of a depthwise convolution with a C×1×K×K kernel.
pub fn depthwise_shape<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Shape> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.n != xs.c {
        return Err(Error::shape("depthwise_conv2d", "channels", xs.c, ws.n));
    }
    if ws.c != 1 {
        return Err(Error::shape("depthwise_conv2d", "in-channels", 1, ws.c));
    }
    check_bias("depthwise_conv2d", bias, xs.c)?;
    let (ho, wo) = geom.output_hw("depthwise_conv2d", xs, ws.h, ws.w)?;
    Ok(Shape::new(xs.n, xs.c, ho, wo))
}

/// Outputs `o` along one axis whose tap `a` lands inside the input, i.e.
/// `0 <= o·stride + a - padding < input`.
#[inline]
fn tap_span(out: usize, input: usize, a: usize, geom: ConvGeometry) -> std::ops::Range<usize> {
    let s = geom.stride;
    let start = geom.padding.saturating_sub(a).div_ceil(s).min(out);
    let end = if input + geom.padding <= a { 0 } else { (input + geom.padding - a).div_ceil(s).min(out) };
    start..end.max(start)
}

/// Per-channel convolution: output channel `c` reads only input channel `c`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let ys = depthwise_shape(x, w, bias, geom)?;
    let (xs, ws) = (x.shape(), w.shape());
    let st = geom.stride;
    let mut out = Vec::with_capacity(ys.numel());
    let mut acc = vec![0.0f64; ys.plane()];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let b = bias.map_or(0.0, |b| b.data()[c].as_f64());
            acc.fill(b);
            let plane = to_f64(x.plane(n, c));
            for a in 0..ws.h {
                let rows = tap_span(ys.h, xs.h, a, geom);
                for bw in 0..ws.w {
                    let k = w.at(c, 0, a, bw).as_f64();
                    let cols = tap_span(ys.w, xs.w, bw, geom);
                    for oh in rows.clone() {
                        let ih = oh * st + a - geom.padding;
                        let first = ih * xs.w + cols.start * st + bw - geom.padding;
                        let dst = &mut acc[oh * ys.w + cols.start..oh * ys.w + cols.end];
                        for (j, v) in dst.iter_mut().enumerate() {
                            *v += k * plane[first + j * st];
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    Tensor::from_vec(ys, out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    let st = geom.stride;
    let mut dx = vec![0.0f64; if need[0] { xs.numel() } else { 0 }];
    let mut dw = vec![0.0f64; ws.numel()];
    let mut db = vec![0.0f64; ws.n];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let g = to_f64(dy.plane(n, c));
            let plane = to_f64(x.plane(n, c));
            if has_bias {
                db[c] += g.iter().sum::<f64>();
            }
            let base = xs.offset(n, c, 0, 0);
            for a in 0..ws.h {
                let rows = tap_span(ys.h, xs.h, a, geom);
                for bw in 0..ws.w {
                    let k = w.at(c, 0, a, bw).as_f64();
                    let cols = tap_span(ys.w, xs.w, bw, geom);
                    let mut kacc = 0.0;
                    for oh in rows.clone() {
                        let ih = oh * st + a - geom.padding;
                        let first = ih * xs.w + cols.start * st + bw - geom.padding;
                        let grow = &g[oh * ys.w + cols.start..oh * ys.w + cols.end];
                        for (j, &gv) in grow.iter().enumerate() {
                            kacc += gv * plane[first + j * st];
                        }
                        if need[0] {
                            for (j, &gv) in grow.iter().enumerate() {
                                dx[base + first + j * st] += gv * k;
                            }
                        }
                    }
                    dw[(c * ws.h + a) * ws.w + bw] += kacc;
                }
            }
        }
    }
    let cast = |shape: Shape, v: Vec<f64>| Tensor::from_vec(shape, v.into_iter().map(T::from_f64_lossy).collect()).expect("gradient extents");
    ConvGrads {
        x: need[0].then(|| cast(xs, dx)),
        w: need[1].then(|| cast(ws, dw)),
        bias: (need[2] && has_bias).then(|| cast(Shape::new(1, ws.n, 1, 1), db)),
    }
}

/// 2×2 max pooling with stride 2. Returns the output and, for each output
/// element, the flat input index of its maximum (first in scan order on ties).
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) {
        return Err(Error::invalid("maxpool2d", format!("height {} is odd", s.h)));
    }
    if !s.w.is_multiple_of(2) {
        return Err(Error::invalid("maxpool2d", format!("width {} is odd", s.w)));
    }
    let ys = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(ys.numel());
    let mut argmax = Vec::with_capacity(ys.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oh in 0..ys.h {
                for ow in 0..ys.w {
                    let mut best = s.offset(n, c, 2 * oh, 2 * ow);
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.offset(n, c, 2 * oh + dh, 2 * ow + dw);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(ys, out)?, argmax))
}

pub fn maxpool2x2_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Linear interpolation taps `(lo, hi, frac)` for resampling `input` samples
/// onto `output` samples with half-pixel centres (align-corners = false).
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h × out_w`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (th, tw) = (linear_taps(s.h, out_h), linear_taps(s.w, out_w));
    let ys = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(ys.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for &(h0, h1, fy) in &th {
                for &(w0, w1, fx) in &tw {
                    let v = (1.0 - fy) * ((1.0 - fx) * p[h0 * s.w + w0].as_f64() + fx * p[h0 * s.w + w1].as_f64())
                        + fy * ((1.0 - fx) * p[h1 * s.w + w0].as_f64() + fx * p[h1 * s.w + w1].as_f64());
                    out.push(T::from_f64_lossy(v));
                }
            }
        }
    }
    Tensor::from_vec(ys, out).expect("resize extents")
}

/// Transpose of [`resize_bilinear`]: scatters output gradients onto the input grid.
pub fn resize_bilinear_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let ys = dy.shape();
    let (th, tw) = (linear_taps(input.h, ys.h), linear_taps(input.w, ys.w));
    let mut dx = vec![0.0f64; input.numel()];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let g = dy.plane(n, c);
            let base = input.offset(n, c, 0, 0);
            for (oh, &(h0, h1, fy)) in th.iter().enumerate() {
                for (ow, &(w0, w1, fx)) in tw.iter().enumerate() {
                    let gv = g[oh * ys.w + ow].as_f64();
                    dx[base + h0 * input.w + w0] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[base + h0 * input.w + w1] += gv * (1.0 - fy) * fx;
                    dx[base + h1 * input.w + w0] += gv * fy * (1.0 - fx);
                    dx[base + h1 * input.w + w1] += gv * fy * fx;
                }
            }
        }
    }
    Tensor::from_vec(input, dx.into_iter().map(T::from_f64_lossy).collect()).expect("resize extents")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values saved by the batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

/// Per-channel statistics of the batch, reported so the caller can update
/// its running state.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (N-divisor) variance used for normalization.
    pub var: Vec<f64>,
    /// Unbiased variance folded into the running estimate.
    pub var_unbiased: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>, Option<BnStats>)> {
    let s = x.shape();
    for (name, t) in [("gamma", gamma.len()), ("beta", beta.len()), ("running-mean", running_mean.len()), ("running-var", running_var.len())] {
        if t != s.c {
            return Err(Error::shape("batchnorm2d", name, s.c, t));
        }
    }
    let m = s.n * s.plane();
    if mode == BnMode::Train && m < 2 {
        return Err(Error::invalid(
            "batchnorm2d",
            format!("train mode needs at least 2 values per channel, got {m} (input {s})"),
        ));
    }
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let sum: f64 = (0..s.n).flat_map(|n| x.plane(n, c)).map(|v| v.as_f64()).sum();
                mean[c] = sum / m as f64;
                var[c] = (0..s.n)
                    .flat_map(|n| x.plane(n, c))
                    .map(|v| (v.as_f64() - mean[c]).powi(2))
                    .sum::<f64>()
                    / m as f64;
            }
            let var_unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
            let stats = BnStats {
                mean: mean.clone(),
                var: var.clone(),
                var_unbiased,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval => (to_f64(running_mean), to_f64(running_var), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
            let src = x.plane(n, c);
            let start = s.offset(n, c, 0, 0);
            for (i, v) in src.iter().enumerate() {
                let h = (v.as_f64() - mean[c]) * inv_std[c];
                xhat.data_mut()[start + i] = T::from_f64_lossy(h);
                y.data_mut()[start + i] = T::from_f64_lossy(g * h + b);
            }
        }
    }
    Ok((y, BnSaved { xhat, inv_std, mode }, stats))
}

/// Gradients `(dx, dgamma, dbeta)` of batch normalization.
pub fn batchnorm_backward<T: Scalar>(saved: &BnSaved<T>, gamma: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let m = (s.n * s.plane()) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (g, h) in dy.plane(n, c).iter().zip(saved.xhat.plane(n, c)) {
                dbeta[c] += g.as_f64();
                dgamma[c] += g.as_f64() * h.as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma.data()[c].as_f64() * saved.inv_std[c];
            let start = s.offset(n, c, 0, 0);
            for (i, (g, h)) in dy.plane(n, c).iter().zip(saved.xhat.plane(n, c)).enumerate() {
                let v = match saved.mode {
                    BnMode::Train => k / m * (m * g.as_f64() - dbeta[c] - h.as_f64() * dgamma[c]),
                    BnMode::Eval => k * g.as_f64(),
                };
                dx.data_mut()[start + i] = T::from_f64_lossy(v);
            }
        }
    }
    let cv = |v: Vec<f64>| Tensor::channel_vector(&v.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>());
    (dx, cv(dgamma), cv(dbeta))
}

/// Softmax across `groups` channel blocks: for every (n, c, h, w) with
/// `c < C / groups`, normalizes `x[n, g·(C/groups) + c, h, w]` over `g`.
pub fn softmax_groups<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if groups == 0 {
        return Err(Error::invalid("softmax_over_groups", "group count must be at least 1"));
    }
    if !s.c.is_multiple_of(groups) {
        return Err(Error::invalid(
            "softmax_over_groups",
            format!("channel extent {} is not divisible by {groups} groups", s.c),
        ));
    }
    let per = s.c / groups;
    let p = s.plane();
    let mut y = Tensor::zeros(s);
    let mut buf = vec![0.0f64; groups];
    for n in 0..s.n {
        for c in 0..per {
            for i in 0..p {
                let idx = |g: usize| s.offset(n, g * per + c, 0, 0) + i;
                let mut max = f64::NEG_INFINITY;
                for (g, b) in buf.iter_mut().enumerate() {
                    *b = x.data()[idx(g)].as_f64();
                    max = max.max(*b);
                }
                let mut total = 0.0;
                for b in buf.iter_mut() {
                    *b = (*b - max).exp();
                    total += *b;
                }
                for (g, b) in buf.iter().enumerate() {
                    y.data_mut()[idx(g)] = T::from_f64_lossy(b / total);
                }
            }
        }
    }
    Ok(y)
}

pub fn softmax_groups_backward<T: Scalar>(y: &Tensor<T>, groups: usize, dy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let per = s.c / groups;
    let p = s.plane();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..per {
            for i in 0..p {
                let idx = |g: usize| s.offset(n, g * per + c, 0, 0) + i;
                let dot: f64 = (0..groups).map(|g| y.data()[idx(g)].as_f64() * dy.data()[idx(g)].as_f64()).sum();
                for g in 0..groups {
                    let yi = y.data()[idx(g)].as_f64();
                    dx.data_mut()[idx(g)] = T::from_f64_lossy(yi * (dy.data()[idx(g)].as_f64() - dot));
                }
            }
        }
    }
    dx
}

/// Per-channel spatial mean, N×C×1×1.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out: Vec<T> = (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| {
            let sum: f64 = x.plane(n, c).iter().map(|v| v.as_f64()).sum();
            T::from_f64_lossy(sum / s.plane() as f64)
        })
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out).expect("pool extents")
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let k = 1.0 / input.plane() as f64;
    Tensor::from_fn(input, |n, c, _, _| T::from_f64_lossy(dy.at(n, c, 0, 0).as_f64() * k))
}

fn check_same(op: &'static str, a: Shape, b: Shape, skip_channels: bool) -> Result<()> {
    let axes = [("batch", a.n, b.n), ("channel", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)];
    for (axis, x, y) in axes {
        if skip_channels && axis == "channel" {
            continue;
        }
        if x != y {
            return Err(Error::shape(op, axis, x, y));
        }
    }
    Ok(())
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    check_same("concat_channels", sa, sb, true)?;
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = Vec::with_capacity(shape.numel());
    for n in 0..sa.n {
        out.extend_from_slice(a.sample(n));
        out.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(shape, out)
}

/// Channels `start..start + len` of every sample.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape("split_channels", "channel", s.c, start + len));
    }
    let shape = Shape::new(s.n, len, s.h, s.w);
    let p = s.plane();
    let mut out = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        let sample = x.sample(n);
        out.extend_from_slice(&sample[start * p..(start + len) * p]);
    }
    Tensor::from_vec(shape, out)
}

pub fn narrow_channels_backward<T: Scalar>(input: Shape, start: usize, dy: &Tensor<T>) -> Tensor<T> {
    let ys = dy.shape();
    let mut dx = Tensor::zeros(input);
    let p = input.plane();
    for n in 0..ys.n {
        let dst = input.offset(n, start, 0, 0);
        dx.data_mut()[dst..dst + ys.c * p].copy_from_slice(dy.sample(n));
    }
    dx
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("add", a.shape(), b.shape(), false)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("mul", a.shape(), b.shape(), false)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// `x[n, c, :, :] * s[n, c]` for a N×C×1×1 scale.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ss) = (x.shape(), scale.shape());
    check_same("scale_channels", Shape::new(xs.n, xs.c, 1, 1), ss, false)?;
    let mut y = x.clone();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let k = scale.at(n, c, 0, 0);
            y.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(y)
}

pub fn scale_channels_backward<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let dx = scale_channels(dy, scale).expect("matching extents");
    let ds = Tensor::from_fn(scale.shape(), |n, c, _, _| {
        let dot: f64 = dy.plane(n, c).iter().zip(x.plane(n, c)).map(|(g, v)| g.as_f64() * v.as_f64()).sum();
        T::from_f64_lossy(dot)
    });
    debug_assert_eq!(dx.shape(), xs);
    (dx, ds)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("matching extents")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64_lossy(1.0 / (1.0 + (-v.as_f64()).exp())))
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (T::one() - s)).collect();
    Tensor::from_vec(y.shape(), data).expect("matching extents")
}

/// Soft Dice loss averaged over samples and classes:
/// `mean_{n,k} 1 - (2·Σ p·t + smooth) / (Σ p + Σ t + smooth)`.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    check_same("dice_loss", probs.shape(), target.shape(), false)?;
    let s = probs.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for k in 0..s.c {
            let (inter, denom) = dice_terms(probs.plane(n, k), target.plane(n, k), smooth);
            total += 1.0 - (2.0 * inter + smooth) / denom;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

fn dice_terms<T: Scalar>(p: &[T], t: &[T], smooth: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sum = smooth;
    for (a, b) in p.iter().zip(t) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sum += a + b;
    }
    (inter, sum)
}

pub fn dice_loss_backward<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64, dloss: f64) -> Tensor<T> {
    let s = probs.shape();
    let k = dloss / (s.n * s.c) as f64;
    let mut dp = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let t = target.plane(n, c);
            let (inter, denom) = dice_terms(probs.plane(n, c), t, smooth);
            let numer = 2.0 * inter + smooth;
            let start = s.offset(n, c, 0, 0);
            for (i, tv) in t.iter().enumerate() {
                let g = -(2.0 * tv.as_f64() * denom - numer) / (denom * denom);
                dp.data_mut()[start + i] = T::from_f64_lossy(k * g);
            }
        }
    }
    dp
}
