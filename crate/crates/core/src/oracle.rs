//! Slow reference implementations used to cross-check the fast kernels.
//!
//! Nothing here shares code with [`crate::kernels`]; every routine is the
//! direct definition written out as plain loops. The self-test command and
//! the test suites compare the two paths.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Direct-summation cross-correlation over a zero-padded input.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Tensor<T> {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = (xs.h + 2 * padding - ws.h) / stride + 1;
    let wo = (xs.w + 2 * padding - ws.w) / stride + 1;
    let ys = Shape::new(xs.n, ws.n, ho, wo);
    let mut y = Tensor::zeros(ys);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co].as_f64());
                    for ci in 0..xs.c {
                        for kh in 0..ws.h {
                            for kw in 0..ws.w {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < xs.h && (iw as usize) < xs.w {
                                    acc += x.at(n, ci, ih as usize, iw as usize).as_f64() * w.at(co, ci, kh, kw).as_f64();
                                }
                            }
                        }
                    }
                    y.set(n, co, oh, ow, T::from_f64_lossy(acc));
                }
            }
        }
    }
    y
}

/// Depthwise convolution as one single-channel convolution per slice.
pub fn depthwise_by_slices<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let mut planes = Vec::new();
    let mut out_shape = None;
    for c in 0..xs.c {
        let xc = Tensor::from_fn(Shape::new(xs.n, 1, xs.h, xs.w), |n, _, h, ww| x.at(n, c, h, ww));
        let wc = Tensor::from_fn(Shape::new(1, 1, ws.h, ws.w), |_, _, h, ww| w.at(c, 0, h, ww));
        let bc = bias.map(|b| Tensor::scalar(b.data()[c]));
        let yc = conv2d(&xc, &wc, bc.as_ref(), stride, padding);
        out_shape = Some(yc.shape());
        planes.push(yc);
    }
    let ps = out_shape.expect("at least one channel");
    Tensor::from_fn(Shape::new(xs.n, xs.c, ps.h, ps.w), |n, c, h, ww| planes[c].at(n, 0, h, ww))
}

/// 2×2/stride-2 window maxima by scanning each window.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, h, w| {
        let window = [
            x.at(n, c, 2 * h, 2 * w),
            x.at(n, c, 2 * h, 2 * w + 1),
            x.at(n, c, 2 * h + 1, 2 * w),
            x.at(n, c, 2 * h + 1, 2 * w + 1),
        ];
        window.into_iter().fold(T::neg_infinity(), |m, v| if v > m { v } else { m })
    })
}

/// Bilinear sample of one output pixel, half-pixel centres, edge clamping.
pub fn bilinear_pixel<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, oh: usize, ow: usize, out_h: usize, out_w: usize) -> f64 {
    let s = x.shape();
    let coord = |o: usize, input: usize, output: usize| -> (usize, usize, f64) {
        let mut src = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
        if src < 0.0 {
            src = 0.0;
        }
        let mut i0 = src as usize;
        if i0 > input - 1 {
            i0 = input - 1;
        }
        let i1 = if i0 + 1 < input { i0 + 1 } else { input - 1 };
        (i0, i1, src - i0 as f64)
    };
    let (y0, y1, fy) = coord(oh, s.h, out_h);
    let (x0, x1, fx) = coord(ow, s.w, out_w);
    let v = |h: usize, w: usize| x.at(n, c, h, w).as_f64();
    let top = v(y0, x0) + fx * (v(y0, x1) - v(y0, x0));
    let bottom = v(y1, x0) + fx * (v(y1, x1) - v(y1, x0));
    top + fy * (bottom - top)
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, h, w| {
        T::from_f64_lossy(bilinear_pixel(x, n, c, h, w, out_h, out_w))
    })
}

/// Spatial mean per channel by plain summation.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut sum = 0.0;
        for h in 0..s.h {
            for w in 0..s.w {
                sum += x.at(n, c, h, w).as_f64();
            }
        }
        T::from_f64_lossy(sum / (s.h * s.w) as f64)
    })
}

/// Per-class (tp, fp, fn, tn) by visiting every pixel once per class.
pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Vec<[u64; 4]> {
    (0..classes)
        .map(|k| {
            let k = k as u8;
            let mut counts = [0u64; 4];
            for (&p, &g) in pred.iter().zip(gt) {
                let idx = match (p == k, g == k) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                counts[idx] += 1;
            }
            counts
        })
        .collect()
}

/// Five scores `(accuracy, precision, recall, f1, miou)` from per-pixel
/// comparisons: intersection and union as set sizes, 0/0 read as 1.
pub fn scores(pred: &[u8], gt: &[u8], classes: usize) -> [f64; 5] {
    let total = pred.len() as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let mut ious = Vec::new();
    let mut stats = Vec::new();
    for k in 0..classes as u8 {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == k && g == k).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == k || g == k).count();
        let p_size = pred.iter().filter(|&&p| p == k).count();
        let g_size = gt.iter().filter(|&&g| g == k).count();
        let agree = pred.iter().zip(gt).filter(|(&p, &g)| (p == k) == (g == k)).count();
        ious.push(ratio(inter, union));
        let precision = if p_size == 0 && g_size > 0 { 0.0 } else { ratio(inter, p_size) };
        let recall = if g_size == 0 && p_size > 0 { 0.0 } else { ratio(inter, g_size) };
        let f1 = if p_size + g_size == 0 { 1.0 } else { 2.0 * inter as f64 / (p_size + g_size) as f64 };
        stats.push([agree as f64 / total, precision, recall, f1]);
    }
    let fg: Vec<&[f64; 4]> = if classes == 2 { vec![&stats[1]] } else { stats.iter().skip(1).collect() };
    let mean = |i: usize| fg.iter().map(|s| s[i]).sum::<f64>() / fg.len() as f64;
    [
        mean(0),
        mean(1),
        mean(2),
        mean(3),
        ious.iter().sum::<f64>() / ious.len() as f64,
    ]
}
