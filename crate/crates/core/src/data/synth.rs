use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{netpbm, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape, Tensor};

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.35, 0.20],
    [0.25, 0.85, 0.35],
    [0.30, 0.40, 0.95],
    [0.95, 0.90, 0.30],
    [0.85, 0.30, 0.85],
    [0.30, 0.90, 0.90],
];

const MIN_FOREGROUND: f64 = 0.05;
const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Copy)]
enum Figure {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
}

impl Figure {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Figure::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Figure::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let (cy, cx) = (rng.gen_range(0.2..0.8) * h as f64, rng.gen_range(0.2..0.8) * w as f64);
        let (ry, rx) = (rng.gen_range(0.12..0.3) * side, rng.gen_range(0.12..0.3) * side);
        if rng.gen_bool(0.5) {
            Figure::Ellipse { cy, cx, ry, rx }
        } else {
            Figure::Rect {
                top: cy - ry,
                left: cx - rx,
                bottom: cy + ry,
                right: cx + rx,
            }
        }
    }
}

fn rasterize(figures: &[(Figure, u8)], h: usize, w: usize) -> Mask {
    let mut mask = Mask::new(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for &(f, label) in figures {
                if f.contains(py, px) {
                    mask.data_mut()[y * w + x] = label;
                }
            }
        }
    }
    mask
}

fn foreground_fraction(mask: &Mask) -> f64 {
    mask.data().iter().filter(|&&v| v > 0).count() as f64 / mask.data().len() as f64
}

/// Seeded images of coloured ellipses and rectangles on a noisy background,
/// quantized to 8 bits so they survive a trip through PPM files.
///
/// `num_classes` counts the background; labels are drawn from
/// `1..num_classes`. Every mask covers between 5% and 60% of its image.
pub fn synth_dataset(n: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!("synthetic extent {h}x{w} must be a positive multiple of 16")));
    }
    if !(2..=PALETTE.len() + 1).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic data supports 2 to {} classes, got {num_classes}",
            PALETTE.len() + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut mask = None;
            for _ in 0..32 {
                let count = rng.gen_range(1..=3);
                let figures: Vec<(Figure, u8)> = (0..count)
                    .map(|_| (Figure::random(&mut rng, h, w), rng.gen_range(1..num_classes) as u8))
                    .collect();
                let m = rasterize(&figures, h, w);
                let f = foreground_fraction(&m);
                if f > MIN_FOREGROUND && f < MAX_FOREGROUND {
                    mask = Some(m);
                    break;
                }
            }
            let mask = mask.unwrap_or_else(|| {
                let centre = Figure::Rect {
                    top: h as f64 / 4.0,
                    left: w as f64 / 4.0,
                    bottom: 3.0 * h as f64 / 4.0,
                    right: 3.0 * w as f64 / 4.0,
                };
                rasterize(&[(centre, 1)], h, w)
            });
            let background: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.4));
            let noise: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
                let label = mask.data()[y * w + x] as usize;
                let base = if label == 0 { background[c] } else { PALETTE[label - 1][c] };
                f32::from(netpbm::quantize(base + noise[(c * h + y) * w + x])) / 255.0
            });
            Sample::new(format!("synth_{i:04}"), image, mask)
        })
        .collect()
}
