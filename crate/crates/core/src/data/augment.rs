use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::tensor::{Mask, Shape, Tensor};

/// Probability of each independent transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: f64,
    pub rotate: f64,
    pub cutout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: 0.25,
            rotate: 0.25,
            cutout: 0.25,
        }
    }
}

/// Transforms drawn for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    /// (top, left, side) of the zeroed square.
    pub cutout: Option<(usize, usize, usize)>,
}

impl Augmentation {
    /// Draws transforms for an `h×w` sample. Quarter and three-quarter
    /// turns are only drawn for square samples so extents never change.
    pub fn draw(config: &AugmentConfig, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(config.flip);
        let quarter_turns = if rng.gen_bool(config.rotate) {
            if h == w {
                rng.gen_range(1..=3)
            } else {
                2
            }
        } else {
            0
        };
        let cutout = rng.gen_bool(config.cutout).then(|| {
            let side = (h.min(w) / 4).max(1);
            (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side), side)
        });
        Augmentation {
            flip,
            quarter_turns,
            cutout,
        }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let mut image = sample.image.clone();
        let mut mask = sample.mask.clone();
        if self.flip {
            image = remap_image(&image, |y, x, _, w| (y, w - 1 - x), false);
            mask = remap_mask(&mask, |y, x, _, w| (y, w - 1 - x), false);
        }
        for _ in 0..self.quarter_turns {
            // Output (y, x) of a clockwise turn reads input (h' - 1 - x, y),
            // where h' is the input height (= output width).
            image = remap_image(&image, |y, x, _, w| (w - 1 - x, y), true);
            mask = remap_mask(&mask, |y, x, _, w| (w - 1 - x, y), true);
        }
        if let Some((top, left, side)) = self.cutout {
            let s = image.shape();
            for c in 0..s.c {
                for y in top..top + side {
                    for x in left..left + side {
                        image.set(0, c, y, x, 0.0);
                    }
                }
            }
        }
        Sample {
            image,
            mask,
            id: sample.id.clone(),
        }
    }
}

/// `src(y, x, out_h, out_w)` gives the input coordinate of output `(y, x)`.
fn remap_image(t: &Tensor<f32>, src: impl Fn(usize, usize, usize, usize) -> (usize, usize), transpose: bool) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = if transpose { (s.w, s.h) } else { (s.h, s.w) };
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        let (sy, sx) = src(y, x, h, w);
        t.at(n, c, sy, sx)
    })
}

fn remap_mask(m: &Mask, src: impl Fn(usize, usize, usize, usize) -> (usize, usize), transpose: bool) -> Mask {
    let s = m.shape();
    let (h, w) = if transpose { (s.w, s.h) } else { (s.h, s.w) };
    let mut out = Mask::new(s.n, h, w);
    for n in 0..s.n {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x, h, w);
                out.data_mut()[(n * h + y) * w + x] = m.data()[(n * s.h + sy) * s.w + sx];
            }
        }
    }
    out
}

/// Seeded horizontal flip, rotation and image-only cutout.
pub fn augment(sample: &Sample, config: &AugmentConfig, seed: u64) -> Sample {
    let (h, w) = sample.extent();
    Augmentation::draw(config, h, w, seed).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel(h: usize, w: usize) -> Sample {
        let mut mask = Mask::new(1, h, w);
        mask.data_mut()[0] = 1;
        let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| (c * 100 + y * w + x) as f32);
        Sample::new("p", image, mask).unwrap()
    }

    #[test]
    fn half_turn_moves_origin_to_far_corner() {
        let s = single_pixel(3, 5);
        let r = Augmentation {
            quarter_turns: 2,
            ..Default::default()
        }
        .apply(&s);
        assert_eq!(r.mask.data().iter().position(|&v| v == 1), Some(3 * 5 - 1));
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        // A clockwise turn takes the top-left pixel to the top-right.
        let s = single_pixel(4, 4);
        let r = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        }
        .apply(&s);
        assert_eq!(r.mask.data().iter().position(|&v| v == 1), Some(3));
        let full = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        };
        let back = (0..4).fold(s.clone(), |acc, _| full.apply(&acc));
        assert_eq!(back, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = single_pixel(3, 4);
        let f = Augmentation {
            flip: true,
            ..Default::default()
        };
        assert_ne!(f.apply(&s), s);
        assert_eq!(f.apply(&f.apply(&s)), s);
    }

    #[test]
    fn cutout_touches_image_only() {
        let s = single_pixel(8, 8);
        let c = Augmentation {
            cutout: Some((0, 0, 2)),
            ..Default::default()
        }
        .apply(&s);
        assert_eq!(c.mask, s.mask);
        assert_eq!(c.image.at(0, 1, 1, 1), 0.0);
        assert_eq!(c.image.at(0, 1, 2, 2), s.image.at(0, 1, 2, 2));
    }
}
