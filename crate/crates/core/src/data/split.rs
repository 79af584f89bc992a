use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train/validation fractions; the test set takes the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    /// Reproduces the 441/110/61 partition of 612 images.
    fn default() -> Self {
        SplitSpec {
            train: 0.7206,
            valid: 0.1797,
            test: 1.0 - 0.7206 - 0.1797,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} must lie in [0, 1] and sum to 1",
                parts
            )));
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes for `n` ids. Rounded sizes come first;
    /// an empty part then borrows one id from the largest part.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(Error::Data(format!("cannot split {n} ids into three non-empty parts")));
        }
        let train = ((self.train * n as f64).round() as usize).min(n);
        let valid = ((self.valid * n as f64).round() as usize).min(n - train);
        let mut parts = [train, valid, n - train - valid];
        for i in 0..3 {
            if parts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (parts[j], std::cmp::Reverse(j))).expect("three parts");
                parts[donor] -= 1;
                parts[i] += 1;
            }
        }
        Ok((parts[0], parts[1], parts[2]))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then contiguous train/valid/test runs.
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<Split> {
    let (a, b, _) = spec.sizes(ids.len())?;
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = order.split_off(a + b);
    let valid = order.split_off(a);
    Ok(Split { train: order, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_table_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(612).unwrap(), (441, 110, 61));
        assert_eq!(spec.sizes(670).unwrap(), (483, 120, 67));
    }

    #[test]
    fn tiny_sets_keep_every_part_non_empty() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(3).unwrap(), (1, 1, 1));
        for n in 3..40 {
            let (a, b, c) = spec.sizes(n).unwrap();
            assert!(a > 0 && b > 0 && c > 0 && a + b + c == n, "{n}");
        }
        assert!(spec.sizes(2).is_err());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let spec = SplitSpec {
            train: 0.8,
            valid: 0.3,
            test: 0.0,
            seed: 0,
        };
        assert!(spec.sizes(10).is_err());
    }
}
