//! Dice loss and per-image segmentation scores aggregated as mean ± SD.
//!
//! Scores are computed per image from integer pixel counts. A class absent
//! from both prediction and ground truth scores 1.0; a class present in
//! exactly one of them scores 0.0. Precision, recall, F1 and accuracy
//! average over the foreground classes; mIoU averages over every class,
//! background included.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

/// Smoothing term of the Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// `1 - (2 Σ p·t + s) / (Σ p + Σ t + s)`, averaged over batch and classes.
pub fn dice_loss<'g, T: Scalar>(probs: Var<'g, T>, target: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    probs.dice_loss(target, smooth)
}

/// Number of classes scored for a model with `outputs` channels; a single
/// sigmoid channel is scored as background plus foreground.
pub fn scored_classes(outputs: usize) -> usize {
    outputs.max(2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

/// Per-class pixel counts of `pred` against `gt`.
pub fn confusion(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "confusion",
            format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
        ));
    }
    let k = num_classes;
    let mut matrix = vec![0u64; k * k];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            let (which, v) = if p >= k { ("prediction", p) } else { ("ground truth", g) };
            return Err(Error::invalid(
                "confusion",
                format!("{which} label {v} at pixel {i} is outside 0..{k}"),
            ));
        }
        matrix[g * k + p] += 1;
    }
    let total = pred.len() as u64;
    let classes = (0..k)
        .map(|c| {
            let tp = matrix[c * k + c];
            let predicted: u64 = (0..k).map(|g| matrix[g * k + c]).sum();
            let actual: u64 = matrix[c * k..(c + 1) * k].iter().sum();
            ClassCounts {
                tp,
                fp: predicted - tp,
                fn_: actual - tp,
                tn: total + tp - predicted - actual,
            }
        })
        .collect();
    Ok(ConfusionCounts { classes })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

impl Scores {
    pub const NAMES: [&'static str; 5] = ["Accuracy", "Precision", "Recall", "F1", "mIoU"];

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.miou]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Scores {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            miou: v[4],
        }
    }
}

/// `num / den`, with 0/0 read as agreement on an empty class.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(counts: &ConfusionCounts) -> Scores {
    let iou = |c: &ClassCounts| ratio(c.tp, c.tp + c.fp + c.fn_);
    let k = counts.classes.len();
    let miou = counts.classes.iter().map(iou).sum::<f64>() / k.max(1) as f64;
    let foreground = if k > 1 { &counts.classes[1..] } else { &counts.classes[..] };
    let mut sums = [0.0; 4];
    for c in foreground {
        let accuracy = ratio(c.tp + c.tn, c.total());
        let (predicted, actual) = (c.tp + c.fp, c.tp + c.fn_);
        let precision = if predicted == 0 && actual > 0 { 0.0 } else { ratio(c.tp, predicted) };
        let recall = if actual == 0 && predicted > 0 { 0.0 } else { ratio(c.tp, actual) };
        let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        for (s, v) in sums.iter_mut().zip([accuracy, precision, recall, f1]) {
            *s += v;
        }
    }
    let n = foreground.len().max(1) as f64;
    Scores::from_values([sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, miou])
}

/// Scores of every image in a batch of label maps.
pub fn score_masks(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<Vec<Scores>> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(
            "score_masks",
            format!("prediction shape {} differs from ground truth {}", pred.shape(), gt.shape()),
        ));
    }
    (0..pred.shape().n)
        .map(|n| Ok(metrics_from_counts(&confusion(pred.sample(n), gt.sample(n), num_classes)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScores {
    pub id: String,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: Vec<ImageScores>,
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub miou: Stat,
    /// Ids of samples that could not be scored.
    pub skipped: Vec<String>,
}

pub fn aggregate(images: Vec<ImageScores>) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::invalid("aggregate", "no images to aggregate"));
    }
    let column = |i: usize| Stat::of(&images.iter().map(|s| s.scores.values()[i]).collect::<Vec<_>>());
    Ok(MetricsReport {
        accuracy: column(0),
        precision: column(1),
        recall: column(2),
        f1: column(3),
        miou: column(4),
        images,
        skipped: Vec::new(),
    })
}

impl MetricsReport {
    pub fn stats(&self) -> [Stat; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.miou]
    }

    /// Header plus one row of `mean±sd` cells.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for name in Scores::NAMES {
            write!(out, "{name:>13}").unwrap();
        }
        out.push('\n');
        for s in self.stats() {
            write!(out, "{:>13}", s.to_string()).unwrap();
        }
        out.push('\n');
        writeln!(out, "images: {}", self.images.len()).unwrap();
        if !self.skipped.is_empty() {
            writeln!(out, "skipped: {} ({})", self.skipped.len(), self.skipped.join(", ")).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(rows: &[usize]) -> Vec<u8> {
        (0..16).map(|i| u8::from(rows.contains(&(i / 4)))).collect()
    }

    #[test]
    fn shifted_rows_example() {
        let c = confusion(&rows(&[0, 1]), &rows(&[1, 2]), 2).unwrap();
        assert_eq!(c.classes[1], ClassCounts { tp: 4, fp: 4, fn_: 4, tn: 4 });
        let s = metrics_from_counts(&c);
        assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.5));
        assert!((s.miou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_follow_convention() {
        let c = confusion(&[0; 16], &[0; 16], 2).unwrap();
        assert_eq!(c.classes[1].tp, 0);
        assert_eq!(c.classes[1].tn, 16);
        let s = metrics_from_counts(&c);
        assert_eq!(s.values(), [1.0; 5]);
        let miss = metrics_from_counts(&confusion(&[0; 4], &[0, 1, 0, 0], 2).unwrap());
        assert_eq!((miss.precision, miss.recall, miss.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let err = confusion(&[0, 3], &[0, 1], 2).unwrap_err();
        assert!(err.to_string().contains("label 3 at pixel 1"), "{err}");
    }

    #[test]
    fn aggregation_format() {
        let img = |v: f64| ImageScores {
            id: String::new(),
            scores: Scores::from_values([v; 5]),
        };
        assert_eq!(aggregate(vec![img(0.8)]).unwrap().f1.to_string(), "0.800±0.000");
        assert_eq!(aggregate(vec![img(0.0), img(1.0)]).unwrap().f1.to_string(), "0.500±0.500");
        let r = aggregate(vec![img(0.2), img(0.4), img(0.6)]).unwrap();
        assert!((r.f1.mean - 0.4).abs() < 1e-12);
        assert!((r.f1.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(aggregate(Vec::new()).is_err());
    }
}
