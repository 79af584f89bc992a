//! Adam, plateau learning-rate reduction, the epoch loop and evaluation.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{augment, batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, dice_loss, score_masks, scored_classes, ImageScores, MetricsReport, Scores, DICE_SMOOTH};
use crate::model::{predict_mask, DcsauNet};
use crate::nn::{Ctx, Module};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-4;

struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First and second moments of every trainable parameter, in visit order.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new<T: Scalar>(module: &impl Module<T>, lr: f64) -> Self {
        let mut moments = Vec::new();
        module.visit(&mut |p| {
            if p.trainable() {
                moments.push(Moments {
                    name: p.name().to_owned(),
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                });
            }
        });
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Moment buffers of the named parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.iter().find(|m| m.name == name).map(|m| (&m.m[..], &m.v[..]))
    }

    /// One bias-corrected update from the gradients held by `module`.
    ///
    /// A non-finite gradient rejects the whole step before anything
    /// changes; the error names the parameter.
    pub fn step<T: Scalar>(&mut self, module: &mut impl Module<T>) -> Result<()> {
        let mut index = 0;
        let mut res = Ok(());
        module.visit(&mut |p| {
            if !p.trainable() || res.is_err() {
                return;
            }
            res = match self.moments.get(index) {
                Some(m) if m.name == p.name() && m.m.len() == p.numel() => {
                    if p.grad.is_finite() {
                        Ok(())
                    } else {
                        Err(Error::NonFiniteGradient(p.name().to_owned()))
                    }
                }
                _ => Err(Error::invalid("adam_step", format!("optimizer state does not match parameter `{}`", p.name()))),
            };
            index += 1;
        });
        res?;
        if index != self.moments.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("optimizer tracks {} parameters, module has {index}", self.moments.len()),
            ));
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let mut moments = self.moments.iter_mut();
        module.visit_mut(&mut |p| {
            if !p.trainable() {
                return;
            }
            let st = moments.next().expect("checked above");
            let grad = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                let g = g.as_f64();
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let (mh, vh) = (st.m[i] / c1, st.v[i] / c2);
                *w = T::from_f64_lossy(w.as_f64() - lr * mh / (vh.sqrt() + eps));
            }
        });
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Non-improving epochs tolerated before a reduction.
    pub patience: usize,
    pub min_lr: f64,
    /// Required decrease for an epoch to count as improving.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 10,
            min_lr: 1e-7,
            threshold: 1e-6,
        }
    }
}

/// Multiplies the learning rate by `factor` once validation loss has
/// stalled for more than `patience` epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    lr: f64,
    best: f64,
    stalled: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: PlateauConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.config.threshold {
            self.best = loss;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr).min(self.lr);
                self.stalled = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, mid-epoch if need be.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub scheduler: PlateauConfig,
    /// Sigmoid threshold for binary predictions.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            max_steps: None,
            batch_size: 4,
            lr: DEFAULT_LR,
            seed: 42,
            augment: None,
            scheduler: PlateauConfig::default(),
            threshold: crate::model::DEFAULT_THRESHOLD,
        }
    }
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Starts at 1.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Mean per-image validation scores.
    pub valid: ScoreMeans,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeans {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

impl From<&MetricsReport> for ScoreMeans {
    fn from(r: &MetricsReport) -> Self {
        ScoreMeans {
            accuracy: r.accuracy.mean,
            precision: r.precision.mean,
            recall: r.recall.mean,
            f1: r.f1.mean,
            miou: r.miou.mean,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// First logged step at which the mean validation F1 reached `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|r| r.valid.f1 >= target).map(|r| r.step)
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Batches of indices, reshuffled per epoch. A trailing batch of one joins
/// the batch before it, since train-mode batch statistics over the
/// attention vector need at least two samples.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn check_config(config: &TrainConfig, train: &[Sample], valid: &[Sample]) -> Result<()> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty sets, got {} training and {} validation samples",
            train.len(),
            valid.len()
        )));
    }
    if config.batch_size < 2 || config.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} must lie between 2 and the training set size {}",
            config.batch_size,
            train.len()
        )));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be positive", config.lr)));
    }
    Ok(())
}

/// Trains `model` in place.
///
/// With `out_dir`, writes `log.jsonl` (one record per epoch), `best.ckpt`
/// (initial weights, then replaced whenever validation loss improves) and
/// `final.ckpt`.
pub fn train<T: Scalar>(
    model: &mut DcsauNet<T>,
    train_set: &[Sample],
    valid_set: &[Sample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    check_config(config, train_set, valid_set)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join("best.ckpt"))?;
            Some(File::create(dir.join("log.jsonl"))?)
        }
        None => None,
    };
    let classes = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model, config.lr);
    let mut sched = PlateauScheduler::new(config.lr, config.scheduler);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=config.epochs {
        if config.max_steps.is_some_and(|m| log.step_losses.len() >= m) {
            break;
        }
        let start = Instant::now();
        let lr = adam.lr;
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for (b, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            if config.max_steps.is_some_and(|m| log.step_losses.len() >= m) {
                break;
            }
            let owned: Vec<Sample> = match &config.augment {
                Some(aug) => idx.iter().map(|&i| augment(&train_set[i], aug, rng.gen())).collect(),
                None => idx.iter().map(|&i| train_set[i].clone()).collect(),
            };
            let refs: Vec<&Sample> = owned.iter().collect();
            let (images, masks) = batch::<T>(&refs)?;
            let target = masks.one_hot::<T>(classes);

            let g = Graph::new();
            let ctx = Ctx::train(&g);
            let logits = model.forward(&ctx, g.constant(images))?;
            let loss = dice_loss(model.activate(logits)?, &target, DICE_SMOOTH)?;
            let value = loss.value().data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            g.backward(loss)?;
            model.zero_grads();
            model.pull_grads(&g)?;
            adam.step(model)?;
            epoch_losses.push(value);
            log.step_losses.push(value);
        }
        if epoch_losses.is_empty() {
            break 'epochs;
        }

        let (valid_loss, report) = assess(model, valid_set, config.threshold)?;
        if !valid_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        adam.lr = sched.step(valid_loss);
        if valid_loss < best {
            best = valid_loss;
            if let Some(dir) = out_dir {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        let record = EpochRecord {
            epoch,
            step: log.step_losses.len(),
            train_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            valid_loss,
            valid: ScoreMeans::from(&report),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        log.epochs.push(record);
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("final.ckpt"))?;
    }
    Ok(log)
}

/// Mean Dice loss and per-image scores in eval mode. Samples whose extents
/// the model cannot take are skipped and listed in the report.
pub fn assess<T: Scalar>(model: &mut DcsauNet<T>, samples: &[Sample], threshold: f64) -> Result<(f64, MetricsReport)> {
    let classes = model.config().num_classes;
    let mut images = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    let mut loss_sum = 0.0;
    for s in samples {
        let (h, w) = s.extent();
        if let Err(e) = model.config().check_input(3, h, w) {
            eprintln!("warning: skipping `{}`: {e}", s.id);
            skipped.push(s.id.clone());
            continue;
        }
        let (x, mask) = batch::<T>(&[s])?;
        let g = Graph::new();
        let ctx = Ctx::inference(&g);
        let logits = model.forward(&ctx, g.constant(x))?;
        let loss = dice_loss(model.activate(logits)?, &mask.one_hot::<T>(classes), DICE_SMOOTH)?;
        loss_sum += loss.value().data()[0].as_f64();
        let pred = predict_mask(&logits.value(), threshold);
        let scores: Scores = score_masks(&pred, &mask, scored_classes(classes))?[0];
        images.push(ImageScores {
            id: s.id.clone(),
            scores,
        });
    }
    if images.is_empty() {
        return Err(Error::Data(format!("none of the {} samples could be evaluated", samples.len())));
    }
    let loss = loss_sum / images.len() as f64;
    let mut report = aggregate(images)?;
    report.skipped = skipped;
    Ok((loss, report))
}

/// Eval-mode forward, thresholded masks and per-image scores.
pub fn evaluate<T: Scalar>(model: &mut DcsauNet<T>, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Ok(assess(model, samples, threshold)?.1)
}

/// First step `t >= start` at which the trailing `window`-step mean loss,
/// measured `window` steps later, has risen. `None` when the smoothed
/// curve never goes up.
pub fn smoothed_increase(losses: &[f64], start: usize, window: usize) -> Option<usize> {
    if window == 0 {
        return None;
    }
    let mut prefix = vec![0.0];
    for l in losses {
        prefix.push(prefix.last().unwrap() + l);
    }
    let mean = |t: usize| (prefix[t] - prefix[t - window]) / window as f64;
    (start.max(window)..=losses.len().saturating_sub(window)).find(|&t| mean(t + window) > mean(t))
}
