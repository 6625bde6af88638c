//! Mini-batch training with a held-out validation slice and early stopping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use super::adam::{Adam, AdamConfig};
use super::model::{argmax_rows, Model};
use super::spec::ModelSpec;
use super::streams;
use crate::archive::write_atomic;
use crate::dataset::{FoldPlan, SampleRecord};
use crate::error::{Error, Result};
use crate::preprocess::FloatImage;
use crate::tensor::{scce_loss, Mode, Real, RngState, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Custom CNN: lr 1e-3, batch 16, 30 epochs.
    pub fn custom_cnn() -> Self {
        TrainConfig {
            adam: AdamConfig::with_lr(1e-3),
            batch_size: 16,
            epochs: 30,
            validation_fraction: 0.1,
            patience: 5,
            seed: 42,
        }
    }

    /// Fine-tuning a backbone: lr 1e-4, batch 8, 30 epochs.
    pub fn pretrained() -> Self {
        TrainConfig {
            adam: AdamConfig::with_lr(1e-4),
            batch_size: 8,
            ..Self::custom_cnn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept; 0 if none improved.
    pub best_epoch: usize,
    /// Set when early stopping ended the run.
    pub stopped_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            )
            .expect("string write");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Monitors validation loss; a strictly lower value is an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        (self.best_epoch > 0).then_some((self.best_epoch, self.best))
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Wait
        }
    }
}

/// Stacks `H x W` images into an `N x H x W x channels` batch, replicating
/// the gray value across channels.
pub fn stack_images<T: Real>(images: &[&FloatImage], channels: usize) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Validation("no images to stack".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h * channels);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::shape("stack_images", "image size", format!("{w}x{h}"), format!("{}x{}", img.width(), img.height())));
        }
        for &p in img.pixels() {
            let v = T::lit(p as f64);
            data.extend(std::iter::repeat(v).take(channels));
        }
    }
    Tensor::new(vec![images.len(), h, w, channels], data)
}

fn gather_rows<T: Real>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let per = x.numel() / x.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * per..(r + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Trains `model` on `(x, y)`. A seeded `validation_fraction` slice is held
/// out and monitored; the best-validation weights are restored at the end.
pub fn fit<T: Real>(model: &mut Model<T>, x: &Tensor<T>, y: &[usize], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 || x.rank() == 0 || x.shape()[0] != n {
        return Err(Error::Validation(format!("training set is empty or mismatched ({n} labels)")));
    }
    if n < 2 {
        return Err(Error::Validation("training portion needs at least 2 samples for a validation split".into()));
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::derive(cfg.seed, streams::VAL_SPLIT));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let xv = gather_rows(x, val_idx)?;
    let yv: Vec<usize> = val_idx.iter().map(|&i| y[i]).collect();

    let mut shuffle_rng = RngState::derive(cfg.seed, streams::SHUFFLE);
    let mut dropout_rng = RngState::derive(cfg.seed, streams::DROPOUT);
    let mut opt = Adam::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = None;
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train_idx.chunks(cfg.batch_size) {
            let xb = gather_rows(x, batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let pass = model.forward(&xb, Mode::Train, &mut dropout_rng)?;
            let pred = argmax_rows(pass.output())?;
            correct += pred.iter().zip(&yb).filter(|(a, b)| a == b).count();
            let (loss, grads) = pass.backward_scce(&yb)?;
            if !loss.is_finite() {
                return Err(Error::Validation(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += loss.as_f64() * batch.len() as f64;
            opt.step(model.params_mut(), &grads)?;
        }
        let probs = model.infer(&xv)?;
        let val_loss = scce_loss(&probs, &yv)?.as_f64();
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_acc: accuracy(&argmax_rows(&probs)?, &yv),
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best_params = Some(model.params().to_vec()),
            StopDecision::Wait => {}
            StopDecision::Stop => {
                history.stopped_epoch = Some(epoch);
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params_mut().clone_from_slice(&best);
    }
    history.best_epoch = stopper.best().map_or(0, |(e, _)| e);
    model.mark_trained();
    Ok(history)
}

/// Trains `model` on every sample whose fold in `plan` differs from `fold`.
pub fn train_model<T: Real>(
    model: &mut Model<T>,
    samples: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if fold >= plan.k {
        return Err(Error::Param(format!("fold {fold} out of range for k={}", plan.k)));
    }
    let lookup = plan.lookup();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let f = *lookup
            .get(s.id.as_str())
            .ok_or_else(|| Error::Validation(format!("sample {} is not in the fold plan", s.id)))?;
        if f != fold {
            images.push(&s.image);
            labels.push(s.label.index());
        }
    }
    if images.is_empty() {
        return Err(Error::Validation(format!("fold {fold} leaves an empty training set")));
    }
    let x = stack_images(&images, model.spec().input_shape[2])?;
    fit(model, &x, &labels, cfg)
}

/// Builds a fresh model from `spec` (initialised from `cfg.seed`) and trains
/// it on the folds other than `fold`.
pub fn train(
    spec: &ModelSpec,
    samples: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let mut model = Model::new(spec.clone(), cfg.seed)?;
    let history = train_model(&mut model, samples, plan, fold, cfg)?;
    Ok((model, history))
}
