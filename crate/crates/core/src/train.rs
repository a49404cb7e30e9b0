//! Seeded mini-batch training with best-dev checkpoint retention.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::model::{Head, SleepNet};
use crate::nn::{mse_loss, softmax_crossentropy, Adam, AdamConfig, Mode, Tensor};
use crate::rng::{derive_seed, indexed_rng, seeded};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Written every time the dev loss improves.
    pub checkpoint: Option<PathBuf>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 8,
            lr: 0.001,
            seed: 0,
            checkpoint: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Wall-clock time; the only non-deterministic field.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 0-based index into `epochs` of the minimum dev loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn dev_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.dev_loss).collect()
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.dev_loss.to_bits() == b.dev_loss.to_bits()
            })
    }

    /// `epoch,train_loss,dev_loss,best`; wall-clock times are left out so
    /// identical runs write identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_loss,best\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let best = u8::from(i == self.best_epoch);
            let _ = writeln!(s, "{},{},{},{best}", e.epoch, e.train_loss, e.dev_loss);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Copies windows `indices` into a `[B × 1 × N]` batch.
pub fn assemble_batch(set: &WindowSet, indices: &[usize]) -> Tensor<f32> {
    let n = set.window_len();
    let mut data = vec![0.0f32; indices.len() * n];
    for (&i, row) in indices.iter().zip(data.chunks_exact_mut(n)) {
        set.fill(i, row);
    }
    Tensor::new(vec![indices.len(), 1, n], data).expect("batch shape")
}

fn class_targets(labels: &[f32], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            let r = l.round();
            if r >= 1.0 && (r as usize) <= classes {
                Ok(r as usize - 1)
            } else {
                Err(Error::Index(format!(
                    "label {l} is not a class in 1..={classes}"
                )))
            }
        })
        .collect()
}

/// Loss of `logits` against window labels, plus the gradient with respect to
/// the logits. Classification labels are 1-based class numbers.
pub fn loss_and_grad(head: Head, logits: &Tensor<f32>, labels: &[f32]) -> Result<(f64, Tensor<f32>)> {
    match head {
        Head::Regression => {
            let target = Tensor::new(vec![labels.len(), 1], labels.to_vec())?;
            mse_loss(logits, &target)
        }
        Head::Classification { classes } => {
            softmax_crossentropy(logits, &class_targets(labels, classes)?)
        }
    }
}

fn check_window_len(model: &SleepNet, set: &WindowSet, what: &str) -> Result<()> {
    let n = model.spec().input_len()?;
    if set.window_len() != n {
        return Err(Error::Config(format!(
            "{what} windows have {} samples, the model expects {n}",
            set.window_len()
        )));
    }
    Ok(())
}

/// Mean per-window loss in inference mode.
pub fn evaluate_loss(model: &SleepNet, windows: &WindowSet, batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty window set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    check_window_len(model, windows, "evaluation")?;
    let labels = windows.labels();
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0f64;
    for chunk in idx.chunks(batch_size) {
        let x = assemble_batch(windows, chunk);
        let logits = model.infer_logits(&x)?;
        let batch_labels: Vec<f32> = chunk.iter().map(|&i| labels[i]).collect();
        let (loss, _) = loss_and_grad(model.spec().head, &logits, &batch_labels)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Inference outputs for every window: one value per window for regression,
/// `K` class probabilities per window for classification.
pub fn predict_windows(model: &SleepNet, windows: &WindowSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    check_window_len(model, windows, "prediction")?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let k = model.spec().head.outputs();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let y = model.predict(&assemble_batch(windows, chunk))?;
        out.extend(y.data().chunks_exact(k).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn train(
    model: SleepNet,
    train_set: &WindowSet,
    dev_set: &WindowSet,
    cfg: &TrainConfig,
) -> Result<(SleepNet, TrainHistory)> {
    train_with_observer(model, train_set, dev_set, cfg, |_| {})
}

/// Runs `cfg.epochs` epochs and returns the model snapshot with the lowest
/// dev loss (not the last one). `observer` sees every finished epoch.
pub fn train_with_observer(
    mut model: SleepNet,
    train_set: &WindowSet,
    dev_set: &WindowSet,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(SleepNet, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training and dev sets must be non-empty".into()));
    }
    check_window_len(&model, train_set, "training")?;
    check_window_len(&model, dev_set, "dev")?;

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.params())?;
    let labels = train_set.labels();
    let head = model.spec().head;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, SleepNet)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut indexed_rng(cfg.seed, "shuffle", epoch as u64));
        }
        let mut total = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = assemble_batch(train_set, chunk);
            let batch_labels: Vec<f32> = chunk.iter().map(|&i| labels[i]).collect();
            let mut rng = seeded(derive_seed(
                cfg.seed,
                format!("dropout/{epoch}/{b}").as_bytes(),
            ));
            let logits = model.logits(&x, Mode::Train, &mut rng)?;
            let (loss, grad) = loss_and_grad(head, &logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            let grads = model.backward(&grad)?;
            adam.step(&mut model.params_mut(), &grads).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let dev_loss = evaluate_loss(&model, dev_set, cfg.batch_size)?;
        if !dev_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite dev loss at epoch {epoch}")));
        }

        if best.as_ref().map_or(true, |(l, _)| dev_loss < *l) {
            let mut snapshot = model.clone();
            snapshot.clear_caches();
            if let Some(path) = &cfg.checkpoint {
                snapshot.save(path)?;
            }
            history.best_epoch = epoch - 1;
            best = Some((dev_loss, snapshot));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.epochs.push(record);
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}
