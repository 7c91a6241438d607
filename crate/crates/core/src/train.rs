//! Joint training of both streams and the head, plus evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClipFeatures;
use crate::metrics::{compute_metrics, MetricsReport, Prediction, ValueMode};
use crate::model::{EmoAudioNet, PAPER_WIDTH};
use crate::nn::{softmax_cross_entropy, Adam, ForwardCtx, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrReduce {
    pub factor: f64,
    /// Epochs without a lower training loss before the rate is cut.
    pub patience: usize,
    pub floor: f64,
}

impl Default for LrReduce {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a higher dev accuracy before training stops.
    pub early_stop_patience: usize,
    pub lr_reduce: LrReduce,
    pub seed: u64,
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 100,
            max_epochs: 500,
            early_stop_patience: 10,
            lr_reduce: LrReduce::default(),
            seed: 0,
            width: PAPER_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive")))
            }
        };
        positive(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate")?;
        positive(self.batch_size > 0, "batch_size")?;
        positive(self.max_epochs > 0, "max_epochs")?;
        positive(self.early_stop_patience > 0, "early_stop_patience")?;
        positive(self.lr_reduce.patience > 0, "lr_reduce.patience")?;
        positive(self.lr_reduce.floor > 0.0, "lr_reduce.floor")?;
        positive(self.width > 0, "width")?;
        if !(self.lr_reduce.factor > 0.0 && self.lr_reduce.factor < 1.0) {
            return Err(Error::Config("lr_reduce.factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub clip_id: String,
    pub features: ClipFeatures,
    pub label: usize,
    /// Original real-valued label, when there is one.
    pub raw_label: Option<f64>,
}

/// Network-ready form of an example.
#[derive(Debug, Clone)]
struct Prepared {
    spectro: Tensor,
    mfcc: Tensor,
    label: usize,
}

fn prepare(examples: &[LabeledExample], n_classes: usize) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            if e.label >= n_classes {
                return Err(Error::invalid(format!(
                    "clip {}: label {} out of range for {n_classes} classes",
                    e.clip_id, e.label
                )));
            }
            let (spectro, mfcc) = e.features.tensors()?;
            Ok(Prepared {
                spectro,
                mfcc,
                label: e.label,
            })
        })
        .collect()
}

/// Stops after `patience` epochs without a strictly higher monitored value.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a value; returns whether it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Multiplies the rate by `factor` after `patience` epochs without a strictly
/// lower loss, never going below `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrPlateau {
    cfg: LrReduce,
    best: Option<f64>,
    stale: usize,
}

impl LrPlateau {
    pub fn new(cfg: LrReduce) -> Self {
        Self {
            cfg,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.cfg.patience {
            self.stale = 0;
            (lr * self.cfg.factor).max(self.cfg.floor)
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean eval-mode cross-entropy on the training set after the epoch.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network from the epoch with the best dev accuracy.
    pub model: EmoAudioNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::io("<history>", std::io::Error::other(e));
    for r in history {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))
}

pub fn save_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(history, std::io::BufWriter::new(file))
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// One forward/backward over `batch` and one ADAM step on every parameter.
/// Gradients are averaged over the batch in example order. Returns the mean loss.
fn step_batch(net: &mut EmoAudioNet, batch: &[&Prepared], adam: &Adam, step_seed: u64) -> Result<f64> {
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let ctx = ForwardCtx::train(seed::derive(step_seed, &[i as u64]));
            net.backprop(&ex.spectro, &ex.mfcc, ex.label, &ctx)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut sums: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss;
        for (acc, g) in sums.iter_mut().zip(&r.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    for (p, mut g) in net.parameters_mut().into_iter().zip(sums) {
        g.iter_mut().for_each(|v| *v *= scale);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
        p.tensor.set_grad(g)?;
    }
    adam.step(net.parameters_mut())?;
    Ok(loss * scale)
}

/// A single optimizer step on the given examples, as the training loop does it.
pub fn train_step(net: &mut EmoAudioNet, batch: &[LabeledExample], learning_rate: f64, step_seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let prepared = prepare(batch, net.task().n_classes())?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    step_batch(net, &refs, &Adam::new(learning_rate), step_seed)
}

fn predict_prepared(net: &EmoAudioNet, examples: &[Prepared]) -> Result<Vec<Prediction>> {
    Ok(eval_pass(net, examples)?.0)
}

/// Eval-mode predictions plus mean cross-entropy against the labels.
fn eval_pass(net: &EmoAudioNet, examples: &[Prepared]) -> Result<(Vec<Prediction>, f64)> {
    let out: Vec<(Prediction, f64)> = examples
        .par_iter()
        .map(|ex| {
            let out = net.forward_tensors(&ex.spectro, &ex.mfcc, &ForwardCtx::eval())?;
            let loss = softmax_cross_entropy(&out.logits, ex.label)?.loss;
            let pred = Prediction {
                class: out.probs.predicted_class,
                probs: out.probs.probs,
            };
            Ok((pred, loss))
        })
        .collect::<Result<_>>()?;
    let loss = out.iter().map(|(_, l)| l).sum::<f64>() / examples.len().max(1) as f64;
    Ok((out.into_iter().map(|(p, _)| p).collect(), loss))
}

fn accuracy(preds: &[Prediction], examples: &[Prepared]) -> f64 {
    let hits = preds.iter().zip(examples).filter(|(p, e)| p.class == e.label).count();
    hits as f64 / examples.len() as f64
}

/// Eval-mode predictions, in input order.
pub fn predict(net: &EmoAudioNet, examples: &[LabeledExample]) -> Result<Vec<Prediction>> {
    predict_prepared(net, &prepare(examples, net.task().n_classes())?)
}

pub fn evaluate(net: &EmoAudioNet, examples: &[LabeledExample], mode: ValueMode) -> Result<MetricsReport> {
    let preds = predict(net, examples)?;
    let actual: Vec<usize> = examples.iter().map(|e| e.label).collect();
    compute_metrics(&preds, &actual, net.task(), mode)
}

/// Trains a freshly initialized network seeded from `config.seed`.
pub fn train_model(
    train: &[LabeledExample],
    dev: &[LabeledExample],
    task: crate::model::TaskKind,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let net = crate::model::build_model(task, config.width, config.seed)?;
    train_model_from(net, train, dev, config)
}

/// Trains an existing network (its architecture wins over `config.width`).
pub fn train_model_from(
    mut net: EmoAudioNet,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("training and dev splits must both be non-empty"));
    }
    let n_classes = net.task().n_classes();
    let dev_is_train = std::ptr::eq(train, dev);
    let train = prepare(train, n_classes)?;
    let dev = if dev_is_train { Vec::new() } else { prepare(dev, n_classes)? };

    let mut lr = config.learning_rate;
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut plateau = LrPlateau::new(config.lr_reduce);
    let mut history = Vec::new();
    let mut best = (net.clone(), 0usize, f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let epoch_seed = seed::derive(config.seed, &[epoch as u64]);
        order.shuffle(&mut seed::rng(epoch_seed));
        let adam = Adam::new(lr);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
            step_batch(&mut net, &batch, &adam, seed::derive(epoch_seed, &[b as u64]))
                .map_err(|e| with_context(e, epoch, b + 1))?;
        }
        // The monitored loss is measured without dropout after the epoch so
        // the plateau schedule does not react to dropout noise.
        let (train_preds, train_loss) = eval_pass(&net, &train)?;
        let dev_accuracy = if dev_is_train {
            accuracy(&train_preds, &train)
        } else {
            accuracy(&predict_prepared(&net, &dev)?, &dev)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_accuracy,
            lr,
        });
        if stopper.observe(dev_accuracy) {
            best = (net.clone(), epoch, dev_accuracy);
        }
        if stopper.should_stop() {
            break;
        }
        lr = plateau.observe(train_loss, lr);
    }
    let (model, best_epoch, best_dev_accuracy) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_dev_accuracy,
    })
}
