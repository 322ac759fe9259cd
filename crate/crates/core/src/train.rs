//! Momentum SGD, the warmup/cosine learning-rate schedule and epoch loops.

use crate::data::{shuffled_order, Dataset};
use crate::error::{Error, Result};
use crate::exec::{backward, forward, infer, logits, logits_grad_to_output, ForwardOptions, LayerGrads, Phase};
use crate::graph::{LayerKind, ModelGraph};
use crate::tensor::{softmax_cross_entropy, Tensor};
use log::{debug, info};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write;

/// Linear warmup to `base_lr`, then `base_lr * (1 + cos((e - w) / period * π))`.
///
/// The second branch starts at twice the base rate, so the schedule jumps
/// at `e = warmup_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LRSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub period: f64,
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidParam(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidParam(format!("period must be > 0, got {}", self.period)));
        }
        Ok(())
    }

    pub fn lr_at(&self, e: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        if e < w {
            self.base_lr * e / w
        } else {
            self.base_lr * (1.0 + ((e - w) / self.period * PI).cos())
        }
    }
}

/// Which parameter of a layer a velocity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Weights,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<(String, Slot), Vec<f64>>,
    /// Number of steps taken.
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParam(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidParam(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptimizerState {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            iteration: 0,
        })
    }
}

/// `v <- momentum * v + g + decay * p`, then `p <- p - lr * v`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], momentum: f64, decay: f64, lr: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *p;
        *p -= lr * *v;
    }
}

fn update_slot(
    state: &mut OptimizerState,
    layer: &str,
    slot: Slot,
    params: &mut [f64],
    grads: &[f64],
    decay: f64,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "`{layer}` {slot:?}: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    let momentum = state.momentum;
    let v = state
        .velocity
        .entry((layer.to_string(), slot))
        .or_insert_with(|| vec![0.0; params.len()]);
    if v.len() != params.len() {
        return Err(Error::Shape(format!(
            "`{layer}` {slot:?}: velocity has {} entries, params {}",
            v.len(),
            params.len()
        )));
    }
    sgd_update(params, grads, v, momentum, decay, lr);
    Ok(())
}

/// One optimizer step. Weight decay applies to conv, depthwise and affine
/// weights only, never to biases or batch-norm parameters.
pub fn sgd_step(graph: &mut ModelGraph, grads: &[Option<LayerGrads>], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != graph.layers.len() {
        return Err(Error::Shape(format!(
            "{} layer grads for {} layers",
            grads.len(),
            graph.layers.len()
        )));
    }
    let wd = state.weight_decay;
    for (layer, g) in graph.layers.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        let name = layer.name.as_str();
        match (&mut layer.kind, g) {
            (LayerKind::Conv { params, .. }, LayerGrads::Weighted { weights, bias }) => {
                update_slot(state, name, Slot::Weights, params.weights.data_mut(), weights.data(), wd, lr)?;
                if let (Some(b), Some(gb)) = (&mut params.bias, bias) {
                    update_slot(state, name, Slot::Bias, b, gb, 0.0, lr)?;
                }
            }
            (LayerKind::DepthwiseConv { params, .. }, LayerGrads::Weighted { weights, bias }) => {
                update_slot(state, name, Slot::Weights, params.weights.data_mut(), weights.data(), wd, lr)?;
                if let (Some(b), Some(gb)) = (&mut params.bias, bias) {
                    update_slot(state, name, Slot::Bias, b, gb, 0.0, lr)?;
                }
            }
            (LayerKind::Affine { weights: w, bias: b }, LayerGrads::Weighted { weights, bias }) => {
                update_slot(state, name, Slot::Weights, w.data_mut(), weights.data(), wd, lr)?;
                if let Some(gb) = bias {
                    update_slot(state, name, Slot::Bias, b, gb, 0.0, lr)?;
                }
            }
            (LayerKind::BatchNorm(bn), LayerGrads::Bn { gamma, beta }) => {
                update_slot(state, name, Slot::Gamma, &mut bn.gamma, gamma, 0.0, lr)?;
                update_slot(state, name, Slot::Beta, &mut bn.beta, beta, 0.0, lr)?;
            }
            _ => return Err(Error::Graph(format!("gradient kind does not match layer `{name}`"))),
        }
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EarlyStopPolicy {
    FixedEpochs,
    /// Stop after the first epoch whose validation accuracy (percent) is at
    /// least `reference - threshold`.
    AccuracyDrop { threshold: f64, reference: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LRSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub stop: EarlyStopPolicy,
    /// Activation ranges are calibrated during the first `n` epochs only;
    /// `None` calibrates throughout.
    pub calibrate_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidParam(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if let EarlyStopPolicy::AccuracyDrop { threshold, .. } = self.stop {
            if !(threshold >= 0.0) {
                return Err(Error::InvalidParam(format!("drop threshold must be >= 0, got {threshold}")));
            }
        }
        OptimizerState::new(self.momentum, self.weight_decay).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,lr,train_loss,val_acc,test_acc\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            opt(m.val_acc),
            opt(m.test_acc)
        );
    }
    out
}

/// One forward/backward/update on a batch; returns the mean loss.
pub fn train_step(
    graph: &mut ModelGraph,
    x: &Tensor,
    labels: &[usize],
    state: &mut OptimizerState,
    lr: f64,
    calibrate: bool,
) -> Result<f64> {
    let opts = ForwardOptions {
        phase: Phase::Train,
        calibrate_activations: calibrate,
    };
    let trace = forward(graph, x, opts)?;
    let (loss, grad) = softmax_cross_entropy(&logits(trace.output())?, labels)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss {loss} at step {}", state.iteration)));
    }
    let grad = logits_grad_to_output(grad, trace.output().shape())?;
    let grads = backward(graph, &trace, &grad)?;
    sgd_step(graph, &grads.layers, state, lr)?;
    Ok(loss)
}

/// Trains for up to `cfg.epochs` epochs with a fresh optimizer.
///
/// The learning rate is evaluated at the fractional epoch of every step.
/// A trailing batch of one sample is dropped, since batch norm needs two.
pub fn train_epochs(
    graph: &mut ModelGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut outcome = TrainOutcome::default();
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    if matches!(cfg.stop, EarlyStopPolicy::AccuracyDrop { .. }) && val.is_none() {
        return Err(Error::Data("accuracy-drop stopping needs a non-empty validation set".into()));
    }
    let mut state = OptimizerState::new(cfg.momentum, cfg.weight_decay)?;
    let steps = train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(train.len(), cfg.seed.wrapping_add(epoch as u64));
        let calibrate = cfg.calibrate_epochs.is_none_or(|k| epoch < k);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in train.batches(&order, cfg.batch_size).enumerate() {
            let (x, y) = batch?;
            if y.len() < 2 {
                continue;
            }
            let lr = cfg.schedule.lr_at(epoch as f64 + b as f64 / steps as f64);
            let loss = train_step(graph, &x, &y, &mut state, lr, calibrate)?;
            loss_sum += loss * y.len() as f64;
            seen += y.len();
        }
        let m = EpochMetrics {
            epoch,
            lr: cfg.schedule.lr_at(epoch as f64),
            train_loss: loss_sum / seen.max(1) as f64,
            val_acc: val.map(|v| accuracy(graph, v, cfg.batch_size)).transpose()?,
            test_acc: test.filter(|t| !t.is_empty()).map(|t| accuracy(graph, t, cfg.batch_size)).transpose()?,
        };
        info!(
            "epoch {epoch}: lr {:.5} loss {:.4} val {:?} test {:?}",
            m.lr, m.train_loss, m.val_acc, m.test_acc
        );
        let stop = match cfg.stop {
            EarlyStopPolicy::AccuracyDrop { threshold, reference } => {
                m.val_acc.is_some_and(|a| a >= reference - threshold)
            }
            EarlyStopPolicy::FixedEpochs => false,
        };
        outcome.metrics.push(m);
        if stop {
            debug!("early stop after epoch {epoch}");
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}

/// Inference-mode class predictions.
pub fn predict(graph: &ModelGraph, images: &Tensor) -> Result<Vec<usize>> {
    let out = logits(&infer(graph, images)?)?;
    let (n, k) = out.dims2()?;
    let d = out.data();
    Ok((0..n)
        .map(|i| {
            let row = &d[i * k..(i + 1) * k];
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Top-1 accuracy in percent; 0 for an empty set.
pub fn accuracy(graph: &ModelGraph, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for batch in ds.batches(&order, batch_size.max(1)) {
        let (x, y) = batch?;
        correct += predict(graph, &x)?.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}
