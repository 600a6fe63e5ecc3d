//! Full-batch transductive training.
//!
//! One epoch is one forward pass over the whole graph, a masked
//! cross-entropy on the training nodes, and one AdamW step. Training,
//! and validation metrics for an epoch all come from the same forward pass,
//! so the parameters credited to an epoch are the ones that produced its
//! logits. Training stops once validation accuracy has failed to strictly
//! improve for `patience` consecutive epochs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var, VjpRule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, decays, ModelConfig, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Indices of the nodes assigned to `which`.
pub fn mask_of(splits: &[Split], which: Split) -> Vec<usize> {
    splits.iter().enumerate().filter(|(_, s)| **s == which).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// `(train, val, test)`.
    pub split: (f64, f64, f64),
    /// Record wall time per epoch. Off by default so that histories are
    /// reproducible byte for byte.
    pub record_timing: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 2000,
            patience: 50,
            seed: 0,
            split: (0.6, 0.2, 0.2),
            record_timing: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || a + b + c > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions ({a}, {b}, {c}) must be positive and sum to at most 1"
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("optimizer settings out of range".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        self.model.validate()
    }
}

/// Mean negative log-likelihood over `mask`, with max-subtracted softmax.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    Ok(CrossEntropy::compute(logits, labels, mask)?.0)
}

struct CrossEntropy {
    labels: Vec<usize>,
    mask: Vec<usize>,
    /// Softmax rows for the masked nodes, in mask order.
    probs: Vec<Vec<f64>>,
}

impl CrossEntropy {
    fn compute(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<(f64, Self)> {
        let (n, c) = logits.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if mask.is_empty() {
            return Err(Error::InvalidArgument("cross_entropy over an empty mask".into()));
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(mask.len());
        for &i in mask {
            if i >= n {
                return Err(Error::NodeIndex { index: i, n });
            }
            let y = labels[i];
            if y >= c {
                return Err(Error::InvalidArgument(format!("label {y} of node {i} outside [0, {c})")));
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() - (row[y] - max);
            probs.push(exps.into_iter().map(|e| e / z).collect());
        }
        let rule = Self {
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok((total / mask.len() as f64, rule))
    }
}

impl VjpRule for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let c = logits.last_dim();
        let scale = g.data()[0] / self.mask.len() as f64;
        let mut d = Tensor::zeros(logits.shape());
        for (&i, p) in self.mask.iter().zip(&self.probs) {
            let row = &mut d.data_mut()[i * c..(i + 1) * c];
            for (slot, pv) in row.iter_mut().zip(p) {
                *slot += scale * pv;
            }
            row[self.labels[i]] -= scale;
        }
        Ok(vec![Some(d)])
    }
}

pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
    let (loss, rule) = CrossEntropy::compute(tape.value(logits), labels, mask)?;
    Ok(tape.custom(vec![logits], Tensor::scalar(loss), Box::new(rule)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub decay: bool,
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`, the decay term only for slots with
/// `decay` set. Fails without touching anything if a gradient is not finite.
pub fn adamw_step(params: &mut [ParamSlot<'_>], grads: &[Tensor], state: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (slot, g) in params.iter().zip(grads) {
        if slot.value.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{}: param {:?} vs grad {:?}", slot.name, slot.value.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", slot.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (slot, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if slot.decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((theta, &gv), mv), vv) in slot.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *theta = *theta - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * decay * *theta;
        }
    }
    Ok(())
}

/// Seeded random assignment: validation and test each get
/// `floor(fraction·n)` nodes, training gets the rest.
pub fn make_splits(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || a + b + c > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!("invalid split fractions ({a}, {b}, {c})")));
    }
    let n_val = (b * n as f64 + 1e-9).floor() as usize;
    let n_test = (c * n as f64 + 1e-9).floor() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_val == 0 || n_test == 0 || n_train == 0 {
        return Err(Error::InvalidArgument(format!(
            "split of {n} nodes leaves an empty part (train {n_train}, val {n_val}, test {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Splits));
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_val] {
        out[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Fraction of `mask` where prediction equals label.
pub fn accuracy(preds: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty mask".into()));
    }
    let correct = mask.iter().filter(|&&i| preds[i] == labels[i]).count();
    Ok(correct as f64 / mask.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Wall time of the epoch, when timing is recorded.
    pub epoch_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Everything needed to run epochs on one dataset.
pub struct Trainer<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    op: std::sync::Arc<crate::spectral::HopOperator>,
    train_mask: Vec<usize>,
    val_mask: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// Fills the model's input width and class count from the dataset.
    pub fn new(data: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.model.input_dim = data.features.shape()[1];
        cfg.model.classes = data.classes;
        cfg.validate()?;
        let splits = data
            .splits
            .as_ref()
            .ok_or_else(|| Error::Dataset("no split assignment; generate one with make_splits".into()))?;
        let train_mask = mask_of(splits, Split::Train);
        let val_mask = mask_of(splits, Split::Val);
        if train_mask.is_empty() || val_mask.is_empty() {
            return Err(Error::Dataset("train and validation splits must be non-empty".into()));
        }
        let op = model::prepare_operator(&data.graph, &cfg.model)?;
        Ok(Self {
            data,
            cfg,
            op,
            train_mask,
            val_mask,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &std::sync::Arc<crate::spectral::HopOperator> {
        &self.op
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::init(&self.cfg.model, self.cfg.seed)
    }

    /// Forward, loss and one optimizer step. Returns
    /// `(train_loss, train_acc, val_acc)` for the parameters before the step.
    pub fn epoch(&self, params: &mut ModelParams, state: &mut OptimizerState, epoch: usize) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let fwd = model::forward_on_tape(&mut tape, &self.op, &self.data.features, params, &self.cfg.model)?;
        let loss = cross_entropy_on_tape(&mut tape, fwd.logits, &self.data.labels, &self.train_mask)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        let preds = model::predict(tape.value(fwd.logits));
        let train_acc = accuracy(&preds, &self.data.labels, &self.train_mask)?;
        let val_acc = accuracy(&preds, &self.data.labels, &self.val_mask)?;

        let grads = tape.backward(loss)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let grad_tensors: Vec<Tensor> = fwd
            .params
            .iter()
            .zip(params.named_tensors())
            .map(|(v, (_, t))| grads.get_or_zeros(*v, t))
            .collect();
        let mut slots: Vec<ParamSlot<'_>> = names
            .into_iter()
            .zip(params.tensors_mut())
            .map(|(name, value)| ParamSlot {
                decay: decays(&name),
                name,
                value,
            })
            .collect();
        adamw_step(&mut slots, &grad_tensors, state, &AdamWConfig::from(&self.cfg))?;
        Ok((loss_value, train_acc, val_acc))
    }

    /// Runs the early-stopping loop, calling `on_epoch` after each epoch.
    pub fn run(&self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(ModelParams, TrainHistory)> {
        let mut params = self.init_params()?;
        let mut state = OptimizerState::new(params.named_tensors().into_iter().map(|(_, t)| t));
        let mut history = TrainHistory {
            best_val_acc: f64::NEG_INFINITY,
            ..TrainHistory::default()
        };
        let mut best = params.clone();
        let mut stale = 0;
        for epoch in 1..=self.cfg.max_epochs {
            let started = Instant::now();
            let before = params.clone();
            let (train_loss, train_acc, val_acc) = self.epoch(&mut params, &mut state, epoch)?;
            let record = EpochRecord {
                epoch,
                train_loss,
                train_acc,
                val_acc,
                epoch_seconds: self.cfg.record_timing.then(|| started.elapsed().as_secs_f64()),
            };
            on_epoch(&record);
            history.records.push(record);
            if val_acc > history.best_val_acc {
                history.best_val_acc = val_acc;
                history.best_epoch = epoch;
                best = before;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        Ok((best, history))
    }
}

/// Trains on `data` and returns the parameters of the best validation epoch.
pub fn train_loop(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    Trainer::new(data, cfg)?.run(|_| {})
}

/// Accuracy of `params` on the nodes assigned to `which`.
pub fn evaluate(data: &Dataset, params: &ModelParams, cfg: &ModelConfig, which: Split) -> Result<f64> {
    let splits = data
        .splits
        .as_ref()
        .ok_or_else(|| Error::Dataset("no split assignment".into()))?;
    let op = model::prepare_operator(&data.graph, cfg)?;
    let logits = model::model_forward(&op, &data.features, params, cfg)?;
    accuracy(&model::predict(&logits), &data.labels, &mask_of(splits, which))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::zeros(&[2, 7]);
        assert!((cross_entropy(&z, &[0, 3], &[0, 1]).unwrap() - 7f64.ln()).abs() < 1e-12);
        let mut l = Tensor::zeros(&[1, 3]);
        l.data_mut()[1] = 100.0;
        assert!(cross_entropy(&l, &[1], &[0]).unwrap() < 1e-10);
        assert_eq!(cross_entropy(&Tensor::full(&[2, 1], 4.0), &[0, 0], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_errors() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy(&z, &[0, 1], &[]).is_err());
        assert!(cross_entropy(&z, &[0, 3], &[1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::from_rows(&[[0.2, -1.0, 0.5], [1.5, 0.3, -0.7], [0.0, 0.1, 0.2]]).unwrap();
        let labels = [2, 0, 1];
        let report = crate::gradcheck::grad_check(
            |t, p| cross_entropy_on_tape(t, p[0], &labels, &[0, 2]),
            &[logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn one_scalar_step(theta: f64, g: f64, wd: f64) -> f64 {
        let mut p = Tensor::scalar(theta);
        let mut state = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut slots = [ParamSlot {
            name: "w".into(),
            value: &mut p,
            decay: true,
        }];
        adamw_step(&mut slots, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
        assert_eq!(state.t, 1);
        p.data()[0]
    }

    #[test]
    fn adamw_examples() {
        assert!((one_scalar_step(1.0, 1.0, 0.0) - 0.9).abs() < 1e-6);
        assert!((one_scalar_step(1.0, 1.0, 0.01) - 0.899).abs() < 1e-6);
        assert_eq!(one_scalar_step(1.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut state = OptimizerState::new([&p]);
        let mut slots = [ParamSlot {
            name: "mixer0.w3".into(),
            value: &mut p,
            decay: true,
        }];
        let cfg = AdamWConfig::from(&TrainConfig::default());
        let err = adamw_step(&mut slots, &[Tensor::scalar(f64::NAN)], &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("mixer0.w3"));
        assert_eq!(state.t, 0);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn split_examples() {
        let count = |s: &[Split], w| s.iter().filter(|&&x| x == w).count();
        let s = make_splits(10, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)), (6, 2, 2));
        let s = make_splits(11, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)), (7, 2, 2));
        assert_eq!(make_splits(50, (0.6, 0.2, 0.2), 9).unwrap(), make_splits(50, (0.6, 0.2, 0.2), 9).unwrap());
        assert_ne!(make_splits(50, (0.6, 0.2, 0.2), 9).unwrap(), make_splits(50, (0.6, 0.2, 0.2), 10).unwrap());
        assert!(make_splits(3, (0.6, 0.2, 0.2), 1).is_err());
        assert!(make_splits(10, (0.6, 0.3, 0.3), 1).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[0, 1, 1], &[0, 1, 2], &[0, 1, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[2, 1], &[2, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0], &[]).is_err());
    }
}
