//! Losses, optimizers and the fine-tuning loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{self, AdapterSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Binder, Model, ParamKey, Site};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cross-entropy" | "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Supervision for a batch: class labels or real-valued targets.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(t) => Targets::Values(t.select_rows(idx)?),
        })
    }

    fn default_loss(&self) -> LossKind {
        match self {
            Targets::Labels(_) => LossKind::CrossEntropy,
            Targets::Values(_) => LossKind::Mse,
        }
    }
}

/// Inputs (`n x d`) with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x: Tensor,
    pub targets: Targets,
}

impl TrainData {
    pub fn new(x: Tensor, targets: Targets) -> Result<Self> {
        if targets.len() != x.rows() {
            return Err(Error::Shape {
                op: "train data",
                lhs: x.shape(),
                rhs: (targets.len(), 0),
            });
        }
        Ok(TrainData { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records the loss of `pred` against `target` on the tape.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, target: &Targets, kind: LossKind) -> Result<Var> {
    if let Some((i, v)) = tape.value(pred).data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, value: *v });
    }
    match (kind, target) {
        (LossKind::CrossEntropy, Targets::Labels(labels)) => tape.cross_entropy(pred, labels),
        (LossKind::Mse, Targets::Values(t)) => {
            if t.shape() != tape.value(pred).shape() {
                return Err(Error::Shape {
                    op: "mse",
                    lhs: tape.value(pred).shape(),
                    rhs: t.shape(),
                });
            }
            let tv = tape.constant(t.clone());
            let r = tape.sub(pred, tv)?;
            let sq = tape.mul(r, r)?;
            tape.mean(sq)
        }
        (LossKind::Mse, Targets::Labels(_)) | (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Config(format!("loss {kind:?} does not match target type")))
        }
    }
}

/// Mean-reduced loss value.
pub fn loss(pred: &Tensor, target: &Targets, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = loss_on_tape(&mut tape, p, target, kind)?;
    tape.value(l).item()
}

/// Per-parameter update rule.
pub trait Optimizer {
    fn step(&mut self, key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()>;
}

/// Plain gradient descent with optional L2 penalty folded into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub weight_decay: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, _key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let g = grad.data();
        let wd = self.weight_decay;
        param.update_with(|i, w| w - lr * (g[i] + wd * w))
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamKey, AdamState>,
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Steps taken for `key`.
    pub fn steps(&self, key: ParamKey) -> i32 {
        self.state.get(&key).map_or(0, |s| s.t)
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, key: ParamKey, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let n = param.len();
        let st = self.state.entry(key).or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        st.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(st.t);
        let c2 = 1.0 - b2.powi(st.t);
        let g = grad.data();
        for ((m, v), &g) in st.m.iter_mut().zip(st.v.iter_mut()).zip(&g[..n]) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let (m, v, eps, wd) = (&st.m, &st.v, self.eps, self.weight_decay);
        param.update_with(|i, w| {
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w - lr * (mh / (vh.sqrt() + eps) + wd * w)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn build(self, weight_decay: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd { weight_decay }),
            OptimizerKind::AdamW { beta1, beta2, eps } => Box::new(AdamW::new(beta1, beta2, eps, weight_decay)),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::AdamW { .. } => f.write_str("adamw"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StopRule {
    FixedEpochs,
    /// Stop once the relative epoch-loss improvement stays below `tol` for
    /// `patience` consecutive epochs, then restore the parameters of the
    /// epoch with the lowest loss.
    Plateau { tol: f64, patience: usize },
}

impl StopRule {
    pub fn plateau() -> Self {
        StopRule::Plateau { tol: 1e-5, patience: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_adapter: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks cross-entropy for labels and MSE for real targets.
    pub loss: Option<LossKind>,
    /// Seeds the shuffle order only.
    pub seed: u64,
    pub stop: StopRule,
    pub optimizer: OptimizerKind,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_adapter: 1e-2,
            lr_head: 1e-2,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 32,
            loss: None,
            seed: 0,
            stop: StopRule::FixedEpochs,
            optimizer: OptimizerKind::adamw(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.lr_adapter, "lr_adapter")?;
        pos(self.lr_head, "lr_head")?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let StopRule::Plateau { tol, patience } = self.stop {
            if tol.is_nan() || tol < 0.0 || patience == 0 {
                return Err(Error::Config("plateau needs tol >= 0 and patience >= 1".into()));
            }
        }
        if let OptimizerKind::AdamW { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config("adamw needs betas in [0,1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training accuracy per epoch for classification, else empty.
    pub epoch_accuracy: Vec<f64>,
    /// Loss of every optimizer step, before the step is applied.
    pub step_losses: Vec<f64>,
    pub epochs_run: usize,
    pub wall_time_secs: f64,
    /// Hash of the trainable parameters after training.
    pub snapshot_id: String,
}

/// Hex SHA-256 over the trainable parameters of `model`.
pub fn snapshot_id(model: &Model) -> String {
    let mut h = Sha256::new();
    for (k, t) in model.trainable_parameters().0 {
        h.update(format!("{k}").as_bytes());
        h.update(t.to_bytes());
    }
    hex::encode(h.finalize())
}

/// Minimizes the loss over the parameters that `spec` leaves trainable.
/// The head uses `lr_head`, everything else `lr_adapter`. Frozen weights
/// are never touched.
fn trainable_snapshot(model: &Model) -> Vec<(ParamKey, Tensor)> {
    model.trainable_parameters().0.into_iter().map(|(k, t)| (k, t.clone())).collect()
}

pub fn fit(model: &mut Model, spec: &AdapterSpec, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    adapters::check_attached(model, spec)?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let kind = cfg.loss.unwrap_or_else(|| data.targets.default_loss());
    let start = Instant::now();
    let frozen_before = model.frozen_fingerprint();
    let mut opt = cfg.optimizer.build(cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
        step_losses: Vec::new(),
        epochs_run: 0,
        wall_time_secs: 0.0,
        snapshot_id: String::new(),
    };
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stale = 0;
    let plateau = matches!(cfg.stop, StopRule::Plateau { .. });
    // (loss, parameters the epoch started from)
    let mut best: Option<(f64, Vec<(ParamKey, Tensor)>)> = None;
    for _epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let start_params = plateau.then(|| trainable_snapshot(model));
        let mut total = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = data.x.select_rows(chunk)?;
            let tb = data.targets.select(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let mut binder = Binder::default();
            let pred = model.forward_on_tape(&mut tape, xv, &mut binder)?;
            let step = report.step_losses.len();
            let lv = loss_on_tape(&mut tape, pred, &tb, kind).map_err(|e| match e {
                Error::NonFinite { value, .. } => Error::Diverged {
                    step,
                    lr: cfg.lr_adapter,
                    loss: value,
                },
                e => e,
            })?;
            let l = tape.value(lv).item()?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step,
                    lr: cfg.lr_adapter,
                    loss: l,
                });
            }
            if let Targets::Labels(labels) = &tb {
                let preds = tape.value(pred).argmax_rows();
                correct += preds.iter().zip(labels).filter(|(a, b)| a == b).count();
            }
            report.step_losses.push(l);
            total += l * chunk.len() as f64;
            let grads = tape.backward(lv)?;
            for (key, var) in &binder.bound {
                let g = grads.get_or_zeros(*var)?;
                let lr = if key.site == Site::Head { cfg.lr_head } else { cfg.lr_adapter };
                let p = model
                    .param_mut(*key)
                    .ok_or_else(|| Error::Model(format!("parameter {key} vanished")))?;
                opt.step(*key, p, &g, lr).map_err(|_| Error::Diverged {
                    step,
                    lr,
                    loss: l,
                })?;
            }
        }
        let epoch_loss = total / n as f64;
        if matches!(data.targets, Targets::Labels(_)) {
            report.epoch_accuracy.push(correct as f64 / n as f64);
        }
        if let Some(params) = start_params {
            if best.as_ref().is_none_or(|(b, _)| epoch_loss < *b) {
                best = Some((epoch_loss, params));
            }
        }
        let prev = report.epoch_losses.last().copied();
        report.epoch_losses.push(epoch_loss);
        report.epochs_run += 1;
        if let (StopRule::Plateau { tol, patience }, Some(prev)) = (cfg.stop, prev) {
            let rel = (prev - epoch_loss) / prev.abs().max(f64::MIN_POSITIVE);
            stale = if rel < tol { stale + 1 } else { 0 };
            if stale >= patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        for (key, t) in params {
            if let Some(p) = model.param_mut(key) {
                *p = t;
            }
        }
    }
    if model.frozen_fingerprint() != frozen_before {
        return Err(Error::Model("frozen weights changed during fit".into()));
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    report.snapshot_id = snapshot_id(model);
    Ok(report)
}

/// Predicted class per row (ties to the lowest index).
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(model.forward(x)?.argmax_rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::models::Slot;

    fn key() -> ParamKey {
        ParamKey::new(Site::Layer(0), Slot::Weight)
    }

    #[test]
    fn mse_of_equal_is_zero() {
        let t = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(loss(&t, &Targets::Values(t.clone()), LossKind::Mse).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let z = Tensor::zeros((3, 4)).unwrap();
        let l = loss(&z, &Targets::Labels(vec![0, 1, 2]), LossKind::CrossEntropy).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-15);
    }

    #[test]
    fn loss_errors() {
        let z = Tensor::zeros((2, 3)).unwrap();
        assert!(matches!(
            loss(&z, &Targets::Labels(vec![0, 3]), LossKind::CrossEntropy),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(loss(&z, &Targets::Labels(vec![0, 1]), LossKind::Mse).is_err());
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let logits = Tensor::uniform((3, 5), &mut Rng::new(1), -2.0, 2.0).unwrap();
        let rep = gradcheck(|tp, v| tp.cross_entropy(v[0], &[4, 0, 2]), &[logits], 1e-5).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn sgd_hand_step() {
        // f(w) = w^2, grad 2w
        let mut w = Tensor::scalar(1.0).unwrap();
        let g = Tensor::scalar(2.0).unwrap();
        Sgd::default().step(key(), &mut w, &g, 0.1).unwrap();
        assert!((w.item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        for g in [3.0, -0.02] {
            let mut w = Tensor::scalar(0.5).unwrap();
            let mut opt = AdamW::default();
            opt.step(key(), &mut w, &Tensor::scalar(g).unwrap(), 0.1).unwrap();
            // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps)
            let expected = 0.5 - 0.1 * g / (g.abs() + 1e-8);
            assert!((w.item().unwrap() - expected).abs() < 1e-15);
            assert_eq!(opt.steps(key()), 1);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let run = |wd: f64| {
            let mut opt = AdamW::new(0.9, 0.999, 1e-8, wd);
            let mut w = Tensor::scalar(2.0).unwrap();
            let mut traj = vec![];
            for _ in 0..20 {
                let g = w.scale(2.0);
                opt.step(key(), &mut w, &g, 0.05).unwrap();
                traj.push(w.item().unwrap());
            }
            traj
        };
        // Reference Adam, written out directly.
        let mut w = 2.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        let mut adam = vec![];
        for t in 1..=20 {
            let g = 2.0 * w;
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * (mh / (vh.sqrt() + 1e-8));
            adam.push(w);
        }
        assert_eq!(run(0.0), adam);
        assert_ne!(run(0.1), adam);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            lr_head: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
