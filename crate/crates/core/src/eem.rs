//! Effect-equivalence experiments.
//!
//! * A 1-D comparison between adapting the slope of `y = c x` directly
//!   (`y = (c + d1) x`) and adapting its input (`y = c (x + d2 x)`).
//! * Recovery of the equivalent input shift for a constructed lurking system
//!   `g(x, u) = f(x + h(u))` with known `f`, `h`.

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterSpec, ShiftMap, ShiftMapSpec};
use crate::error::{Error, Result};
use crate::models::{Activation, Layer, LayerWeights, Model, ModelKind};
use crate::tensor::{Rng, Tensor};
use crate::trainer::{LossKind, OptimizerKind, StopRule, Targets, TrainConfig, TrainData, TrainReport};

/// The downstream points used for the 1-D comparison, with pre-trained
/// model `y = 5x`.
pub const REFERENCE_POINTS: [(f64, f64); 4] = [(0.2, 0.4), (0.6, 1.1), (1.1, 2.2), (1.6, 2.8)];
pub const REFERENCE_SLOPE: f64 = 5.0;
pub const REFERENCE_LR: f64 = 0.03;

/// Divergence threshold on the loss.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneDMode {
    /// `y = (c + delta) x`.
    WeightSpace,
    /// `y = c (x + delta x)`.
    FeatureSpace,
}

impl OneDMode {
    pub fn name(self) -> &'static str {
        match self {
            OneDMode::WeightSpace => "weight",
            OneDMode::FeatureSpace => "feature",
        }
    }

    /// Slope of the fitted line for parameter `delta`.
    pub fn slope(self, c: f64, delta: f64) -> f64 {
        match self {
            OneDMode::WeightSpace => c + delta,
            OneDMode::FeatureSpace => c * (1.0 + delta),
        }
    }

    fn dslope(self, c: f64) -> f64 {
        match self {
            OneDMode::WeightSpace => 1.0,
            OneDMode::FeatureSpace => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneDExperiment {
    pub pretrained_slope: f64,
    pub data: Vec<(f64, f64)>,
    pub lr: f64,
    /// Step budget.
    pub steps: usize,
    /// Stop once `|loss_k - loss_{k-1}| < tol`; `None` runs every step.
    pub tol: Option<f64>,
    pub mode: OneDMode,
}

impl OneDExperiment {
    /// The reference setup: slope 5, four points, lr 0.03, at most 10,000
    /// steps with a `1e-12` loss-change stop.
    pub fn reference(mode: OneDMode) -> Self {
        OneDExperiment {
            pretrained_slope: REFERENCE_SLOPE,
            data: REFERENCE_POINTS.to_vec(),
            lr: REFERENCE_LR,
            steps: 10_000,
            tol: Some(1e-12),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_empty() || self.data.iter().all(|&(x, _)| x == 0.0) {
            return Err(Error::Dataset("1-D data must be nonempty with some nonzero x".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Mean squared error of the line with slope `s`.
    pub fn mse_at_slope(&self, s: f64) -> f64 {
        self.data.iter().map(|&(x, y)| (s * x - y).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    /// `dL/d delta` at parameter `delta`.
    pub fn gradient(&self, delta: f64) -> f64 {
        let c = self.pretrained_slope;
        let s = self.mode.slope(c, delta);
        let ds = self.data.iter().map(|&(x, y)| 2.0 * (s * x - y) * x).sum::<f64>() / self.data.len() as f64;
        ds * self.mode.dslope(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub param: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneDTrace {
    pub mode: OneDMode,
    /// Step 0 is the pre-trained start (`delta = 0`).
    pub steps: Vec<TraceStep>,
    pub converged: bool,
}

impl OneDTrace {
    pub fn final_param(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.param)
    }

    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.loss)
    }

    pub fn fitted_slope(&self, pretrained: f64) -> f64 {
        self.mode.slope(pretrained, self.final_param())
    }
}

/// Gradient descent on the mean squared error, from `delta = 0`.
pub fn run_1d(exp: &OneDExperiment) -> Result<OneDTrace> {
    exp.validate()?;
    let mut delta = 0.0;
    let mut loss = exp.mse_at_slope(exp.mode.slope(exp.pretrained_slope, delta));
    let mut steps = vec![TraceStep { step: 0, param: delta, loss }];
    let mut converged = false;
    for k in 1..=exp.steps {
        delta -= exp.lr * exp.gradient(delta);
        let next = exp.mse_at_slope(exp.mode.slope(exp.pretrained_slope, delta));
        if !next.is_finite() || next > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step: k,
                lr: exp.lr,
                loss: next,
            });
        }
        steps.push(TraceStep {
            step: k,
            param: delta,
            loss: next,
        });
        let change = (next - loss).abs();
        loss = next;
        if exp.tol.is_some_and(|tol| change < tol) {
            converged = true;
            break;
        }
    }
    Ok(OneDTrace {
        mode: exp.mode,
        steps,
        converged,
    })
}

/// `(dL/d delta_feature) / (dL/d delta_weight)` at `delta = 0` on shared
/// data. By the chain rule this is the pre-trained slope.
pub fn gradient_ratio_at_init(pretrained_slope: f64, data: &[(f64, f64)]) -> Result<f64> {
    let mk = |mode| OneDExperiment {
        pretrained_slope,
        data: data.to_vec(),
        lr: 1.0,
        steps: 0,
        tol: None,
        mode,
    };
    let (w, f) = (mk(OneDMode::WeightSpace), mk(OneDMode::FeatureSpace));
    w.validate()?;
    let gw = w.gradient(0.0);
    if gw == 0.0 {
        return Err(Error::Config("weight-space gradient is zero at init".into()));
    }
    Ok(f.gradient(0.0) / gw)
}

/// Relative slack when comparing losses of the two modes. Once both sit at
/// the optimum their losses agree to the last few bits and either can round
/// up.
pub const LOSS_TIE_REL: f64 = 1e-14;

/// True when `feature` has loss no larger than `weight` at every step >= 1
/// they share, up to [`LOSS_TIE_REL`].
pub fn feature_loss_dominates(weight: &OneDTrace, feature: &OneDTrace) -> bool {
    weight
        .steps
        .iter()
        .zip(&feature.steps)
        .skip(1)
        .all(|(w, f)| f.loss <= w.loss * (1.0 + LOSS_TIE_REL))
}

/// Least-squares slope through the origin: `sum(xy) / sum(x^2)`.
pub fn least_squares_slope(data: &[(f64, f64)]) -> f64 {
    let sxy: f64 = data.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = data.iter().map(|(x, _)| x * x).sum();
    sxy / sxx
}

/// `g(x, u) = f(x + v u)` with linear `f(x) = W x` (`W: k x d`) and a
/// scalar lurking value `u`. Observations add Gaussian noise of std
/// `noise_std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LurkingSystem {
    pub w: Tensor,
    /// Effect direction `v` (`d` entries): `h(u) = v u`.
    pub effect: Vec<f64>,
    pub u_domain: f64,
    pub noise_std: f64,
}

impl LurkingSystem {
    /// Random well-conditioned `W = I_stack + 0.3 N(0,1)` of shape `k x d`
    /// (`k >= d`) and a random effect direction.
    pub fn random(d: usize, k: usize, u_domain: f64, noise_std: f64, rng: &mut Rng) -> Result<Self> {
        if k < d {
            return Err(Error::Config("need k >= d for a full-column-rank f".into()));
        }
        let mut w = Tensor::randn((k, d), rng, 0.3)?;
        for i in 0..d {
            w.set(i, i, w.get(i, i) + 1.0)?;
        }
        let effect = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Ok(LurkingSystem {
            w,
            effect,
            u_domain,
            noise_std,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    /// The exact equivalent shift `h(u_d)`.
    pub fn true_shift(&self) -> Vec<f64> {
        self.effect.iter().map(|v| v * self.u_domain).collect()
    }

    /// `f(x) = x W^T` on a batch.
    pub fn f(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.transpose())
    }

    /// Noise-free response `g(x, u)`.
    pub fn g(&self, x: &Tensor, u: f64) -> Result<Tensor> {
        let (n, d) = x.shape();
        let mut shifted = x.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                shifted[r * d + c] += self.effect[c] * u;
            }
        }
        self.f(&Tensor::new(n, d, shifted)?)
    }

    /// `n` samples `x ~ N(0, I)`, `y = g(x, u_d) + noise`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<TrainData> {
        let x = Tensor::randn((n, self.input_dim()), rng, 1.0)?;
        let clean = self.g(&x, self.u_domain)?;
        let y = if self.noise_std > 0.0 {
            clean.add(&Tensor::randn(clean.shape(), rng, self.noise_std)?)?
        } else {
            clean
        };
        TrainData::new(x, Targets::Values(y))
    }

    /// `f` as a frozen single-layer model.
    pub fn frozen_model(&self) -> Result<Model> {
        let mut m = Model::new(
            ModelKind::Mlp,
            vec![Layer {
                name: "f".into(),
                weights: LayerWeights::frozen(self.w.clone()),
                activation: Activation::Identity,
            }],
            None,
        )?;
        m.freeze_all();
        Ok(m)
    }
}

/// Defaults for Δ-map fitting: full-batch AdamW on MSE with a plateau stop.
pub fn recovery_config() -> TrainConfig {
    TrainConfig {
        lr_adapter: 0.05,
        lr_head: 0.05,
        weight_decay: 0.0,
        epochs: 3000,
        batch_size: usize::MAX,
        loss: Some(LossKind::Mse),
        seed: 0,
        stop: StopRule::Plateau {
            tol: 1e-12,
            patience: 50,
        },
        optimizer: OptimizerKind::adamw(),
        shuffle: false,
    }
}

/// Fraction of samples held out for alignment scoring.
pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct DeltaRecovery {
    pub shift: ShiftMap,
    /// Mean over held-out samples of `max_i |f(x + delta(x)) - g(x, u_d)|_i`.
    pub alignment_mean: f64,
    /// Largest such deviation.
    pub alignment_max: f64,
    /// Average estimated shift over held-out samples.
    pub mean_shift: Vec<f64>,
    pub report: TrainReport,
}

/// Fits `delta(x) = M x + b` in front of the frozen `f` on the first 80% of
/// `samples` and scores alignment with the noise-free `g` on the rest.
pub fn recover_delta(sys: &LurkingSystem, samples: &TrainData, cfg: &TrainConfig) -> Result<DeltaRecovery> {
    let n = samples.len();
    let n_fit = ((n as f64) * (1.0 - HELD_OUT_FRACTION)).round() as usize;
    if n_fit == 0 || n_fit >= n {
        return Err(Error::Dataset(format!("{n} samples are too few to hold out 20%")));
    }
    let fit_idx: Vec<usize> = (0..n_fit).collect();
    let held_idx: Vec<usize> = (n_fit..n).collect();
    let Targets::Values(y) = &samples.targets else {
        return Err(Error::Dataset("delta recovery needs real-valued targets".into()));
    };
    let fit = TrainData::new(samples.x.select_rows(&fit_idx)?, Targets::Values(y.select_rows(&fit_idx)?))?;
    let spec = AdapterSpec::input_shift().with_shift(ShiftMapSpec {
        hidden: None,
        bias: true,
    });
    let mut cfg = cfg.clone();
    cfg.batch_size = cfg.batch_size.min(n_fit);
    let (model, report) = adapters::estimate_input_shift(&sys.frozen_model()?, &spec, &fit, &cfg)?;
    let shift = model
        .input_shift
        .clone()
        .ok_or_else(|| Error::Model("input shift missing after fit".into()))?;
    let xh = samples.x.select_rows(&held_idx)?;
    let pred = model.forward(&xh)?;
    let truth = sys.g(&xh, sys.u_domain)?;
    let diff = pred.sub(&truth)?;
    let per_sample: Vec<f64> = (0..diff.rows())
        .map(|r| diff.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let delta = shift.delta(&xh)?;
    let mean_shift = (0..delta.cols())
        .map(|c| delta.column(c).iter().sum::<f64>() / delta.rows() as f64)
        .collect();
    Ok(DeltaRecovery {
        shift,
        alignment_mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        alignment_max: per_sample.iter().fold(0.0, |m, &v| m.max(v)),
        mean_shift,
        report,
    })
}

/// Effective-weight forms of the two 1-D modes, for plotting the fitted
/// lines and the learned input map `x -> x + d2 x`.
pub fn feature_map(delta: f64, x: f64) -> f64 {
    x + delta * x
}
