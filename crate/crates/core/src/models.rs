//! Small networks whose per-layer weights can host adapters.
//!
//! Inputs are row-major batches: `x` is `batch x q` and a layer with weight
//! `W0` of shape `p x q` produces `x W0^T` (`batch x p`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterState, ShiftMap};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear1d,
    Mlp,
    AttentionBlock,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear1d => "linear1d",
            ModelKind::Mlp => "mlp",
            ModelKind::AttentionBlock => "attention-block",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

/// Frozen-capable weight `W0` (`p x q`) with optional bias and adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w0: Tensor,
    /// `p x 1`.
    pub bias: Option<Tensor>,
    pub frozen: bool,
    pub adapter: Option<AdapterState>,
}

impl LayerWeights {
    pub fn new(w0: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (w0.rows(), 1) {
                return Err(Error::Shape {
                    op: "layer bias",
                    lhs: w0.shape(),
                    rhs: b.shape(),
                });
            }
        }
        Ok(LayerWeights {
            w0,
            bias,
            frozen: false,
            adapter: None,
        })
    }

    pub fn frozen(w0: Tensor) -> Self {
        LayerWeights {
            w0,
            bias: None,
            frozen: true,
            adapter: None,
        }
    }

    /// `(p, q)`: output and input width.
    pub fn dims(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn with_adapter(mut self, adapter: AdapterState) -> Result<Self> {
        adapter.check_layer(self.dims())?;
        self.adapter = Some(adapter);
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub weights: LayerWeights,
    pub activation: Activation,
}

/// Where a parameter lives in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Input,
    Layer(usize),
    Head,
}

/// Which tensor of a site a parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Weight,
    Bias,
    AdapterA,
    AdapterB,
    Lambda,
    ShiftWeight(usize),
    ShiftBias(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub site: Site,
    pub slot: Slot,
}

impl ParamKey {
    pub fn new(site: Site, slot: Slot) -> Self {
        ParamKey { site, slot }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}", self.site, self.slot)
    }
}

/// Registers model parameters on a tape, remembering which variables are
/// trainable.
#[derive(Debug, Default)]
pub struct Binder {
    pub bound: Vec<(ParamKey, Var)>,
}

impl Binder {
    pub fn param(&mut self, tape: &mut Tape, key: ParamKey, value: &Tensor, trainable: bool) -> Var {
        let v = tape.input(value.clone(), trainable);
        if trainable {
            self.bound.push((key, v));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    /// Task head; logits for classifiers.
    pub head: Option<LayerWeights>,
    /// Learned input shift `x -> x + delta(x)` applied before the first layer.
    pub input_shift: Option<ShiftMap>,
    /// Fixed standardization applied after the input shift.
    #[serde(default)]
    pub input_norm: Option<Standardize>,
}

/// `z = (x - mean) * inv_std` per column; never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: Tensor,
    pub inv_std: Tensor,
}

impl Standardize {
    /// Column statistics of `x`; near-constant columns get `inv_std = 1`.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::Dataset("standardization needs at least two rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = Vec::with_capacity(x.cols());
        let mut inv_std = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let col = x.column(j);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            inv_std.push(if var.sqrt() > 1e-12 { 1.0 / var.sqrt() } else { 1.0 });
        }
        Ok(Standardize {
            mean: Tensor::row_vector(&mean)?,
            inv_std: Tensor::row_vector(&inv_std)?,
        })
    }

    pub fn width(&self) -> usize {
        self.mean.cols()
    }

    fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let ones = Tensor::full((tape.value(x).rows(), 1), 1.0)?;
        let mean = tape.constant(ones.matmul(&self.mean)?);
        let scale = tape.constant(ones.matmul(&self.inv_std)?);
        let centered = tape.sub(x, mean)?;
        tape.mul(centered, scale)
    }
}

pub const ATTENTION_LAYERS: [&str; 4] = ["q", "k", "v", "o"];

impl Model {
    /// `y = slope * x`, no bias and no head.
    pub fn linear1d(slope: f64) -> Result<Self> {
        let w = LayerWeights::new(Tensor::scalar(slope)?, None)?;
        Model::new(
            ModelKind::Linear1d,
            vec![Layer {
                name: "w".into(),
                weights: w,
                activation: Activation::Identity,
            }],
            None,
        )
    }

    /// ReLU MLP `input -> hidden.. -> classes` with He-normal weights and
    /// biases uniform in `+-1/sqrt(fan_in)`. The last map is the head.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            let w0 = Tensor::randn((h, width), rng, (2.0 / width as f64).sqrt())?;
            let bound = 1.0 / (width as f64).sqrt();
            let bias = Tensor::uniform((h, 1), rng, -bound, bound)?;
            layers.push(Layer {
                name: format!("fc{i}"),
                weights: LayerWeights::new(w0, Some(bias))?,
                activation: Activation::Relu,
            });
            width = h;
        }
        let hw = Tensor::randn((classes, width), rng, (1.0 / width as f64).sqrt())?;
        let bound = 1.0 / (width as f64).sqrt();
        let head = LayerWeights::new(hw, Some(Tensor::uniform((classes, 1), rng, -bound, bound)?))?;
        Model::new(ModelKind::Mlp, layers, Some(head))
    }

    /// Single-head self-attention block with `d x d` projections q, k, v, o.
    pub fn attention_block(d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::Model("attention width must be positive".into()));
        }
        let std = (1.0 / d as f64).sqrt();
        let layers = ATTENTION_LAYERS
            .iter()
            .map(|n| {
                Ok(Layer {
                    name: (*n).into(),
                    weights: LayerWeights::new(Tensor::randn((d, d), rng, std)?, None)?,
                    activation: Activation::Identity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(ModelKind::AttentionBlock, layers, None)
    }

    /// Validates layer chaining and the per-kind structure.
    pub fn new(kind: ModelKind, layers: Vec<Layer>, head: Option<LayerWeights>) -> Result<Self> {
        let m = Model {
            kind,
            layers,
            head,
            input_shift: None,
            input_norm: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        for l in &self.layers {
            if let Some(a) = &l.weights.adapter {
                a.check_layer(l.weights.dims())?;
            }
        }
        match self.kind {
            ModelKind::AttentionBlock => {
                let names: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
                if names != ATTENTION_LAYERS {
                    return Err(Error::Model(format!("attention block needs layers q,k,v,o, got {names:?}")));
                }
                let d = self.layers[0].weights.w0.rows();
                if self.layers.iter().any(|l| l.weights.dims() != (d, d)) {
                    return Err(Error::Model("attention projections must all be d x d".into()));
                }
            }
            ModelKind::Linear1d | ModelKind::Mlp => {
                for pair in self.layers.windows(2) {
                    let (p, _) = pair[0].weights.dims();
                    let (_, q) = pair[1].weights.dims();
                    if p != q {
                        return Err(Error::Shape {
                            op: "layer chain",
                            lhs: pair[0].weights.dims(),
                            rhs: pair[1].weights.dims(),
                        });
                    }
                }
                if let Some(h) = &self.head {
                    let out = self.layers.last().map(|l| l.weights.dims().0).unwrap_or(0);
                    if h.dims().1 != out {
                        return Err(Error::Shape {
                            op: "head",
                            lhs: (out, 0),
                            rhs: h.dims(),
                        });
                    }
                }
            }
        }
        if let Some(s) = &self.input_shift {
            s.check_width(self.input_dim())?;
        }
        if let Some(n) = &self.input_norm {
            if n.width() != self.input_dim() || n.inv_std.shape() != n.mean.shape() {
                return Err(Error::Model(format!(
                    "input standardization width {} does not match input {}",
                    n.width(),
                    self.input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.dims().1
    }

    pub fn output_dim(&self) -> usize {
        match (&self.head, self.kind) {
            (Some(h), _) => h.dims().0,
            (None, ModelKind::AttentionBlock) => self.input_dim(),
            (None, _) => self.layers.last().map(|l| l.weights.dims().0).unwrap_or(0),
        }
    }

    /// Number of learnable weight layers, head included.
    pub fn depth(&self) -> usize {
        self.layers.len() + usize::from(self.head.is_some())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Adds a fixed input standardization.
    pub fn with_input_norm(mut self, norm: Standardize) -> Result<Self> {
        self.input_norm = Some(norm);
        self.validate()?;
        Ok(self)
    }

    /// Freezes every base weight and bias, head included.
    pub fn freeze_all(&mut self) {
        for l in &mut self.layers {
            l.weights.frozen = true;
        }
        if let Some(h) = &mut self.head {
            h.frozen = true;
        }
    }

    /// Records the forward pass on `tape`. Trainable parameters are bound as
    /// gradient-carrying leaves and listed in `binder`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::Shape {
                op: "model input",
                lhs: tape.value(x).shape(),
                rhs: (0, self.input_dim()),
            });
        }
        let mut h = match &self.input_shift {
            Some(s) => s.apply_on_tape(tape, x, binder)?,
            None => x,
        };
        if let Some(n) = &self.input_norm {
            h = n.apply_on_tape(tape, h)?;
        }
        match self.kind {
            ModelKind::AttentionBlock => {
                h = self.attention_on_tape(tape, h, binder)?;
            }
            ModelKind::Linear1d | ModelKind::Mlp => {
                for (i, layer) in self.layers.iter().enumerate() {
                    h = adapters::layer_on_tape(tape, &layer.weights, Site::Layer(i), h, binder)?;
                    if layer.activation == Activation::Relu {
                        h = tape.relu(h)?;
                    }
                }
            }
        }
        if let Some(head) = &self.head {
            h = adapters::layer_on_tape(tape, head, Site::Head, h, binder)?;
        }
        Ok(h)
    }

    fn attention_on_tape(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let proj = |i: usize, tape: &mut Tape, binder: &mut Binder, input: Var| {
            adapters::layer_on_tape(tape, &self.layers[i].weights, Site::Layer(i), input, binder)
        };
        let q = proj(0, tape, binder, x)?;
        let k = proj(1, tape, binder, x)?;
        let v = proj(2, tape, binder, x)?;
        let d = self.input_dim() as f64;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / d.sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        proj(3, tape, binder, ctx)
    }

    /// Plain evaluation: `batch x input_dim` to `batch x output_dim`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut binder = Binder::default();
        let out = self.forward_on_tape(&mut tape, xv, &mut binder)?;
        Ok(tape.value(out).clone())
    }

    /// Scaled dot-product self-attention over `tokens x d`; errors unless
    /// this is an attention block.
    pub fn attention_block_forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kind != ModelKind::AttentionBlock {
            return Err(Error::Model(format!("{} is not an attention block", self.kind)));
        }
        self.forward(x)
    }

    fn visit<'a>(&'a self, mut f: impl FnMut(ParamKey, &'a Tensor, bool)) {
        if let Some(s) = &self.input_shift {
            s.visit(|slot, t| f(ParamKey::new(Site::Input, slot), t, true));
        }
        let sites = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (Site::Layer(i), &l.weights))
            .chain(self.head.iter().map(|h| (Site::Head, h)));
        for (site, w) in sites {
            f(ParamKey::new(site, Slot::Weight), &w.w0, !w.frozen);
            if let Some(b) = &w.bias {
                f(ParamKey::new(site, Slot::Bias), b, !w.frozen);
            }
            if let Some(a) = &w.adapter {
                a.visit(|slot, t| f(ParamKey::new(site, slot), t, true));
            }
        }
    }

    /// Every parameter tensor with its trainability flag.
    pub fn parameters(&self) -> Vec<(ParamKey, &Tensor, bool)> {
        let mut out = Vec::new();
        self.visit(|k, t, tr| out.push((k, t, tr)));
        out
    }

    /// Tensors the optimizer may update under the current adapter regime,
    /// and the sum of their element counts.
    pub fn trainable_parameters(&self) -> (Vec<(ParamKey, &Tensor)>, usize) {
        let params: Vec<(ParamKey, &Tensor)> = self
            .parameters()
            .into_iter()
            .filter(|(_, _, tr)| *tr)
            .map(|(k, t, _)| (k, t))
            .collect();
        let count = params.iter().map(|(_, t)| t.len()).sum();
        (params, count)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.parameters().into_iter().find(|(k, _, _)| *k == key).map(|(_, t, _)| t)
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        let w = match key.site {
            Site::Input => return self.input_shift.as_mut()?.slot_mut(key.slot),
            Site::Layer(i) => &mut self.layers.get_mut(i)?.weights,
            Site::Head => self.head.as_mut()?,
        };
        match key.slot {
            Slot::Weight => Some(&mut w.w0),
            Slot::Bias => w.bias.as_mut(),
            slot => w.adapter.as_mut()?.slot_mut(slot),
        }
    }

    /// Serialized bytes of every frozen base weight, for immutability checks.
    pub fn frozen_fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, t, trainable) in self.parameters() {
            if !trainable && matches!(k.slot, Slot::Weight | Slot::Bias) {
                out.extend_from_slice(format!("{k}").as_bytes());
                out.extend_from_slice(&t.to_bytes());
            }
        }
        if let Some(n) = &self.input_norm {
            out.extend_from_slice(&n.mean.to_bytes());
            out.extend_from_slice(&n.inv_std.to_bytes());
        }
        out
    }
}
