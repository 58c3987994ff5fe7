//! Adapter families: full fine-tuning, linear probe, LoRA, LoRFA, VeFA and
//! the input shift.
//!
//! Effective per-layer transforms for a frozen `W0` (`p x q`) acting on a
//! layer input `x`:
//!
//! | kind  | trainable                         | effective weight     |
//! |-------|-----------------------------------|----------------------|
//! | LoRA  | `A: r x q`, `B: p x r`            | `W0 + B A`           |
//! | LoRFA | `A: r x q`, `B: q x r`            | `W0 (I + B A)`       |
//! | VeFA  | `lambda: q x 1`                   | `W0 (I + diag(lambda))` |
//!
//! LoRFA and VeFA act on the layer input, so the update `W' - W0` always
//! lies in the column space of `W0`. LoRA adds `B A` directly and can leave
//! it. The input shift learns `x -> x + delta(x)` in front of a fully frozen
//! model and has no weight-space form.
//!
//! Every kind starts as an exact no-op: `B = 0`, `lambda = 0`, and the last
//! layer of the shift map is zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{Binder, LayerWeights, Model, ModelKind, ParamKey, Site, Slot};
use crate::tensor::{Rng, Tensor};
use crate::trainer::{self, TrainConfig, TrainData, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    FullFt,
    LinearProbe,
    Lora,
    Lorfa,
    Vefa,
    InputShift,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 6] = [
        AdapterKind::FullFt,
        AdapterKind::LinearProbe,
        AdapterKind::Lora,
        AdapterKind::Lorfa,
        AdapterKind::Vefa,
        AdapterKind::InputShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::FullFt => "full-ft",
            AdapterKind::LinearProbe => "linear-probe",
            AdapterKind::Lora => "lora",
            AdapterKind::Lorfa => "lorfa",
            AdapterKind::Vefa => "vefa",
            AdapterKind::InputShift => "input-shift",
        }
    }

    pub fn is_rank_bearing(self) -> bool {
        matches!(self, AdapterKind::Lora | AdapterKind::Lorfa)
    }

    /// Adapts in feature space: the frozen weights are never changed.
    pub fn is_feature_space(self) -> bool {
        matches!(self, AdapterKind::Lorfa | AdapterKind::Vefa | AdapterKind::InputShift)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .or(match norm.as_str() {
                "fullft" | "full" | "weight-ft" => Some(AdapterKind::FullFt),
                "probe" | "linearprobe" => Some(AdapterKind::LinearProbe),
                "inputshift" | "shift" | "feature-ft" => Some(AdapterKind::InputShift),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown adapter kind '{s}'")))
    }
}

/// Which layers receive per-layer adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSelector {
    /// Every body layer (the head is handled separately).
    AllLinear,
    /// The `q` and `v` projections of an attention block.
    QueryValue,
    Layers(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterInit {
    /// Zero update: `B = 0` with Gaussian `A`, `lambda = 0`, zero shift.
    ZeroUpdate,
    /// Every adapter tensor Gaussian with the given std (non-identity start,
    /// used for probing merge and confinement properties).
    Seeded { std: f64 },
}

/// Structure of the learned input shift `delta`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftMapSpec {
    /// Hidden ReLU width; `None` gives a single linear map `d -> d`.
    pub hidden: Option<usize>,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: Option<usize>,
    pub targets: TargetSelector,
    pub init: AdapterInit,
    pub seed: u64,
    /// Whether the task head trains. `None` means the per-kind default: on
    /// for everything except the input shift, which keeps the whole
    /// pre-trained model frozen.
    pub train_head: Option<bool>,
    pub shift: ShiftMapSpec,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind) -> Self {
        AdapterSpec {
            kind,
            rank: None,
            targets: TargetSelector::AllLinear,
            init: AdapterInit::ZeroUpdate,
            seed: 0,
            train_head: None,
            shift: ShiftMapSpec::default(),
        }
    }

    pub fn full_ft() -> Self {
        AdapterSpec::new(AdapterKind::FullFt)
    }

    pub fn linear_probe() -> Self {
        AdapterSpec::new(AdapterKind::LinearProbe)
    }

    pub fn lora(rank: usize) -> Self {
        AdapterSpec {
            rank: Some(rank),
            ..AdapterSpec::new(AdapterKind::Lora)
        }
    }

    pub fn lorfa(rank: usize) -> Self {
        AdapterSpec {
            rank: Some(rank),
            ..AdapterSpec::new(AdapterKind::Lorfa)
        }
    }

    pub fn vefa() -> Self {
        AdapterSpec::new(AdapterKind::Vefa)
    }

    pub fn input_shift() -> Self {
        AdapterSpec::new(AdapterKind::InputShift)
    }

    pub fn with_targets(mut self, targets: TargetSelector) -> Self {
        self.targets = targets;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: AdapterInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_train_head(mut self, on: bool) -> Self {
        self.train_head = Some(on);
        self
    }

    pub fn with_shift(mut self, shift: ShiftMapSpec) -> Self {
        self.shift = shift;
        self
    }

    pub fn trains_head(&self) -> bool {
        self.train_head.unwrap_or(self.kind != AdapterKind::InputShift)
    }

    /// Short label such as `lora(r=2)`.
    pub fn label(&self) -> String {
        match self.rank {
            Some(r) if self.kind.is_rank_bearing() => format!("{}(r={r})", self.kind),
            _ => self.kind.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_rank_bearing(), self.rank) {
            (true, None) => return Err(Error::Adapter(format!("{} needs a rank", self.kind))),
            (true, Some(0)) => return Err(Error::Adapter("rank must be at least 1".into())),
            (false, Some(_)) => return Err(Error::Adapter(format!("{} carries no rank", self.kind))),
            _ => {}
        }
        if let AdapterInit::Seeded { std } = self.init {
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::Adapter(format!("seeded init std must be positive, got {std}")));
            }
        }
        if self.shift.hidden == Some(0) {
            return Err(Error::Adapter("shift map hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Rank check against a concrete `(p, q)`: `2 r <= min(p, q)`.
    fn check_rank(&self, dims: (usize, usize)) -> Result<()> {
        if let Some(r) = self.rank {
            let m = dims.0.min(dims.1);
            if 2 * r > m {
                return Err(Error::Adapter(format!(
                    "rank {r} too large for a {}x{} layer (need r <= {})",
                    dims.0,
                    dims.1,
                    m / 2
                )));
            }
        }
        Ok(())
    }
}

/// Trainable state of a per-layer adapter, or the input shift map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdapterState {
    /// `A: r x q`, `B: p x r`.
    Lora { a: Tensor, b: Tensor },
    /// `A: r x q`, `B: q x r`.
    Lorfa { a: Tensor, b: Tensor },
    /// Diagonal of the input scaling, `q x 1`.
    Vefa { lambda: Tensor },
    InputShift(ShiftMap),
}

impl AdapterState {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterState::Lora { .. } => AdapterKind::Lora,
            AdapterState::Lorfa { .. } => AdapterKind::Lorfa,
            AdapterState::Vefa { .. } => AdapterKind::Vefa,
            AdapterState::InputShift(_) => AdapterKind::InputShift,
        }
    }

    /// Fresh state for a `(p, q)` layer.
    pub fn init(spec: &AdapterSpec, dims: (usize, usize), rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        spec.check_rank(dims)?;
        let (p, q) = dims;
        let a_std = (1.0 / q as f64).sqrt();
        let b_init = |shape, rng: &mut Rng| match spec.init {
            AdapterInit::ZeroUpdate => Tensor::zeros(shape),
            AdapterInit::Seeded { std } => Tensor::randn(shape, rng, std),
        };
        match spec.kind {
            AdapterKind::Lora | AdapterKind::Lorfa => {
                let r = spec.rank.unwrap_or(1);
                let a_std = match spec.init {
                    AdapterInit::ZeroUpdate => a_std,
                    AdapterInit::Seeded { std } => std,
                };
                let a = Tensor::randn((r, q), rng, a_std)?;
                if spec.kind == AdapterKind::Lora {
                    let b = b_init((p, r), rng)?;
                    Ok(AdapterState::Lora { a, b })
                } else {
                    let b = b_init((q, r), rng)?;
                    Ok(AdapterState::Lorfa { a, b })
                }
            }
            AdapterKind::Vefa => Ok(AdapterState::Vefa {
                lambda: b_init((q, 1), rng)?,
            }),
            AdapterKind::InputShift => Ok(AdapterState::InputShift(ShiftMap::init(q, spec, rng)?)),
            k => Err(Error::UnsupportedKind {
                op: "adapter state",
                kind: k.to_string(),
            }),
        }
    }

    /// Checks tensor shapes against a `(p, q)` layer.
    pub fn check_layer(&self, (p, q): (usize, usize)) -> Result<()> {
        let bad = |what: &str, got: (usize, usize)| {
            Err(Error::Adapter(format!("{what} has shape {got:?}, incompatible with a {p}x{q} layer")))
        };
        match self {
            AdapterState::Lora { a, b } => {
                let r = a.rows();
                if a.shape() != (r, q) {
                    return bad("LoRA A", a.shape());
                }
                if b.shape() != (p, r) {
                    return bad("LoRA B", b.shape());
                }
            }
            AdapterState::Lorfa { a, b } => {
                let r = a.rows();
                if a.shape() != (r, q) {
                    return bad("LoRFA A", a.shape());
                }
                if b.shape() != (q, r) {
                    return bad("LoRFA B", b.shape());
                }
            }
            AdapterState::Vefa { lambda } => {
                if lambda.shape() != (q, 1) {
                    return bad("VeFA lambda", lambda.shape());
                }
            }
            AdapterState::InputShift(m) => m.check_width(q)?,
        }
        Ok(())
    }

    pub(crate) fn visit<'a>(&'a self, mut f: impl FnMut(Slot, &'a Tensor)) {
        match self {
            AdapterState::Lora { a, b } | AdapterState::Lorfa { a, b } => {
                f(Slot::AdapterA, a);
                f(Slot::AdapterB, b);
            }
            AdapterState::Vefa { lambda } => f(Slot::Lambda, lambda),
            AdapterState::InputShift(m) => m.visit(f),
        }
    }

    pub(crate) fn slot_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        match (self, slot) {
            (AdapterState::Lora { a, .. } | AdapterState::Lorfa { a, .. }, Slot::AdapterA) => Some(a),
            (AdapterState::Lora { b, .. } | AdapterState::Lorfa { b, .. }, Slot::AdapterB) => Some(b),
            (AdapterState::Vefa { lambda }, Slot::Lambda) => Some(lambda),
            (AdapterState::InputShift(m), s) => m.slot_mut(s),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftLayer {
    /// `out x in`.
    pub weight: Tensor,
    /// `out x 1`.
    pub bias: Option<Tensor>,
}

/// `x -> x + delta(x)` where `delta` is a linear map or a one-hidden-layer
/// ReLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftMap {
    pub layers: Vec<ShiftLayer>,
}

impl ShiftMap {
    /// Zero map of width `d`: the final layer (and its bias) start at zero.
    pub fn init(d: usize, spec: &AdapterSpec, rng: &mut Rng) -> Result<Self> {
        let bias = |n: usize| -> Result<Option<Tensor>> {
            if spec.shift.bias {
                Ok(Some(Tensor::zeros((n, 1))?))
            } else {
                Ok(None)
            }
        };
        let last = |rows, cols, rng: &mut Rng| match spec.init {
            AdapterInit::ZeroUpdate => Tensor::zeros((rows, cols)),
            AdapterInit::Seeded { std } => Tensor::randn((rows, cols), rng, std),
        };
        let layers = match spec.shift.hidden {
            None => vec![ShiftLayer {
                weight: last(d, d, rng)?,
                bias: bias(d)?,
            }],
            Some(h) => vec![
                ShiftLayer {
                    weight: Tensor::randn((h, d), rng, (2.0 / d as f64).sqrt())?,
                    bias: bias(h)?,
                },
                ShiftLayer {
                    weight: last(d, h, rng)?,
                    bias: bias(d)?,
                },
            ],
        };
        Ok(ShiftMap { layers })
    }

    pub fn width(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn check_width(&self, d: usize) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::Adapter("empty shift map".into()))?;
        let last = self.layers.last().unwrap_or(first);
        if first.weight.cols() != d || last.weight.rows() != d {
            return Err(Error::Adapter(format!(
                "shift map {}->{} does not fit input width {d}",
                first.weight.cols(),
                last.weight.rows()
            )));
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::Adapter("shift map layers do not chain".into()));
            }
        }
        for l in &self.layers {
            if let Some(b) = &l.bias {
                if b.shape() != (l.weight.rows(), 1) {
                    return Err(Error::Adapter("shift map bias shape".into()));
                }
            }
        }
        Ok(())
    }

    /// Records `x + delta(x)` on the tape; shift parameters are trainable.
    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let delta = self.delta_on_tape(tape, x, binder)?;
        tape.add(x, delta)
    }

    fn delta_on_tape(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let w = binder.param(tape, ParamKey::new(Site::Input, Slot::ShiftWeight(i)), &l.weight, true);
            let wt = tape.transpose(w)?;
            h = tape.matmul(h, wt)?;
            if let Some(b) = &l.bias {
                let bv = binder.param(tape, ParamKey::new(Site::Input, Slot::ShiftBias(i)), b, true);
                h = add_bias(tape, h, bv)?;
            }
            if i + 1 < n {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `delta(x)` for a `batch x d` input.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.delta_on_tape(&mut tape, xv, &mut Binder::default())?;
        Ok(tape.value(out).clone())
    }

    pub(crate) fn visit<'a>(&'a self, mut f: impl FnMut(Slot, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(Slot::ShiftWeight(i), &l.weight);
            if let Some(b) = &l.bias {
                f(Slot::ShiftBias(i), b);
            }
        }
    }

    pub(crate) fn slot_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        match slot {
            Slot::ShiftWeight(i) => Some(&mut self.layers.get_mut(i)?.weight),
            Slot::ShiftBias(i) => self.layers.get_mut(i)?.bias.as_mut(),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }
}

/// `h + 1 b^T` for `h: batch x p`, `b: p x 1`.
fn add_bias(tape: &mut Tape, h: Var, b: Var) -> Result<Var> {
    let rows = tape.value(h).rows();
    let ones = tape.constant(Tensor::full((rows, 1), 1.0)?);
    let bt = tape.transpose(b)?;
    let tiled = tape.matmul(ones, bt)?;
    tape.add(h, tiled)
}

/// Records one layer's effective transform on `x: batch x q`.
pub(crate) fn layer_on_tape(
    tape: &mut Tape,
    layer: &LayerWeights,
    site: Site,
    x: Var,
    binder: &mut Binder,
) -> Result<Var> {
    let (p, q) = layer.dims();
    let xs = tape.value(x).shape();
    if xs.1 != q {
        return Err(Error::Shape {
            op: "layer input",
            lhs: xs,
            rhs: (p, q),
        });
    }
    let key = |slot| ParamKey::new(site, slot);
    let w0 = binder.param(tape, key(Slot::Weight), &layer.w0, !layer.frozen);
    let w0t = tape.transpose(w0)?;
    let out = match &layer.adapter {
        None => tape.matmul(x, w0t)?,
        Some(AdapterState::Lora { a, b }) => {
            let av = binder.param(tape, key(Slot::AdapterA), a, true);
            let bv = binder.param(tape, key(Slot::AdapterB), b, true);
            let base = tape.matmul(x, w0t)?;
            let at = tape.transpose(av)?;
            let bt = tape.transpose(bv)?;
            let xa = tape.matmul(x, at)?;
            let update = tape.matmul(xa, bt)?;
            tape.add(base, update)?
        }
        Some(AdapterState::Lorfa { a, b }) => {
            let av = binder.param(tape, key(Slot::AdapterA), a, true);
            let bv = binder.param(tape, key(Slot::AdapterB), b, true);
            let at = tape.transpose(av)?;
            let bt = tape.transpose(bv)?;
            let xa = tape.matmul(x, at)?;
            let shift = tape.matmul(xa, bt)?;
            let shifted = tape.add(x, shift)?;
            tape.matmul(shifted, w0t)?
        }
        Some(AdapterState::Vefa { lambda }) => {
            let lv = binder.param(tape, key(Slot::Lambda), lambda, true);
            let d = tape.diag(lv)?;
            let scaled = tape.matmul(x, d)?;
            let shifted = tape.add(x, scaled)?;
            tape.matmul(shifted, w0t)?
        }
        Some(AdapterState::InputShift(_)) => {
            return Err(Error::UnsupportedKind {
                op: "per-layer forward (the input shift applies at model input only)",
                kind: AdapterKind::InputShift.to_string(),
            })
        }
    };
    match &layer.bias {
        Some(b) => {
            let bv = binder.param(tape, key(Slot::Bias), b, !layer.frozen);
            add_bias(tape, out, bv)
        }
        None => Ok(out),
    }
}

/// Output of one adapted layer for a `batch x q` input.
pub fn effective_forward(layer: &LayerWeights, x: &Tensor) -> Result<Tensor> {
    if let Some(a) = &layer.adapter {
        a.check_layer(layer.dims())?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layer_on_tape(&mut tape, layer, Site::Layer(0), xv, &mut Binder::default())?;
    Ok(tape.value(out).clone())
}

/// Closed-form effective weight `W'` with `x W'^T == effective_forward`
/// (bias excluded).
pub fn merge(layer: &LayerWeights) -> Result<Tensor> {
    let w0 = &layer.w0;
    match &layer.adapter {
        None => Err(Error::Adapter("merge needs an attached adapter".into())),
        Some(AdapterState::Lora { a, b }) => w0.add(&b.matmul(a)?),
        Some(AdapterState::Lorfa { a, b }) => {
            let q = w0.cols();
            let inner = Tensor::identity(q)?.add(&b.matmul(a)?)?;
            w0.matmul(&inner)
        }
        Some(AdapterState::Vefa { lambda }) => {
            let (p, q) = w0.shape();
            let mut data = w0.data().to_vec();
            for r in 0..p {
                for c in 0..q {
                    data[r * q + c] *= 1.0 + lambda.data()[c];
                }
            }
            Tensor::new(p, q, data)
        }
        Some(AdapterState::InputShift(_)) => Err(Error::UnsupportedKind {
            op: "merge",
            kind: AdapterKind::InputShift.to_string(),
        }),
    }
}

/// `||(I - P)(W' - W0)||_F` with `P` the orthogonal projector onto the
/// column space of `W0` (singular values at or below `1e-10 sigma_max`
/// treated as zero).
pub fn column_space_residual(layer: &LayerWeights) -> Result<f64> {
    let update = merge(layer)?.sub(&layer.w0)?;
    linalg::residual_outside_column_space(&layer.w0, &update)
}

/// Indices of body layers a per-layer adapter attaches to.
pub fn target_layers(spec: &AdapterSpec, model: &Model) -> Result<Vec<usize>> {
    match &spec.targets {
        TargetSelector::AllLinear => Ok((0..model.layers.len()).collect()),
        TargetSelector::QueryValue => {
            if model.kind != ModelKind::AttentionBlock {
                return Err(Error::Adapter("q/v targeting needs an attention block".into()));
            }
            Ok(["q", "v"].iter().filter_map(|n| model.layer_index(n)).collect())
        }
        TargetSelector::Layers(idx) => {
            if let Some(&i) = idx.iter().find(|&&i| i >= model.layers.len()) {
                return Err(Error::Adapter(format!("target layer {i} out of range")));
            }
            Ok(idx.clone())
        }
    }
}

/// Configures `model` for `spec`: sets frozen flags, replaces any existing
/// adapters, and initializes fresh adapter state from `spec.seed`.
pub fn attach(model: &mut Model, spec: &AdapterSpec) -> Result<()> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    for l in &mut model.layers {
        l.weights.adapter = None;
    }
    model.input_shift = None;
    model.freeze_all();
    match spec.kind {
        AdapterKind::FullFt => {
            for l in &mut model.layers {
                l.weights.frozen = false;
            }
        }
        AdapterKind::LinearProbe => {
            if model.head.is_none() {
                return Err(Error::Adapter("linear probe needs a task head".into()));
            }
        }
        AdapterKind::Lora | AdapterKind::Lorfa | AdapterKind::Vefa => {
            let targets = target_layers(spec, model)?;
            for &i in &targets {
                spec.check_rank(model.layers[i].weights.dims())?;
            }
            for i in targets {
                let dims = model.layers[i].weights.dims();
                model.layers[i].weights.adapter = Some(AdapterState::init(spec, dims, &mut rng)?);
            }
        }
        AdapterKind::InputShift => {
            model.input_shift = Some(ShiftMap::init(model.input_dim(), spec, &mut rng)?);
        }
    }
    let head_on = spec.kind == AdapterKind::LinearProbe || spec.trains_head();
    if let Some(h) = &mut model.head {
        h.frozen = !head_on;
    }
    Ok(())
}

/// Verifies that `model` is configured the way `attach(spec)` leaves it.
pub fn check_attached(model: &Model, spec: &AdapterSpec) -> Result<()> {
    let mismatch = |what: String| Err(Error::Adapter(format!("model not configured for {}: {what}", spec.label())));
    match spec.kind {
        AdapterKind::Lora | AdapterKind::Lorfa | AdapterKind::Vefa => {
            for i in target_layers(spec, model)? {
                match &model.layers[i].weights.adapter {
                    Some(a) if a.kind() == spec.kind => {}
                    _ => return mismatch(format!("layer {i} lacks its adapter")),
                }
            }
        }
        AdapterKind::InputShift if model.input_shift.is_none() => return mismatch("no input shift".into()),
        AdapterKind::FullFt if model.layers.iter().any(|l| l.weights.frozen) => {
            return mismatch("frozen body layer".into())
        }
        _ => {}
    }
    if spec.kind != AdapterKind::FullFt && model.layers.iter().any(|l| !l.weights.frozen) {
        return mismatch("unfrozen body layer".into());
    }
    Ok(())
}

/// Trainable parameter counts under a spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapter: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.adapter + self.head
    }
}

/// Adapter parameters for per-layer kinds over `(p, q)` target shapes:
/// LoRA `r (p + q)`, LoRFA `2 r q`, VeFA `q`, full FT `p q`.
pub fn param_count_for_shapes(kind: AdapterKind, rank: Option<usize>, shapes: &[(usize, usize)]) -> Result<usize> {
    let r = rank.unwrap_or(0);
    if kind.is_rank_bearing() && r == 0 {
        return Err(Error::Adapter(format!("{kind} needs a rank")));
    }
    Ok(shapes
        .iter()
        .map(|&(p, q)| match kind {
            AdapterKind::Lora => r * (p + q),
            AdapterKind::Lorfa => 2 * r * q,
            AdapterKind::Vefa => q,
            AdapterKind::FullFt => p * q,
            AdapterKind::LinearProbe | AdapterKind::InputShift => 0,
        })
        .sum())
}

/// Parameter count `spec` would make trainable on `model`, computed from
/// shapes alone.
pub fn param_count(spec: &AdapterSpec, model: &Model) -> Result<ParamCount> {
    spec.validate()?;
    let bias_len = |w: &LayerWeights| w.bias.as_ref().map_or(0, Tensor::len);
    let adapter = match spec.kind {
        AdapterKind::FullFt => model.layers.iter().map(|l| l.weights.w0.len() + bias_len(&l.weights)).sum(),
        AdapterKind::LinearProbe => 0,
        AdapterKind::InputShift => {
            let d = model.input_dim();
            let b = usize::from(spec.shift.bias);
            match spec.shift.hidden {
                None => d * d + b * d,
                Some(h) => h * d + d * h + b * (h + d),
            }
        }
        kind => {
            let shapes: Vec<_> = target_layers(spec, model)?
                .into_iter()
                .map(|i| model.layers[i].weights.dims())
                .collect();
            param_count_for_shapes(kind, spec.rank, &shapes)?
        }
    };
    let head_on = spec.kind == AdapterKind::LinearProbe || spec.trains_head();
    let head = match (&model.head, head_on) {
        (Some(h), true) => h.w0.len() + bias_len(h),
        _ => 0,
    };
    Ok(ParamCount { adapter, head })
}

/// Fits an input shift in front of a fully frozen model by minimizing the
/// task loss of `f(x + delta(x))`. Returns the adapted copy.
pub fn estimate_input_shift(
    frozen_model: &Model,
    spec: &AdapterSpec,
    dtrain: &TrainData,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    if spec.kind != AdapterKind::InputShift {
        return Err(Error::UnsupportedKind {
            op: "estimate_input_shift",
            kind: spec.kind.to_string(),
        });
    }
    if frozen_model.trainable_parameters().1 != 0 {
        return Err(Error::Model("input shift estimation needs a fully frozen model".into()));
    }
    let mut model = frozen_model.clone();
    attach(&mut model, spec)?;
    let report = trainer::fit(&mut model, spec, dtrain, cfg)?;
    Ok((model, report))
}
