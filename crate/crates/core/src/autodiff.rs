//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for each forward pass. Leaves are registered
//! with [`Tape::leaf`] (trainable) or [`Tape::constant`]; every operation
//! appends a node whose inputs already exist on the tape, so node order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// Which operand of a binary elementwise op is a broadcast 1x1 scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(ElementwiseOp, Var, Var, Broadcast),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    /// Mean cross-entropy; caches the row softmax of the logits.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// require grad or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], with a zero tensor for detached variables.
    pub fn get_or_zeros(&self, v: Var) -> Result<Tensor> {
        match self.get(v) {
            Some(g) => Ok(g.clone()),
            None => {
                let shape = *self.shapes.get(v.0).ok_or(Error::UnknownVar(v.0))?;
                Tensor::zeros(shape)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a leaf with an explicit `requires_grad` flag.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Pointwise add/sub/mul. Operands must have equal shapes, or one of
    /// them must be 1x1, in which case it is broadcast.
    pub fn elementwise(&mut self, a: Var, b: Var, op: ElementwiseOp) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let broadcast = if ta.shape() == tb.shape() {
            Broadcast::None
        } else if ta.shape() == (1, 1) {
            Broadcast::Lhs
        } else if tb.shape() == (1, 1) {
            Broadcast::Rhs
        } else {
            return Err(Error::Shape {
                op: match op {
                    ElementwiseOp::Add => "add",
                    ElementwiseOp::Sub => "sub",
                    ElementwiseOp::Mul => "mul",
                },
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        };
        let f = |x: f64, y: f64| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
        };
        let value = match broadcast {
            Broadcast::None => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(ta.rows(), ta.cols(), data)
            }
            Broadcast::Lhs => {
                let s = ta.data()[0];
                tb.map(|y| f(s, y))
            }
            Broadcast::Rhs => {
                let s = tb.data()[0];
                ta.map(|x| f(x, s))
            }
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Elementwise(op, a, b, broadcast), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseOp::Mul)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.node(a)?.value.scale(c);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.transpose();
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    /// Square diagonal matrix from a column or row vector.
    pub fn diag(&mut self, v: Var) -> Result<Var> {
        let value = Tensor::diag(&self.node(v)?.value)?;
        let rg = self.needs(&[v]);
        Ok(self.push(value, Op::Diag(v), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::from_parts(1, 1, vec![self.node(a)?.value.sum()]);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let value = Tensor::from_parts(1, 1, vec![t.sum() / t.len() as f64]);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(&self.node(a)?.value);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Mean cross-entropy of row logits against integer labels, computed
    /// through a max-shifted log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        if labels.len() != t.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= t.cols()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: t.cols(),
            });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let probs = softmax_rows(t);
        let value = Tensor::from_parts(1, 1, vec![total / labels.len() as f64]);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every variable that requires grad
    /// and lies in the ancestry of `loss` gets `d loss / d var`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(root.value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(1, 1, vec![1.0]));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => *existing = existing.add(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(&tb.transpose())?)?;
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ta.transpose().matmul(g)?)?;
                }
            }
            Op::Elementwise(op, a, b, bc) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // Local gradients for each operand, at full output shape.
                let (ga, gb) = match op {
                    ElementwiseOp::Add => (g.clone(), g.clone()),
                    ElementwiseOp::Sub => (g.clone(), g.scale(-1.0)),
                    ElementwiseOp::Mul => {
                        let ga = match bc {
                            Broadcast::Rhs => g.scale(tb.data()[0]),
                            _ => g.mul(tb)?,
                        };
                        let gb = match bc {
                            Broadcast::Lhs => g.scale(ta.data()[0]),
                            _ => g.mul(ta)?,
                        };
                        (ga, gb)
                    }
                };
                let reduce = |t: Tensor| Tensor::from_parts(1, 1, vec![t.sum()]);
                let (ga, gb) = match bc {
                    Broadcast::None => (ga, gb),
                    Broadcast::Lhs => (reduce(ga), gb),
                    Broadcast::Rhs => (ga, reduce(gb)),
                };
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.rows(), x.cols(), data))?;
            }
            Op::Diag(v) => {
                let tv = &self.nodes[v.0].value;
                let n = tv.len();
                let data = (0..n).map(|i| g.get(i, i)).collect();
                self.accumulate(grads, *v, Tensor::from_parts(tv.rows(), tv.cols(), data))?;
            }
            Op::Sum(a) => {
                let (r, c) = self.nodes[a.0].value.shape();
                self.accumulate(grads, *a, Tensor::from_parts(r, c, vec![g.data()[0]; r * c]))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.nodes[a.0].value.shape();
                let s = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *a, Tensor::from_parts(r, c, vec![s; r * c]))?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(r, c, out))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = probs.shape();
                let s = g.data()[0] / r as f64;
                let mut out = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    out[i * c + y] -= 1.0;
                }
                out.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *logits, Tensor::from_parts(r, c, out))?;
            }
        }
        Ok(())
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_parts(r, c, out)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` position of the worst relative error.
    pub worst: (usize, usize),
    pub evaluations: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Denominator floor used by [`gradcheck`] so that near-zero gradients are
/// compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-2;

/// Checks the gradient of a scalar function of several tensors against
/// central finite differences with step `h`.
///
/// `f` receives a fresh tape and one trainable leaf per input and must
/// return a 1x1 variable.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        evaluations: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v)?;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            let mut probe = |x: f64| -> Result<f64> {
                work[i].update_with(|j, cur| if j == k { x } else { cur })?;
                let (t, _, o) = eval(&work)?;
                t.value(o).item()
            };
            let plus = probe(orig + h)?;
            let minus = probe(orig - h)?;
            probe(orig)?;
            report.evaluations += 2;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, k);
            }
        }
    }
    Ok(report)
}
