//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use featadapt::autodiff::{gradcheck, GradCheck, Tape, Var};
use featadapt::{Result, Rng, Tensor};

#[derive(Clone, Copy, Debug)]
enum Op {
    MatmulW,
    AddC,
    SubC,
    MulC,
    AddS,
    MulS,
    Scale(f64),
    Relu,
    DoubleTranspose,
    DiagV,
    Softmax,
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    SumSquares,
    CrossEntropy,
}

/// A random graph over inputs `A (n x m), B (m x k), W (k x k), C (n x k),
/// s (1 x 1), v (k x 1)`: `X = A B`, then 2..7 random ops, then a reduction.
pub struct RandomGraph {
    pub inputs: Vec<Tensor>,
    ops: Vec<Op>,
    reduce: Reduce,
    labels: Vec<usize>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.below(4);
        let m = 1 + rng.below(4);
        let k = 2 + rng.below(3);
        let mut t = |shape| Tensor::randn(shape, &mut rng, 1.0).unwrap();
        let inputs = vec![t((n, m)), t((m, k)), t((k, k)), t((n, k)), t((1, 1)), t((k, 1))];
        let n_ops = 2 + rng.below(6);
        let ops = (0..n_ops)
            .map(|_| match rng.below(11) {
                0 => Op::MatmulW,
                1 => Op::AddC,
                2 => Op::SubC,
                3 => Op::MulC,
                4 => Op::AddS,
                5 => Op::MulS,
                6 => Op::Scale(rng.uniform(-2.0, 2.0)),
                7 => Op::Relu,
                8 => Op::DoubleTranspose,
                9 => Op::DiagV,
                _ => Op::Softmax,
            })
            .collect();
        let reduce = match rng.below(4) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            2 => Reduce::SumSquares,
            _ => Reduce::CrossEntropy,
        };
        let labels = (0..n).map(|_| rng.below(k)).collect();
        RandomGraph {
            inputs,
            ops,
            reduce,
            labels,
        }
    }

    pub fn build(&self, tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let mut x = tape.matmul(v[0], v[1])?;
        for op in &self.ops {
            x = match *op {
                Op::MatmulW => tape.matmul(x, v[2])?,
                Op::AddC => tape.add(x, v[3])?,
                Op::SubC => tape.sub(v[3], x)?,
                Op::MulC => tape.mul(x, v[3])?,
                Op::AddS => tape.add(v[4], x)?,
                Op::MulS => tape.mul(x, v[4])?,
                Op::Scale(c) => tape.scale(x, c)?,
                Op::Relu => tape.relu(x)?,
                Op::DoubleTranspose => {
                    let t = tape.transpose(x)?;
                    tape.transpose(t)?
                }
                Op::DiagV => {
                    let d = tape.diag(v[5])?;
                    tape.matmul(x, d)?
                }
                Op::Softmax => tape.softmax_rows(x)?,
            };
        }
        match self.reduce {
            Reduce::Sum => tape.sum(x),
            Reduce::Mean => tape.mean(x),
            Reduce::SumSquares => {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            }
            Reduce::CrossEntropy => tape.cross_entropy(x, &self.labels),
        }
    }

    pub fn check(&self) -> GradCheck {
        gradcheck(|tape, v| self.build(tape, v), &self.inputs, 1e-5).unwrap()
    }
}
