mod common;

use featadapt::adapters::{self, AdapterSpec, TargetSelector};
use featadapt::models::Model;
use featadapt::{Rng, Tensor};
use proptest::prelude::*;

#[test]
fn random_composite_graphs_match_finite_differences() {
    for seed in 1000..1100 {
        let g = common::RandomGraph::new(seed);
        let r = g.check();
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}

/// Scaled dot-product attention with explicit loops.
fn attention_oracle(x: &[[f64; 4]; 3], w: &[[[f64; 4]; 4]; 4]) -> [[f64; 4]; 3] {
    let proj = |m: &[[f64; 4]; 4], v: &[f64; 4]| -> [f64; 4] {
        let mut o = [0.0; 4];
        for (i, oi) in o.iter_mut().enumerate() {
            for j in 0..4 {
                *oi += m[i][j] * v[j];
            }
        }
        o
    };
    let q: Vec<[f64; 4]> = x.iter().map(|t| proj(&w[0], t)).collect();
    let k: Vec<[f64; 4]> = x.iter().map(|t| proj(&w[1], t)).collect();
    let v: Vec<[f64; 4]> = x.iter().map(|t| proj(&w[2], t)).collect();
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        let scores: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = [0.0; 4];
        for j in 0..3 {
            for c in 0..4 {
                ctx[c] += e[j] / z * v[j][c];
            }
        }
        out[i] = proj(&w[3], &ctx);
    }
    out
}

#[test]
fn attention_block_matches_loop_oracle() {
    let mut rng = Rng::new(21);
    let model = Model::attention_block(4, &mut rng).unwrap();
    let xt = Tensor::randn((3, 4), &mut rng, 1.0).unwrap();
    let mut x = [[0.0; 4]; 3];
    for (i, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = xt.get(i, j);
        }
    }
    let mut w = [[[0.0; 4]; 4]; 4];
    for (l, wl) in w.iter_mut().enumerate() {
        for (i, row) in wl.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = model.layers[l].weights.w0.get(i, j);
            }
        }
    }
    let want = attention_oracle(&x, &w);
    let got = model.attention_block_forward(&xt).unwrap();
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            assert!((got.get(i, j) - w).abs() <= 1e-10);
        }
    }

    // q/v adapters at init leave the block unchanged
    let mut adapted = model.clone();
    adapters::attach(&mut adapted, &AdapterSpec::lora(2).with_targets(TargetSelector::QueryValue)).unwrap();
    assert_eq!(adapted.forward(&xt).unwrap(), got);
}

#[test]
fn mlp_matches_straight_line_oracle() {
    let mut rng = Rng::new(4);
    let model = Model::mlp(3, &[5, 4], 2, &mut rng).unwrap();
    let x = Tensor::randn((6, 3), &mut rng, 1.0).unwrap();
    let got = model.forward(&x).unwrap();
    let dense = |w: &Tensor, b: &Tensor, h: &[f64], relu: bool| -> Vec<f64> {
        (0..w.rows())
            .map(|i| {
                let s = (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum::<f64>() + b.get(i, 0);
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    for r in 0..6 {
        let mut h = x.row(r).to_vec();
        for l in &model.layers {
            h = dense(&l.weights.w0, l.weights.bias.as_ref().unwrap(), &h, true);
        }
        let head = model.head.as_ref().unwrap();
        let out = dense(&head.w0, head.bias.as_ref().unwrap(), &h, false);
        for (c, v) in out.iter().enumerate() {
            assert!((got.get(r, c) - v).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, n in 1usize..5, m in 1usize..5, k in 1usize..5, l in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn((n, m), &mut rng, 1.0).unwrap();
        let b = Tensor::randn((m, k), &mut rng, 1.0).unwrap();
        let c = Tensor::randn((k, l), &mut rng, 1.0).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
    }

    #[test]
    fn transpose_reverses_products(seed in 0u64..10_000, n in 1usize..5, m in 1usize..5, k in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn((n, m), &mut rng, 1.0).unwrap();
        let b = Tensor::randn((m, k), &mut rng, 1.0).unwrap();
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }
}

#[test]
fn model_serialization_roundtrips_with_adapters() {
    let mut rng = Rng::new(8);
    let mut m = Model::mlp(4, &[6], 3, &mut rng).unwrap();
    adapters::attach(&mut m, &AdapterSpec::lorfa(2)).unwrap();
    let json = serde_json::to_string(&m).unwrap();
    let back: Model = serde_json::from_str(&json).unwrap();
    assert_eq!(back, m);
}
