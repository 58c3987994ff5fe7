use featadapt::adapters::{self, AdapterInit, AdapterKind, AdapterSpec, AdapterState};
use featadapt::autodiff::Tape;
use featadapt::models::{Activation, Binder, Layer, LayerWeights, Model, ModelKind, ParamKey, Site, Slot};
use featadapt::trainer::{self, LossKind, OptimizerKind, StopRule, Targets, TrainConfig, TrainData};
use featadapt::{Rng, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Residual of `m` outside col(w0), from the eigenvectors of `w0 w0^T`.
/// (nalgebra's SVD loses accuracy on exactly rank-deficient inputs, the
/// symmetric eigensolver does not.) Test matrices have a clear rank gap,
/// so a loose `1e-8 lambda_max` cutoff is safe.
fn oracle_residual(w0: &Tensor, m: &Tensor) -> f64 {
    let a = to_na(w0);
    let eig = (&a * a.transpose()).symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let cols: Vec<_> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-8 * lmax)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let mm = to_na(m);
    let mut proj = DMatrix::zeros(mm.nrows(), mm.ncols());
    for c in &cols {
        proj += c * (c.transpose() * &mm);
    }
    (mm - proj).norm()
}

fn rank_deficient(p: usize, q: usize, rank: usize, rng: &mut Rng) -> Tensor {
    let l = Tensor::randn((p, rank), rng, 1.0 / (rank as f64).sqrt()).unwrap();
    let r = Tensor::randn((rank, q), rng, 1.0 / (q as f64).sqrt()).unwrap();
    l.matmul(&r).unwrap()
}

fn single_layer(w0: Tensor) -> Model {
    Model::new(
        ModelKind::Mlp,
        vec![Layer {
            name: "l".into(),
            weights: LayerWeights::frozen(w0),
            activation: Activation::Identity,
        }],
        None,
    )
    .unwrap()
}

fn regression(q: usize, p: usize, rng: &mut Rng) -> TrainData {
    let x = Tensor::randn((32, q), rng, 1.0).unwrap();
    let y = Tensor::randn((32, p), rng, 1.0).unwrap();
    TrainData::new(x, Targets::Values(y)).unwrap()
}

fn sgd(steps: usize) -> TrainConfig {
    TrainConfig {
        lr_adapter: 0.05,
        lr_head: 0.05,
        epochs: steps,
        batch_size: 32,
        loss: Some(LossKind::Mse),
        stop: StopRule::FixedEpochs,
        optimizer: OptimizerKind::Sgd,
        shuffle: false,
        ..TrainConfig::default()
    }
}

fn seeded(spec: AdapterSpec, seed: u64) -> AdapterSpec {
    spec.with_seed(seed).with_init(AdapterInit::Seeded { std: 0.3 })
}

#[test]
fn zero_init_is_exact_identity_for_every_kind() {
    let mut rng = Rng::new(0);
    let base = Model::mlp(6, &[8, 8], 4, &mut rng).unwrap();
    let x = Tensor::randn((100, 6), &mut rng, 1.0).unwrap();
    let y0 = base.forward(&x).unwrap();
    for spec in [AdapterSpec::lora(2), AdapterSpec::lorfa(2), AdapterSpec::vefa(), AdapterSpec::input_shift()] {
        let mut m = base.clone();
        adapters::attach(&mut m, &spec).unwrap();
        assert_eq!(m.forward(&x).unwrap().max_abs_diff(&y0).unwrap(), 0.0, "{}", spec.label());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_weight_reproduces_forward(seed in 0u64..1000, kind in 0usize..3) {
        let mut rng = Rng::new(seed);
        let (p, q) = (6, 5);
        let spec = seeded([AdapterSpec::lora(2), AdapterSpec::lorfa(2), AdapterSpec::vefa()][kind].clone(), seed);
        let layer = LayerWeights::frozen(Tensor::randn((p, q), &mut rng, 1.0).unwrap())
            .with_adapter(AdapterState::init(&spec, (p, q), &mut rng).unwrap())
            .unwrap();
        let x = Tensor::randn((7, q), &mut rng, 1.0).unwrap();
        let direct = adapters::effective_forward(&layer, &x).unwrap();
        let merged = x.matmul(&adapters::merge(&layer).unwrap().transpose()).unwrap();
        prop_assert!(direct.max_abs_diff(&merged).unwrap() <= 1e-12);
    }

    #[test]
    fn feature_space_updates_stay_in_column_space(seed in 0u64..1000, rank in 1usize..4) {
        let mut rng = Rng::new(seed);
        let w0 = rank_deficient(6, 6, rank, &mut rng);
        for spec in [AdapterSpec::lorfa(2), AdapterSpec::vefa()] {
            let mut layer = LayerWeights::frozen(w0.clone());
            layer.adapter = Some(AdapterState::init(&seeded(spec, seed), (6, 6), &mut rng).unwrap());
            let update = adapters::merge(&layer).unwrap().sub(&w0).unwrap();
            prop_assert!(oracle_residual(&w0, &update) <= 1e-10);
            prop_assert!(adapters::column_space_residual(&layer).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn residual_matches_svd_oracle(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let w0 = rank_deficient(7, 5, 2, &mut rng);
        let mut layer = LayerWeights::frozen(w0.clone());
        layer.adapter = Some(AdapterState::init(&seeded(AdapterSpec::lora(2), seed), (7, 5), &mut rng).unwrap());
        let update = adapters::merge(&layer).unwrap().sub(&w0).unwrap();
        let ours = adapters::column_space_residual(&layer).unwrap();
        prop_assert!((ours - oracle_residual(&w0, &update)).abs() <= 1e-9 * (1.0 + ours));
    }

    #[test]
    fn vefa_scales_columns(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let w0 = Tensor::randn((4, 3), &mut rng, 1.0).unwrap();
        let lambda = Tensor::randn((3, 1), &mut rng, 1.0).unwrap();
        let layer = LayerWeights::frozen(w0.clone())
            .with_adapter(AdapterState::Vefa { lambda: lambda.clone() })
            .unwrap();
        let merged = adapters::merge(&layer).unwrap();
        for c in 0..3 {
            for r in 0..4 {
                let want = w0.get(r, c) * (1.0 + lambda.data()[c]);
                prop_assert!((merged.get(r, c) - want).abs() <= 1e-15 * (1.0 + want.abs()));
            }
        }
    }
}

#[test]
fn lorfa_full_rank_represents_any_diagonal() {
    // With r = q, B A can be any q x q matrix, so W0 (I + B A) covers VeFA.
    let mut rng = Rng::new(3);
    let q = 4;
    let w0 = Tensor::randn((8, q), &mut rng, 1.0).unwrap();
    let lambda = Tensor::column_vector(&[0.5, -0.25, 2.0, -1.0]).unwrap();
    let vefa = LayerWeights::frozen(w0.clone())
        .with_adapter(AdapterState::Vefa { lambda: lambda.clone() })
        .unwrap();
    let lorfa = LayerWeights::frozen(w0)
        .with_adapter(AdapterState::Lorfa {
            a: Tensor::identity(q).unwrap(),
            b: Tensor::diag(&lambda).unwrap(),
        })
        .unwrap();
    let diff = adapters::merge(&vefa).unwrap().max_abs_diff(&adapters::merge(&lorfa).unwrap()).unwrap();
    assert!(diff <= 1e-15, "{diff}");
}

#[test]
fn trained_feature_adapters_stay_in_column_space() {
    for seed in 0..5u64 {
        let mut rng = Rng::new(100 + seed);
        let w0 = rank_deficient(8, 8, 3, &mut rng);
        let data = regression(8, 8, &mut rng);
        let model = single_layer(w0.clone());
        for spec in [AdapterSpec::lorfa(2), AdapterSpec::vefa(), AdapterSpec::lora(2)] {
            let spec = spec.with_seed(seed);
            let mut m = model.clone();
            adapters::attach(&mut m, &spec).unwrap();
            trainer::fit(&mut m, &spec, &data, &sgd(200)).unwrap();
            assert_eq!(m.layers[0].weights.w0, w0, "W0 changed");
            let r = adapters::column_space_residual(&m.layers[0].weights).unwrap();
            if spec.kind == AdapterKind::Lora {
                assert!(r > 1e-3, "lora residual {r}");
            } else {
                assert!(r <= 1e-8, "{} residual {r}", spec.label());
            }
        }
    }
}

/// Gradients of an MSE loss w.r.t. every trainable tensor, checked against
/// central differences computed by perturbing the model itself.
fn check_param_grads(model: &Model, x: &Tensor, y: &Tensor) -> f64 {
    let loss_of = |m: &Model| {
        let pred = m.forward(x).unwrap();
        trainer::loss(&pred, &Targets::Values(y.clone()), LossKind::Mse).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut binder = Binder::default();
    let out = model.forward_on_tape(&mut tape, xv, &mut binder).unwrap();
    let loss = trainer::loss_on_tape(&mut tape, out, &Targets::Values(y.clone()), LossKind::Mse).unwrap();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (key, var) in &binder.bound {
        let analytic = grads.get_or_zeros(*var).unwrap();
        let n = model.param(*key).unwrap().len();
        for k in 0..n {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let t = m.param_mut(*key).unwrap();
                let mut data = t.data().to_vec();
                data[k] += delta;
                *t = Tensor::new(t.rows(), t.cols(), data).unwrap();
                loss_of(&m)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2));
        }
    }
    worst
}

#[test]
fn adapter_parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(9);
    let base = Model::mlp(4, &[5], 3, &mut rng).unwrap();
    let x = Tensor::randn((6, 4), &mut rng, 1.0).unwrap();
    let y = Tensor::randn((6, 3), &mut rng, 1.0).unwrap();
    let shift = featadapt::adapters::ShiftMapSpec { hidden: Some(3), bias: true };
    let specs = [
        AdapterSpec::full_ft(),
        AdapterSpec::linear_probe(),
        AdapterSpec::lora(1),
        AdapterSpec::lorfa(2),
        AdapterSpec::vefa(),
        AdapterSpec::input_shift(),
        AdapterSpec::input_shift().with_shift(shift),
    ];
    for spec in specs {
        let spec = spec.with_seed(4).with_init(AdapterInit::Seeded { std: 0.4 });
        let mut m = base.clone();
        adapters::attach(&mut m, &spec).unwrap();
        let err = check_param_grads(&m, &x, &y);
        assert!(err <= 1e-6, "{}: rel err {err}", spec.label());
    }
}

#[test]
fn attention_adapter_gradients_match_finite_differences() {
    let mut rng = Rng::new(12);
    let base = Model::attention_block(4, &mut rng).unwrap();
    let x = Tensor::randn((3, 4), &mut rng, 1.0).unwrap();
    let y = Tensor::randn((3, 4), &mut rng, 1.0).unwrap();
    for spec in [AdapterSpec::lora(2), AdapterSpec::lorfa(1), AdapterSpec::vefa()] {
        let spec = spec
            .with_targets(featadapt::adapters::TargetSelector::QueryValue)
            .with_init(AdapterInit::Seeded { std: 0.4 });
        let mut m = base.clone();
        adapters::attach(&mut m, &spec).unwrap();
        assert!(m.layers[1].weights.adapter.is_none() && m.layers[3].weights.adapter.is_none());
        let err = check_param_grads(&m, &x, &y);
        assert!(err <= 1e-6, "{}: rel err {err}", spec.label());
    }
}

#[test]
fn linear_probe_touches_only_the_head() {
    let mut rng = Rng::new(5);
    let mut m = Model::mlp(4, &[6], 3, &mut rng).unwrap();
    let spec = AdapterSpec::linear_probe();
    adapters::attach(&mut m, &spec).unwrap();
    let before = m.clone();
    let x = Tensor::randn((30, 4), &mut rng, 1.0).unwrap();
    let labels = (0..30).map(|i| i % 3).collect();
    let data = TrainData::new(x, Targets::Labels(labels)).unwrap();
    trainer::fit(&mut m, &spec, &data, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
    assert_eq!(m.layers, before.layers);
    assert_ne!(m.head, before.head);
    let head = ParamKey::new(Site::Head, Slot::Weight);
    assert!(m.trainable_parameters().0.iter().all(|(k, _)| k.site == head.site));
}

#[test]
fn rank_rule_enforced_on_attach() {
    let mut m = single_layer(Tensor::randn((8, 4), &mut Rng::new(0), 1.0).unwrap());
    assert!(adapters::attach(&mut m, &AdapterSpec::lora(2)).is_ok());
    assert!(adapters::attach(&mut m, &AdapterSpec::lora(3)).is_err());
    assert!(adapters::attach(&mut m, &AdapterSpec::lorfa(3)).is_err());
}

