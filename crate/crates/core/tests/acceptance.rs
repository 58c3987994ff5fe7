//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line under `cargo test`; exits nonzero on any FAIL.

mod common;

use std::time::{Duration, Instant};

use featadapt::adapters::{self, AdapterKind, AdapterSpec, AdapterState};
use featadapt::eem::{self, LurkingSystem, OneDExperiment, OneDMode};
use featadapt::experiments::{self, RunConfig};
use featadapt::metrics::{self, AccuracyBreakdown};
use featadapt::models::{Activation, Layer, LayerWeights, Model, ModelKind};
use featadapt::trainer::{self, LossKind, OptimizerKind, StopRule, Targets, TrainConfig, TrainData};
use featadapt::{Rng, Tensor};

const ZERO_INIT_TOL: f64 = 1e-12;
const COLSPACE_TOL: f64 = 1e-8;
const COUNTEREXAMPLE_MIN: f64 = 0.1;
const SLOPE_TOL: f64 = 1e-3;
const OPTIMUM: f64 = 7.64 / 4.17;
const RATIO_TOL: f64 = 1e-12;
const EEM_TOL: f64 = 1e-6;
const FORGETTING_MARGIN: f64 = 0.05;
const R2_TOL: f64 = 1e-12;
const WEIGHTED_MEAN_TOL: f64 = 1e-12;
const GRADCHECK_TOL: f64 = 1e-4;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

fn main() {
    type Criterion = (&'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("zero-init identity", 1, zero_init),
        ("column-space confinement", 10, column_space),
        ("1-D reproduction", 1, one_d),
        ("shift recovery", 5, shift_recovery),
        ("forgetting pattern", 120, forgetting),
        ("parameter budgets", 1, budgets),
        ("metric arithmetic", 1, metric_arithmetic),
        ("autodiff soundness", 10, autodiff),
        ("determinism", 120, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let dt = t.elapsed();
        let in_time = dt <= Duration::from_secs(*budget);
        let ok = res.ok && in_time;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {}. {name}: {} [{:.2}s of {budget}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            res.detail,
            dt.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn zero_init() -> Outcome {
    let mut rng = Rng::new(0);
    let base = Model::mlp(6, &[16, 16], 5, &mut rng).unwrap();
    let x = Tensor::randn((100, 6), &mut rng, 1.0).unwrap();
    let y0 = base.forward(&x).unwrap();
    let mut worst = 0.0f64;
    for spec in [AdapterSpec::lora(2), AdapterSpec::lorfa(2), AdapterSpec::vefa(), AdapterSpec::input_shift()] {
        let mut m = base.clone();
        adapters::attach(&mut m, &spec.with_seed(1)).unwrap();
        worst = worst.max(m.forward(&x).unwrap().max_abs_diff(&y0).unwrap());
    }
    outcome(worst <= ZERO_INIT_TOL, format!("max deviation {worst:.1e} <= {ZERO_INIT_TOL:.0e}"))
}

fn single_layer(w0: Tensor) -> Model {
    let layer = Layer {
        name: "l".into(),
        weights: LayerWeights::frozen(w0),
        activation: Activation::Identity,
    };
    Model::new(ModelKind::Mlp, vec![layer], None).unwrap()
}

fn column_space() -> Outcome {
    let cfg = TrainConfig {
        lr_adapter: 0.05,
        lr_head: 0.05,
        epochs: 200,
        batch_size: 32,
        loss: Some(LossKind::Mse),
        stop: StopRule::FixedEpochs,
        optimizer: OptimizerKind::Sgd,
        shuffle: false,
        ..TrainConfig::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let (p, q, rank) = (8, 8, 1 + rng.below(4));
        let l = Tensor::randn((p, rank), &mut rng, 1.0 / (rank as f64).sqrt()).unwrap();
        let r = Tensor::randn((rank, q), &mut rng, 1.0 / (q as f64).sqrt()).unwrap();
        let w0 = l.matmul(&r).unwrap();
        let x = Tensor::randn((32, q), &mut rng, 1.0).unwrap();
        let y = Tensor::randn((32, p), &mut rng, 1.0).unwrap();
        let data = TrainData::new(x, Targets::Values(y)).unwrap();
        for spec in [AdapterSpec::lorfa(2), AdapterSpec::vefa()] {
            let spec = spec.with_seed(seed);
            let mut m = single_layer(w0.clone());
            adapters::attach(&mut m, &spec).unwrap();
            trainer::fit(&mut m, &spec, &data, &cfg).unwrap();
            worst = worst.max(adapters::column_space_residual(&m.layers[0].weights).unwrap());
        }
    }

    // W0 only spans the first four coordinates; B A = e_8 1^T points out of it.
    let mut rng = Rng::new(7);
    let mut w0 = Tensor::zeros((8, 8)).unwrap();
    let top = Tensor::randn((4, 8), &mut rng, 1.0).unwrap();
    for i in 0..4 {
        for j in 0..8 {
            w0.set(i, j, top.get(i, j)).unwrap();
        }
    }
    let mut b = Tensor::zeros((8, 1)).unwrap();
    b.set(7, 0, 1.0).unwrap();
    let a = Tensor::new(1, 8, vec![1.0; 8]).unwrap();
    let lora = LayerWeights::frozen(w0).with_adapter(AdapterState::Lora { a, b }).unwrap();
    let counter = adapters::column_space_residual(&lora).unwrap();

    outcome(
        worst <= COLSPACE_TOL && counter > COUNTEREXAMPLE_MIN,
        format!("lorfa/vefa max residual {worst:.1e} <= {COLSPACE_TOL:.0e}, lora counterexample {counter:.3} > {COUNTEREXAMPLE_MIN}"),
    )
}

fn one_d() -> Outcome {
    let slope = |mode| {
        let t = eem::run_1d(&OneDExperiment::reference(mode)).unwrap();
        t.fitted_slope(eem::REFERENCE_SLOPE)
    };
    let (s1, s2) = (slope(OneDMode::WeightSpace), slope(OneDMode::FeatureSpace));
    let ratio = eem::gradient_ratio_at_init(eem::REFERENCE_SLOPE, &eem::REFERENCE_POINTS).unwrap();
    // equal step counts so the traces line up
    let fixed = |mode| {
        eem::run_1d(&OneDExperiment {
            steps: 2000,
            tol: None,
            ..OneDExperiment::reference(mode)
        })
        .unwrap()
    };
    let (w, f) = (fixed(OneDMode::WeightSpace), fixed(OneDMode::FeatureSpace));
    let dominated = eem::feature_loss_dominates(&w, &f);
    let ok = (s1 - OPTIMUM).abs() <= SLOPE_TOL
        && (s2 - OPTIMUM).abs() <= SLOPE_TOL
        && (ratio - 5.0).abs() <= RATIO_TOL
        && dominated;
    outcome(
        ok,
        format!(
            "slopes {s1:.6}, {s2:.6} vs {OPTIMUM:.6} (tol {SLOPE_TOL:.0e}), grad ratio {ratio} (tol {RATIO_TOL:.0e}), feature loss <= weight loss at every step (rel slack {:.0e}): {dominated}",
            eem::LOSS_TIE_REL
        ),
    )
}

fn shift_recovery() -> Outcome {
    let mut rng = Rng::new(0);
    let sys = LurkingSystem::random(4, 6, 1.5, 0.0, &mut rng).unwrap();
    let data = sys.sample(500, &mut rng).unwrap();
    let rec = eem::recover_delta(&sys, &data, &eem::recovery_config()).unwrap();
    outcome(
        rec.alignment_max <= EEM_TOL,
        format!("held-out max alignment error {:.1e} <= {EEM_TOL:.0e}", rec.alignment_max),
    )
}

fn forgetting_cfg(seed: u64, out: &std::path::Path) -> RunConfig {
    RunConfig {
        seed,
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn forgetting() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let cfg = forgetting_cfg(seed, &dir.path().join(seed.to_string()));
        let feature = cfg.feature_method.clone();
        let out = experiments::cmd_forgetting(&cfg).unwrap();
        let m = |r: &str, k: &str| out.metric(r, k).unwrap();
        let a = m("full-ft", "acc_seen") - m("frozen", "acc_seen");
        let full_min = m("full-ft", "acc_seen").min(m("full-ft", "acc_unseen"));
        let feat_min = m(&feature, "acc_seen").min(m(&feature, "acc_unseen"));
        let b = feat_min - full_min;
        let c = m(&feature, "acc_all") > m("full-ft", "acc_all");
        ok &= a >= FORGETTING_MARGIN && b >= FORGETTING_MARGIN && c;
        lines.push(format!("seed {seed}: (a) {a:+.3} (b) {b:+.3} (c) {c}"));
    }
    outcome(ok, format!("{}; margins >= {FORGETTING_MARGIN}", lines.join(", ")))
}

fn budgets() -> Outcome {
    let shapes = [(768usize, 768usize); 24];
    let vefa = adapters::param_count_for_shapes(AdapterKind::Vefa, None, &shapes).unwrap();
    let lora = adapters::param_count_for_shapes(AdapterKind::Lora, Some(8), &shapes).unwrap();
    outcome(vefa == 18_432 && lora == 294_912, format!("vefa {vefa} (want 18432), lora r=8 {lora} (want 294912)"))
}

fn breakdown(all: f64, unseen: f64, seen: f64) -> AccuracyBreakdown {
    AccuracyBreakdown {
        acc_all: all,
        acc_unseen: unseen,
        acc_seen: seen,
        n_all: 0,
        n_unseen: 0,
        n_seen: 0,
        correct_unseen: 0,
        correct_seen: 0,
    }
}

fn metric_arithmetic() -> Outcome {
    let r1 = metrics::r1(28.1, 42.2);
    let r2 = metrics::r2(&breakdown(0.956, 0.970, 0.934), &breakdown(0.805, 0.779, 0.842));
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let classes = 2 + rng.below(9);
        let n = 2 + rng.below(200);
        let split = 1 + rng.below(classes - 1);
        let seen: Vec<usize> = (0..split).collect();
        let unseen: Vec<usize> = (split..classes).collect();
        // one label from each subset so neither is empty
        let mut labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        labels[0] = 0;
        labels[1] = classes - 1;
        let preds: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let b = metrics::breakdown_from_predictions(&preds, &labels, &seen, &unseen).unwrap();
        worst = worst.max(b.weighted_mean_residual());
    }
    let ok = r1 == -14.1 && (r2 - 0.191).abs() <= R2_TOL && worst <= WEIGHTED_MEAN_TOL;
    outcome(
        ok,
        format!("r1 {r1} (want -14.1 exactly), r2 {r2} (want 0.191, tol {R2_TOL:.0e}), weighted-mean residual {worst:.1e} <= {WEIGHTED_MEAN_TOL:.0e}"),
    )
}

fn autodiff() -> Outcome {
    let worst = (0..50u64).map(|s| common::RandomGraph::new(5000 + s).check().max_rel_err).fold(0.0, f64::max);
    outcome(worst <= GRADCHECK_TOL, format!("50 graphs, max rel err {worst:.1e} <= {GRADCHECK_TOL:.0e}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        experiments::cmd_forgetting(&forgetting_cfg(0, &out)).unwrap();
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    outcome(a == b, format!("metrics.csv byte-identical across reruns: {} ({} bytes)", a == b, a.len()))
}
