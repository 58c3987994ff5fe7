//! Flat key-value run configuration (a TOML subset: `key = value` lines
//! with integers, reals, strings, booleans and lists; no tables).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSpec, ShiftMapSpec, TargetSelector};
use crate::checkpoint::sha256_hex;
use crate::datasets::{LurkingTransform, SyntheticSpec};
use crate::error::{Error, Result};
use crate::trainer::{OptimizerKind, StopRule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Pretrain,
    Oned,
    EemRecovery,
    Forgetting,
    AdapterCompare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, the command run must match.
    pub experiment: Option<Experiment>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write `metrics.csv` etc. but do not fail on unmet assertions.
    pub assertions: bool,

    // source domain
    pub classes: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub mean_spread: f64,
    pub offset: f64,
    pub hidden: Vec<usize>,

    // pre-training
    pub source_checkpoint: Option<PathBuf>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub accuracy_gate: f64,

    // downstream
    pub downstream: String,
    pub seen_fraction: f64,

    // fine-tuning
    pub adapters: Vec<String>,
    pub feature_method: String,
    pub target_layers: String,
    pub ft_epochs: usize,
    pub ft_lr_adapter: f64,
    pub ft_lr_head: f64,
    pub ft_batch: usize,
    pub ft_weight_decay: f64,
    pub ft_optimizer: String,
    pub ft_stop: String,
    pub plateau_tol: f64,
    pub plateau_patience: usize,
    pub shift_hidden: usize,
    pub shift_bias: bool,

    // adapter comparison
    pub eval_domains: Vec<String>,
    pub workers: usize,
    pub probe_steps: usize,

    // 1-D comparison
    pub oned_lr: f64,
    pub oned_steps: usize,
    pub oned_tol: f64,

    // effect-equivalence recovery
    pub eem_dim: usize,
    pub eem_out: usize,
    pub eem_samples: usize,
    pub eem_u: f64,
    pub eem_noise: f64,
    pub eem_epochs: usize,
    pub eem_lr: f64,

    pub epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let src = SyntheticSpec::default();
        RunConfig {
            experiment: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            assertions: true,
            classes: src.classes,
            n_per_class: src.n_per_class,
            n_test_per_class: src.n_test_per_class,
            dim: src.d,
            cluster_std: src.cluster_std,
            mean_spread: src.mean_spread,
            offset: src.offset,
            hidden: vec![32, 32],
            source_checkpoint: None,
            pretrain_epochs: 30,
            pretrain_lr: 0.01,
            pretrain_batch: 32,
            accuracy_gate: 0.95,
            downstream: "scale:0.7".into(),
            seen_fraction: 0.5,
            adapters: vec![
                "linear-probe".into(),
                "lora:2".into(),
                "lorfa:2".into(),
                "vefa".into(),
                "full-ft".into(),
                "input-shift".into(),
            ],
            feature_method: "input-shift".into(),
            target_layers: "all".into(),
            ft_epochs: 20,
            ft_lr_adapter: 0.01,
            ft_lr_head: 0.01,
            ft_batch: 32,
            ft_weight_decay: 0.0,
            ft_optimizer: "adamw".into(),
            ft_stop: "fixed".into(),
            plateau_tol: 1e-5,
            plateau_patience: 5,
            shift_hidden: 0,
            shift_bias: false,
            eval_domains: vec!["none".into(), "scale:0.7".into(), "scale:1.3".into(), "translate:0.5".into()],
            workers: 4,
            probe_steps: 200,
            oned_lr: crate::eem::REFERENCE_LR,
            oned_steps: 10_000,
            oned_tol: 1e-12,
            eem_dim: 4,
            eem_out: 6,
            eem_samples: 500,
            eem_u: 1.5,
            eem_noise: 0.0,
            eem_epochs: 3000,
            eem_lr: 0.05,
            epsilon: crate::metrics::DEFAULT_EPSILON,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: origin.into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The config rendered back as flat `key = value` text.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn validate(&self) -> Result<()> {
        self.source_spec().validate()?;
        self.downstream_transform()?.validate(self.dim)?;
        for d in &self.eval_domains {
            parse_domain(d, self.dim)?.validate(self.dim)?;
        }
        for a in &self.adapters {
            self.adapter_spec(a)?;
        }
        self.adapter_spec(&self.feature_method)?;
        self.finetune_config()?.validate()?;
        self.pretrain_config().validate()?;
        if let Some(p) = &self.source_checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!("source_checkpoint {} does not exist", p.display())));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_gate) {
            return Err(Error::Config("accuracy_gate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            n_per_class: self.n_per_class,
            n_test_per_class: self.n_test_per_class,
            d: self.dim,
            cluster_std: self.cluster_std,
            mean_spread: self.mean_spread,
            offset: self.offset,
            seed: self.seed,
        }
    }

    pub fn downstream_transform(&self) -> Result<LurkingTransform> {
        parse_domain(&self.downstream, self.dim)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            lr_adapter: self.pretrain_lr,
            lr_head: self.pretrain_lr,
            weight_decay: 0.0,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            loss: None,
            seed: self.seed,
            stop: StopRule::FixedEpochs,
            optimizer: OptimizerKind::adamw(),
            shuffle: true,
        }
    }

    pub fn finetune_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.ft_optimizer.to_ascii_lowercase().as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adamw" | "adam" => OptimizerKind::adamw(),
            other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
        };
        let stop = match self.ft_stop.to_ascii_lowercase().as_str() {
            "fixed" | "fixed-epochs" => StopRule::FixedEpochs,
            "plateau" => StopRule::Plateau {
                tol: self.plateau_tol,
                patience: self.plateau_patience,
            },
            other => return Err(Error::Config(format!("unknown stop rule '{other}'"))),
        };
        Ok(TrainConfig {
            lr_adapter: self.ft_lr_adapter,
            lr_head: self.ft_lr_head,
            weight_decay: self.ft_weight_decay,
            epochs: self.ft_epochs,
            batch_size: self.ft_batch,
            loss: None,
            seed: self.seed,
            stop,
            optimizer,
            shuffle: true,
        })
    }

    fn targets(&self) -> Result<TargetSelector> {
        match self.target_layers.trim() {
            "all" => Ok(TargetSelector::AllLinear),
            "qv" | "query-value" => Ok(TargetSelector::QueryValue),
            list => list
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(TargetSelector::Layers)
                .map_err(|e| Error::Config(format!("bad target_layers '{list}': {e}"))),
        }
    }

    /// Parses `kind[:rank]`, e.g. `lora:2` or `vefa`.
    pub fn adapter_spec(&self, text: &str) -> Result<AdapterSpec> {
        let (kind, rank) = match text.split_once(':') {
            Some((k, r)) => (
                k,
                Some(r.trim().parse::<usize>().map_err(|e| Error::Config(format!("bad rank in '{text}': {e}")))?),
            ),
            None => (text, None),
        };
        let kind: AdapterKind = kind.parse()?;
        let spec = AdapterSpec {
            rank,
            targets: self.targets()?,
            seed: self.seed,
            shift: ShiftMapSpec {
                hidden: (self.shift_hidden > 0).then_some(self.shift_hidden),
                bias: self.shift_bias,
            },
            ..AdapterSpec::new(kind)
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `none`, `scale:<f>` or `translate:<t>` (the same offset on every
/// coordinate).
pub fn parse_domain(text: &str, d: usize) -> Result<LurkingTransform> {
    let bad = |e: String| Error::Config(format!("bad domain '{text}': {e}"));
    match text.trim().split_once(':') {
        None if text.trim() == "none" => Ok(LurkingTransform::None),
        Some(("scale", v)) => Ok(LurkingTransform::Scale {
            factor: v.trim().parse().map_err(|e| bad(format!("{e}")))?,
        }),
        Some(("translate", v)) => {
            let t: f64 = v.trim().parse().map_err(|e| bad(format!("{e}")))?;
            Ok(LurkingTransform::Translate { shift: vec![t; d] })
        }
        _ => Err(bad("expected none, scale:<f> or translate:<t>".into())),
    }
}
