//! Model and adapter checkpoint files.
//!
//! Both are pretty-printed JSON objects with a `format` tag and integer
//! `version`. Tensors are `{"rows": r, "cols": c, "data": [...]}` with
//! row-major data; floats use shortest round-trip formatting, so a load
//! reproduces every bit.
//!
//! ```text
//! {"format": "featadapt-model", "version": 1, "model": {
//!    "kind": "mlp" | "linear1d" | "attention-block",
//!    "layers": [{"name", "weights": {"w0", "bias", "frozen", "adapter"}, "activation"}],
//!    "head": {...} | null, "input_shift": {...} | null}}
//!
//! {"format": "featadapt-adapter", "version": 1,
//!  "base_checkpoint": "<sha256 of the base model file>",
//!  "spec": {...}, "seed": n,
//!  "layers": [{"layer": i, "state": {"kind": "lora", "a", "b"}}],
//!  "input_shift": {...} | null, "head": {...} | null, "body": [...] | null}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterKind, AdapterSpec, AdapterState, ShiftMap};
use crate::error::{Error, Result};
use crate::models::{LayerWeights, Model};

pub const MODEL_FORMAT: &str = "featadapt-model";
pub const ADAPTER_FORMAT: &str = "featadapt-adapter";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: Model,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&ModelFile {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        model: model.clone(),
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn model_from_bytes(bytes: &[u8], origin: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_slice(bytes)?;
    check_header(&file.format, file.version, MODEL_FORMAT, origin)?;
    file.model.validate()?;
    Ok(file.model)
}

fn check_header(format: &str, version: u32, want: &str, origin: &str) -> Result<()> {
    if format != want || version != VERSION {
        return Err(Error::Format {
            path: origin.into(),
            msg: format!("expected {want} v{VERSION}, found {format} v{version}"),
        });
    }
    Ok(())
}

/// Writes the checkpoint and returns its content id (SHA-256 hex).
pub fn save_model(model: &Model, path: &Path) -> Result<String> {
    let bytes = model_to_bytes(model)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint together with its content id.
pub fn load_model(path: &Path) -> Result<(Model, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = model_from_bytes(&bytes, &path.display().to_string())?;
    Ok((model, sha256_hex(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapter {
    pub layer: usize,
    pub state: AdapterState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub version: u32,
    pub base_checkpoint: String,
    pub spec: AdapterSpec,
    pub seed: u64,
    pub layers: Vec<LayerAdapter>,
    pub input_shift: Option<ShiftMap>,
    /// Trained head, when the spec trains it.
    pub head: Option<LayerWeights>,
    /// Full body weights for full fine-tuning.
    pub body: Option<Vec<LayerWeights>>,
}

impl AdapterCheckpoint {
    /// Captures the trainable state of an adapted `model`.
    pub fn capture(model: &Model, spec: &AdapterSpec, base_checkpoint: &str) -> Self {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.weights.adapter.clone().map(|state| LayerAdapter { layer: i, state })
            })
            .collect();
        let head = model.head.as_ref().filter(|h| !h.frozen).cloned();
        let body = (spec.kind == AdapterKind::FullFt)
            .then(|| model.layers.iter().map(|l| l.weights.clone()).collect());
        AdapterCheckpoint {
            format: ADAPTER_FORMAT.into(),
            version: VERSION,
            base_checkpoint: base_checkpoint.into(),
            spec: spec.clone(),
            seed: spec.seed,
            layers,
            input_shift: model.input_shift.clone(),
            head,
            body,
        }
    }

    /// Rebuilds the adapted model on top of `base`, whose id must match.
    pub fn apply(&self, base: &Model, base_id: &str) -> Result<Model> {
        if base_id != self.base_checkpoint {
            return Err(Error::Adapter(format!(
                "adapter binds to base {}, got {base_id}",
                self.base_checkpoint
            )));
        }
        let mut m = base.clone();
        crate::adapters::attach(&mut m, &self.spec)?;
        for la in &self.layers {
            let l = m
                .layers
                .get_mut(la.layer)
                .ok_or_else(|| Error::Adapter(format!("layer {} out of range", la.layer)))?;
            la.state.check_layer(l.weights.dims())?;
            l.weights.adapter = Some(la.state.clone());
        }
        if let Some(s) = &self.input_shift {
            m.input_shift = Some(s.clone());
        }
        if let Some(h) = &self.head {
            m.head = Some(h.clone());
        }
        if let Some(body) = &self.body {
            if body.len() != m.layers.len() {
                return Err(Error::Adapter("body layer count mismatch".into()));
            }
            for (l, w) in m.layers.iter_mut().zip(body) {
                l.weights = w.clone();
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: AdapterCheckpoint = serde_json::from_slice(&bytes)?;
        check_header(&ck.format, ck.version, ADAPTER_FORMAT, &path.display().to_string())?;
        Ok(ck)
    }
}
