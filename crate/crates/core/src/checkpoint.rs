//! Checkpoints: a JSON manifest plus a sibling `.bin` payload of
//! little-endian `f64` values concatenated in manifest order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Classifier, ClassifierModel};
use crate::io::write_atomic;
use crate::nets::{Layer, MlpParams};
use crate::optim::AdamState;
use crate::tensor::{Activation, Tensor};
use crate::trainer::{ModelBundle, OptimizerState};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub kind: String,
    pub iteration: usize,
    pub config_digest: String,
    pub payload: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, f64>,
}

/// A named list of tensors with its manifest metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub iteration: usize,
    pub config_digest: String,
    pub meta: BTreeMap<String, f64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("checkpoint has no parameter {name}")))?;
        if t.shape() != shape {
            return Err(Error::Mismatch(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bin = payload_path(path);
    let mut params = Vec::with_capacity(ckpt.tensors.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, t) in &ckpt.tensors {
        params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA,
        kind: ckpt.kind.clone(),
        iteration: ckpt.iteration,
        config_digest: ckpt.config_digest.clone(),
        payload: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
        meta: ckpt.meta.clone(),
    };
    write_atomic(&bin, &bytes)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(path, json.as_bytes())
}

/// Reads a checkpoint. Missing, malformed or inconsistent files are
/// reported as artifact mismatches.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Mismatch(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Mismatch(format!("bad manifest {}: {e}", path.display())))?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Mismatch(format!("unsupported checkpoint schema {}", manifest.schema)));
    }
    let bin = path.with_file_name(&manifest.payload);
    let bytes = std::fs::read(&bin)
        .map_err(|e| Error::Mismatch(format!("cannot read payload {}: {e}", bin.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Mismatch("payload length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        if p.offset != expected || p.shape.iter().product::<usize>() != p.len || p.offset + p.len > values.len() {
            return Err(Error::Mismatch(format!("manifest entry {} does not match the payload", p.name)));
        }
        expected += p.len;
        let t = Tensor::new(p.shape.clone(), values[p.offset..p.offset + p.len].to_vec())
            .map_err(|e| Error::Mismatch(e.to_string()))?;
        tensors.push((p.name.clone(), t));
    }
    if expected != values.len() {
        return Err(Error::Mismatch("payload has trailing values".into()));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        iteration: manifest.iteration,
        config_digest: manifest.config_digest,
        meta: manifest.meta,
        tensors,
    })
}

fn adam_tensors(prefix: &str, s: &AdamState, out: &mut Vec<(String, Tensor)>) {
    for (k, (m, v)) in s.first.iter().zip(&s.second).enumerate() {
        out.push((format!("{prefix}.m{k}"), Tensor::new(vec![m.len()], m.clone()).expect("shape")));
        out.push((format!("{prefix}.v{k}"), Tensor::new(vec![v.len()], v.clone()).expect("shape")));
    }
}

fn restore_adam(ckpt: &Checkpoint, prefix: &str, template: &AdamState) -> Result<AdamState> {
    let mut s = template.clone();
    for k in 0..s.first.len() {
        let n = s.first[k].len();
        s.first[k] = ckpt.take(&format!("{prefix}.m{k}"), &[n])?.values().to_vec();
        s.second[k] = ckpt.take(&format!("{prefix}.v{k}"), &[n])?.values().to_vec();
    }
    s.steps = ckpt.meta.get(&format!("{prefix}.steps")).copied().unwrap_or(0.0) as u64;
    Ok(s)
}

/// Model parameters and optimizer state after `iteration` iterations.
pub fn model_checkpoint(model: &ModelBundle, state: &OptimizerState, iteration: usize, digest: &str) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    adam_tensors("adam.model", &state.model, &mut tensors);
    adam_tensors("adam.ebm", &state.ebm, &mut tensors);
    let mut meta = BTreeMap::new();
    meta.insert("adam.model.steps".into(), state.model.steps as f64);
    meta.insert("adam.ebm.steps".into(), state.ebm.steps as f64);
    Checkpoint {
        kind: "model".into(),
        iteration,
        config_digest: digest.into(),
        meta,
        tensors,
    }
}

/// Writes checkpoint values into `template`, which fixes names and shapes.
/// Returns the optimizer state and iteration stored alongside.
pub fn restore_model(ckpt: &Checkpoint, template: &mut ModelBundle, digest: &str) -> Result<(OptimizerState, usize)> {
    if ckpt.kind != "model" {
        return Err(Error::Mismatch(format!("expected a model checkpoint, found {:?}", ckpt.kind)));
    }
    if ckpt.config_digest != digest {
        return Err(Error::Mismatch(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let fresh_state = OptimizerState::new(template);
    for (name, param) in template.named_params_mut() {
        let shape = param.shape().to_vec();
        *param = ckpt.take(&name, &shape)?.clone();
    }
    let state = OptimizerState {
        model: restore_adam(ckpt, "adam.model", &fresh_state.model)?,
        ebm: restore_adam(ckpt, "adam.ebm", &fresh_state.ebm)?,
    };
    Ok((state, ckpt.iteration))
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Identity => 0.0,
        Activation::Tanh => 1.0,
        Activation::Softplus => 2.0,
        Activation::Relu => 3.0,
    }
}

fn activation_from_code(c: f64) -> Result<Activation> {
    Ok(match c as i64 {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        2 => Activation::Softplus,
        3 => Activation::Relu,
        _ => return Err(Error::Mismatch(format!("unknown activation code {c}"))),
    })
}

pub fn classifier_checkpoint(model: &ClassifierModel, digest: &str) -> Checkpoint {
    let mut tensors = Vec::new();
    let mut meta = BTreeMap::new();
    meta.insert("modalities".into(), model.per_modality.len() as f64);
    for (i, c) in model.per_modality.iter().enumerate() {
        let prefix = format!("classifier{i}");
        meta.insert(format!("{prefix}.layers"), c.mlp.layers.len() as f64);
        meta.insert(format!("{prefix}.hidden_activation"), activation_code(c.mlp.hidden_activation));
        meta.insert(format!("{prefix}.heldout_accuracy"), c.heldout_accuracy);
        for (name, t) in c.mlp.param_names(&prefix).into_iter().zip(c.mlp.params()) {
            tensors.push((name, t.clone()));
        }
    }
    Checkpoint {
        kind: "classifiers".into(),
        iteration: 0,
        config_digest: digest.into(),
        meta,
        tensors,
    }
}

pub fn restore_classifiers(ckpt: &Checkpoint, digest: &str) -> Result<ClassifierModel> {
    if ckpt.kind != "classifiers" || ckpt.config_digest != digest {
        return Err(Error::Mismatch("classifier cache does not match the configuration".into()));
    }
    let meta = |k: &str| {
        ckpt.meta
            .get(k)
            .copied()
            .ok_or_else(|| Error::Mismatch(format!("classifier checkpoint lacks {k}")))
    };
    let m = meta("modalities")? as usize;
    let mut per_modality = Vec::with_capacity(m);
    for i in 0..m {
        let prefix = format!("classifier{i}");
        let n_layers = meta(&format!("{prefix}.layers"))? as usize;
        let hidden = activation_from_code(meta(&format!("{prefix}.hidden_activation"))?)?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let get = |suffix: &str| {
                ckpt.get(&format!("{prefix}.l{l}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Mismatch(format!("classifier checkpoint lacks {prefix}.l{l}.{suffix}")))
            };
            layers.push(Layer {
                weight: get("w")?,
                bias: get("b")?,
            });
        }
        let mlp = MlpParams::from_layers(layers, hidden, Activation::Identity).map_err(|e| Error::Mismatch(e.to_string()))?;
        per_modality.push(Classifier {
            mlp,
            heldout_accuracy: meta(&format!("{prefix}.heldout_accuracy"))?,
        });
    }
    Ok(ClassifierModel { per_modality })
}
