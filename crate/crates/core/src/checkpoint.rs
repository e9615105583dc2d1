//! Checkpoint files.
//!
//! Layout: `b"SGCK1"`, little-endian `u32` format version, `u32` manifest
//! length, the manifest as UTF-8 TOML, then the little-endian `f32` payload.
//! Each manifest entry records the tensor name, group, shape and byte
//! offset into the payload. Stored values are exact because training keeps
//! parameters and optimizer state at `f32` precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use signflow_autograd::{Adam, EmaState, ParamId, ParamStore, Tensor};

use crate::backtranslate::BackTranslator;
use crate::config::Config;
use crate::error::{io_err, Result, SignError};
use crate::model::SignModel;
use crate::train::Trainer;

pub const CKPT_MAGIC: &[u8; 5] = b"SGCK1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    /// Load the EMA shadow as the working weights.
    pub ema: bool,
    pub epoch: usize,
    pub adam_step: u64,
    pub entries: Vec<Entry>,
    pub config: Config,
}

pub const GROUP_PARAM: &str = "param";
pub const GROUP_EMA: &str = "ema";
pub const GROUP_ADAM_M: &str = "adam.m";
pub const GROUP_ADAM_V: &str = "adam.v";

fn format_err(offset: usize, msg: impl Into<String>) -> SignError {
    SignError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn encode(mut manifest: Manifest, tensors: &[(&str, &str, &[usize], &[f64])]) -> Vec<u8> {
    let mut payload = Vec::new();
    manifest.entries.clear();
    for (name, group, shape, data) in tensors {
        manifest.entries.push(Entry {
            name: name.to_string(),
            group: group.to_string(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for &v in *data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(13 + text.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&manifest.version.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parsed file: manifest plus tensors in manifest order.
pub struct RawCheckpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < 13 || &bytes[..5] != CKPT_MAGIC {
        return Err(format_err(0, "missing SGCK1 magic"));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(SignError::Checkpoint(format!(
            "format version {version}, this build reads {CKPT_VERSION}"
        )));
    }
    let mlen = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let text = bytes
        .get(13..13 + mlen)
        .ok_or_else(|| format_err(13, "manifest runs past end of file"))?;
    let text = std::str::from_utf8(text).map_err(|e| format_err(13 + e.valid_up_to(), "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| format_err(13, format!("bad manifest: {}", e.message())))?;
    let base = 13 + mlen;
    let payload = &bytes[base..];
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    let mut expected = 0u64;
    for e in &manifest.entries {
        if e.offset != expected {
            return Err(SignError::Checkpoint(format!("entry `{}` has offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let chunk = payload
            .get(start..end)
            .ok_or_else(|| format_err(base + start, format!("payload of `{}` is truncated", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(format_err(base + expected as usize, "trailing bytes after payload"));
    }
    Ok(RawCheckpoint { manifest, tensors })
}

fn read_file(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// Serializes live weights, Adam moments and the EMA shadow.
pub fn encode_trainer(t: &Trainer, ema_flag: bool) -> Vec<u8> {
    let params = &t.model.params;
    let mut tensors: Vec<(&str, &str, &[usize], &[f64])> = Vec::new();
    for (_, name, tensor) in params.iter() {
        tensors.push((name, GROUP_PARAM, tensor.shape(), tensor.data()));
    }
    for ((_, name, live), shadow) in params.iter().zip(t.ema.shadow()) {
        debug_assert_eq!(live.shape(), shadow.shape());
        tensors.push((name, GROUP_EMA, shadow.shape(), shadow.data()));
    }
    let (first, second) = t.adam.moments();
    for (k, &id) in t.adam.params().iter().enumerate() {
        let shape = params.get(id).shape();
        tensors.push((params.name(id), GROUP_ADAM_M, shape, &first[k]));
        tensors.push((params.name(id), GROUP_ADAM_V, shape, &second[k]));
    }
    let manifest = Manifest {
        version: CKPT_VERSION,
        kind: "model".into(),
        ema: ema_flag,
        epoch: t.epoch,
        adam_step: t.adam.step_count(),
        entries: Vec::new(),
        config: t.model.cfg.clone(),
    };
    encode(manifest, &tensors)
}

pub fn save_checkpoint(t: &Trainer, ema_flag: bool, path: &Path) -> Result<Manifest> {
    let bytes = encode_trainer(t, ema_flag);
    std::fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(decode(&bytes)?.manifest)
}

fn fill_group(raw: &RawCheckpoint, group: &str, store: &mut ParamStore) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (e, t) in raw.manifest.entries.iter().zip(&raw.tensors).filter(|(e, _)| e.group == group) {
        let id = store
            .find(&e.name)
            .ok_or_else(|| SignError::Checkpoint(format!("unknown {group} entry `{}`", e.name)))?;
        if seen[id.0] {
            return Err(SignError::Checkpoint(format!("{group} entry `{}` appears twice", e.name)));
        }
        if store.get(id).shape() != t.shape() {
            return Err(SignError::Checkpoint(format!(
                "{group} entry `{}` has shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.get_mut(id).data_mut().copy_from_slice(t.data());
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SignError::Checkpoint(format!("{group} entry `{}` is missing", store.name(ParamId(i)))));
    }
    Ok(())
}

/// Moments for the optimized parameters, in optimizer order.
fn adam_group(raw: &RawCheckpoint, group: &str, store: &ParamStore, ids: &[ParamId]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; ids.len()];
    for (e, t) in raw.manifest.entries.iter().zip(&raw.tensors).filter(|(e, _)| e.group == group) {
        let k = store
            .find(&e.name)
            .and_then(|id| ids.iter().position(|&x| x == id))
            .ok_or_else(|| SignError::Checkpoint(format!("unknown {group} entry `{}`", e.name)))?;
        if out[k].is_some() {
            return Err(SignError::Checkpoint(format!("{group} entry `{}` appears twice", e.name)));
        }
        if store.get(ids[k]).shape() != t.shape() {
            return Err(SignError::Checkpoint(format!("{group} entry `{}` has shape {:?}", e.name, t.shape())));
        }
        out[k] = Some(t.data().to_vec());
    }
    out.into_iter()
        .zip(ids)
        .map(|(v, &id)| v.ok_or_else(|| SignError::Checkpoint(format!("{group} entry `{}` is missing", store.name(id)))))
        .collect()
}

/// A restored training state.
pub struct LoadedModel {
    pub manifest: Manifest,
    pub trainer: Trainer,
}

impl LoadedModel {
    /// Weights selected by the manifest's EMA flag.
    pub fn weights(&self) -> Result<ParamStore> {
        if self.manifest.ema {
            self.trainer.ema_params()
        } else {
            Ok(self.trainer.model.params.clone())
        }
    }
}

/// Restores a checkpoint; `expect` rejects files written for another layout.
pub fn load_checkpoint(path: &Path, expect: Option<&Config>) -> Result<LoadedModel> {
    restore(read_file(path)?, expect)
}

pub fn restore(raw: RawCheckpoint, expect: Option<&Config>) -> Result<LoadedModel> {
    if raw.manifest.kind != "model" {
        return Err(SignError::Checkpoint(format!("file holds a `{}`, not a model", raw.manifest.kind)));
    }
    let cfg = raw.manifest.config.clone();
    let mut model = SignModel::new(&cfg, 0)?;
    if let Some(exp) = expect {
        let reference = SignModel::new(exp, 0)?;
        for (_, name, t) in reference.params.iter() {
            match model.params.find(name) {
                Some(id) if model.params.get(id).shape() == t.shape() => {}
                _ => return Err(SignError::Checkpoint(format!("entry `{name}` does not match the requested configuration"))),
            }
        }
        if reference.params.len() != model.params.len() {
            return Err(SignError::Checkpoint("parameter count differs from the requested configuration".into()));
        }
    }
    fill_group(&raw, GROUP_PARAM, &mut model.params)?;
    let mut shadow = model.params.clone();
    fill_group(&raw, GROUP_EMA, &mut shadow)?;
    let mut trainer = Trainer::new(model)?;
    trainer.ema = EmaState::from_shadow(cfg.train.ema_decay, shadow.iter().map(|(_, _, t)| t.clone()).collect());
    let ids = trainer.adam.params().to_vec();
    let first = adam_group(&raw, GROUP_ADAM_M, &trainer.model.params, &ids)?;
    let second = adam_group(&raw, GROUP_ADAM_V, &trainer.model.params, &ids)?;
    let mut adam = Adam::new(&trainer.model.params, ids, cfg.train.lr);
    adam.restore(raw.manifest.adam_step, first, second)?;
    trainer.adam = adam;
    trainer.epoch = raw.manifest.epoch;
    Ok(LoadedModel {
        manifest: raw.manifest,
        trainer,
    })
}

pub fn save_backtranslator(bt: &BackTranslator, path: &Path) -> Result<()> {
    let tensors: Vec<(&str, &str, &[usize], &[f64])> = bt
        .params
        .iter()
        .map(|(_, n, t)| (n, GROUP_PARAM, t.shape(), t.data()))
        .collect();
    let manifest = Manifest {
        version: CKPT_VERSION,
        kind: "backtranslator".into(),
        ema: false,
        epoch: bt.cfg.eval.bt_epochs,
        adam_step: 0,
        entries: Vec::new(),
        config: bt.cfg.clone(),
    };
    std::fs::write(path, encode(manifest, &tensors)).map_err(io_err(path))
}

pub fn load_backtranslator(path: &Path) -> Result<BackTranslator> {
    let raw = read_file(path)?;
    if raw.manifest.kind != "backtranslator" {
        return Err(SignError::Checkpoint(format!("file holds a `{}`, not a back-translator", raw.manifest.kind)));
    }
    let bt = BackTranslator::new(&raw.manifest.config, 0)?;
    let mut params = bt.params.clone();
    fill_group(&raw, GROUP_PARAM, &mut params)?;
    bt.with_params(params)
}

/// Manifest of any checkpoint file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_file(path)?.manifest)
}
