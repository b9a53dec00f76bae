//! Checkpoint archives: one tar file holding every parameter as an NPY
//! array, optimizer state, a JSON metadata record and the resolved
//! run configuration as key-value text.
//!
//! Layout inside the archive:
//!
//! ```text
//! meta.json              serialized [`CheckpointMeta`]
//! config.txt             flat dotted-key configuration, one `key=value` per line
//! params/<name>.npy      model parameter arrays (f64, C order)
//! optim/<name>.npy       optimizer state (`optim.t`, `optim.<param>.m/.v`)
//! ```
//!
//! Parameter names are the canonical dotted paths of the [`ParamStore`]
//! (`encoder.stage1.block0.*`, `queries.encoder`, ...). Archives are
//! byte-deterministic: entries are sorted by name and headers carry fixed
//! timestamps, so identical state produces identical files.
//!
//! Fine-tuning starts from a distillation checkpoint via
//! [`Checkpoint::apply_carry_over`], which restores only the encoder and
//! its query machinery (`encoder.*`, `queries.encoder`, `query_engine.*`);
//! the FPN and decoder stay freshly initialized.

use crate::nn::ParamStore;
use crate::{Error, Result};
use ndarray::ArrayD;
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const FORMAT: &str = "irstd-checkpoint-v1";

/// Provenance record stored as `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Archive format tag; rejected on mismatch.
    pub format: String,
    /// Training phase that wrote the checkpoint (`"distill"` or `"finetune"`).
    pub kind: String,
    /// Number of optimizer steps completed when saving.
    pub step: u64,
    /// Seed of the parameter store (for provenance, not re-initialization).
    pub seed: u64,
    /// Total steps of the schedule the run was configured for.
    pub total_steps: u64,
}

impl CheckpointMeta {
    pub fn new(kind: &str, step: u64, seed: u64, total_steps: u64) -> Self {
        CheckpointMeta {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            step,
            seed,
            total_steps,
        }
    }
}

/// In-memory form of a loaded archive.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config_text: String,
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub optim: BTreeMap<String, ArrayD<f64>>,
}

/// Whether a parameter survives the switch from distillation to
/// fine-tuning. Only the encoder, its learnable encoder queries and the
/// query-engine projections carry over; FPN, decoder and any
/// distillation-specific heads are re-initialized.
pub fn carries_over_to_finetune(name: &str) -> bool {
    name.starts_with("encoder.") || name == "queries.encoder" || name.starts_with("query_engine.")
}

fn npy_bytes(arr: &ArrayD<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let standard = arr.as_standard_layout();
    standard
        .write_npy(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("npy encode: {e}")))?;
    Ok(buf)
}

fn append_entry(
    builder: &mut tar::Builder<std::fs::File>,
    path: &str,
    bytes: &[u8],
) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    builder.append_data(&mut header, path, bytes)?;
    Ok(())
}

/// Write a checkpoint archive. `optim_state` uses the names produced by
/// `AdamW::state` (`optim.t`, `optim.<param>.m`, ...); pass an empty
/// slice for inference-only exports.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    config_text: &str,
    store: &ParamStore,
    optim_state: &[(String, ArrayD<f64>)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut builder = tar::Builder::new(file);

    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    append_entry(&mut builder, "meta.json", meta_json.as_bytes())?;
    append_entry(&mut builder, "config.txt", config_text.as_bytes())?;

    let mut params: Vec<(String, ArrayD<f64>)> = store
        .params()
        .iter()
        .map(|p| (p.name(), p.value()))
        .collect();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, value) in &params {
        append_entry(&mut builder, &format!("params/{name}.npy"), &npy_bytes(value)?)?;
    }

    let mut optim: Vec<&(String, ArrayD<f64>)> = optim_state.iter().collect();
    optim.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, value) in optim {
        append_entry(&mut builder, &format!("optim/{name}.npy"), &npy_bytes(value)?)?;
    }

    let mut file = builder.into_inner()?;
    use std::io::Write;
    file.flush()?;
    Ok(())
}

/// Read an archive written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut archive = tar::Archive::new(file);
    let mut meta: Option<CheckpointMeta> = None;
    let mut config_text: Option<String> = None;
    let mut params = BTreeMap::new();
    let mut optim = BTreeMap::new();

    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry
            .path()
            .map_err(|e| Error::Checkpoint(format!("bad entry path: {e}")))?
            .to_string_lossy()
            .into_owned();
        if name == "meta.json" {
            let mut text = String::new();
            entry.read_to_string(&mut text)?;
            let m: CheckpointMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Checkpoint(format!("meta.json: {e}")))?;
            if m.format != FORMAT {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint format {:?} (expected {FORMAT:?})",
                    m.format
                )));
            }
            meta = Some(m);
        } else if name == "config.txt" {
            let mut text = String::new();
            entry.read_to_string(&mut text)?;
            config_text = Some(text);
        } else if let Some(rest) = name.strip_prefix("params/") {
            let key = rest
                .strip_suffix(".npy")
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {name}")))?;
            let arr = ArrayD::<f64>::read_npy(&mut entry)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(key.to_string(), arr);
        } else if let Some(rest) = name.strip_prefix("optim/") {
            let key = rest
                .strip_suffix(".npy")
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {name}")))?;
            let arr = ArrayD::<f64>::read_npy(&mut entry)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            optim.insert(key.to_string(), arr);
        } else {
            return Err(Error::Checkpoint(format!("unexpected entry {name}")));
        }
    }

    Ok(Checkpoint {
        meta: meta.ok_or_else(|| Error::Checkpoint("archive is missing meta.json".into()))?,
        config_text: config_text
            .ok_or_else(|| Error::Checkpoint("archive is missing config.txt".into()))?,
        params,
        optim,
    })
}

impl Checkpoint {
    fn set_param(&self, store: &ParamStore, name: &str) -> Result<()> {
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing parameter {name}")))?;
        let param = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
        if param.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                value.shape(),
                param.shape()
            )));
        }
        param.set_value(value.clone());
        Ok(())
    }

    /// Restore every parameter (resume contract): the store and the
    /// checkpoint must describe exactly the same set of names.
    pub fn apply_all(&self, store: &ParamStore) -> Result<()> {
        for p in store.params() {
            self.set_param(store, &p.name())?;
        }
        for name in self.params.keys() {
            if store.get(name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name} does not exist in the model"
                )));
            }
        }
        Ok(())
    }

    /// Restore only the parameters that survive fine-tuning
    /// (see [`carries_over_to_finetune`]); everything else keeps its
    /// fresh initialization. Returns the names restored, sorted.
    ///
    /// Carried names present in the checkpoint but absent from the model
    /// are an architecture mismatch and rejected.
    pub fn apply_carry_over(&self, store: &ParamStore) -> Result<Vec<String>> {
        let mut applied = Vec::new();
        for name in self.params.keys() {
            if !carries_over_to_finetune(name) {
                continue;
            }
            self.set_param(store, name)?;
            applied.push(name.clone());
        }
        if applied.is_empty() {
            return Err(Error::Checkpoint(
                "checkpoint carries no encoder/query parameters".into(),
            ));
        }
        Ok(applied)
    }
}
