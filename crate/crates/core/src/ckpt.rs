//! Checkpoint directories: a `model.json` descriptor plus one tensor blob
//! per parameter.
//!
//! The descriptor keeps the caller's metadata verbatim and lists parameters
//! in store order, so a load rebuilds the store with identical iteration
//! order and trainable flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{read_ntf, write_ntf, Element, NtfError, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor: {0}")]
    Ntf(#[from] NtfError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Writes `dir/model.json` and `dir/params/*.ntf`, creating `dir` as
/// needed. Parameter names double as file names.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    meta: &serde_json::Value,
    store: &ParamStore<T>,
) -> Result<(), CkptError> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir)?;
    let mut params = Vec::new();
    for (name, tensor, trainable) in store.iter() {
        let file = format!("{name}.ntf");
        write_ntf(&pdir.join(&file), tensor)?;
        params.push(ParamEntry { name: name.to_string(), file, trainable });
    }
    let desc = Descriptor { meta: meta.clone(), params };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&desc)?)?;
    Ok(())
}

/// Rebuilds the store saved by [`save_checkpoint`]; fails on a dtype
/// mismatch rather than converting silently.
pub fn load_checkpoint<T: Element>(
    dir: &Path,
) -> Result<(serde_json::Value, ParamStore<T>), CkptError> {
    let desc: Descriptor = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let mut store = ParamStore::new();
    for p in &desc.params {
        let tensor = read_ntf::<T>(&dir.join("params").join(&p.file))?;
        store.register_with(&p.name, tensor, p.trainable);
    }
    Ok((desc.meta, store))
}
