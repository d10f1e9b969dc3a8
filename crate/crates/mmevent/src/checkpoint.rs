//! Model checkpoints: JSON files carrying the model kind, its
//! configuration, and the full named parameter store, written atomically
//! (temporary file + rename).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coref::CorefModel;
use crate::error::{Error, Result};
use crate::jmmt::{JmmtConfig, JmmtModel, Vocabulary};
use crate::optim::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Checkpoint {
    Coref {
        d_x: usize,
        d_y: usize,
        d_z: usize,
        common_dim: usize,
        params: ParamStore,
    },
    Jmmt {
        config: JmmtConfig,
        vocab: Vocabulary,
        params: ParamStore,
    },
}

/// Writes any serializable artifact atomically: the content lands in a
/// temporary file in the target directory and is renamed into place.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(content)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt)?;
    write_atomic(path, json.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read_to_string(path)?;
    let mut ckpt: Checkpoint = serde_json::from_str(&data)?;
    match &mut ckpt {
        Checkpoint::Coref { params, .. } => params.reindex(),
        Checkpoint::Jmmt { params, vocab, .. } => {
            params.reindex();
            vocab.rebuild_index();
        }
    }
    Ok(ckpt)
}

pub fn save_coref_model(model: &CorefModel, path: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint::Coref {
            d_x: model.d_x,
            d_y: model.d_y,
            d_z: model.d_z,
            common_dim: model.common_dim,
            params: model.params.clone(),
        },
        path,
    )
}

pub fn load_coref_model(path: &Path) -> Result<CorefModel> {
    match load_checkpoint(path)? {
        Checkpoint::Coref {
            d_x,
            d_y,
            d_z,
            common_dim,
            params,
        } => Ok(CorefModel {
            params,
            d_x,
            d_y,
            d_z,
            common_dim,
        }),
        Checkpoint::Jmmt { .. } => Err(Error::Input(format!(
            "{} holds a jmmt checkpoint, expected coref",
            path.display()
        ))),
    }
}

pub fn save_jmmt_model(model: &JmmtModel, path: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint::Jmmt {
            config: model.cfg.clone(),
            vocab: model.vocab.clone(),
            params: model.params.clone(),
        },
        path,
    )
}

pub fn load_jmmt_model(path: &Path) -> Result<JmmtModel> {
    match load_checkpoint(path)? {
        Checkpoint::Jmmt {
            config,
            vocab,
            params,
        } => Ok(JmmtModel {
            cfg: config,
            vocab,
            params,
        }),
        Checkpoint::Coref { .. } => Err(Error::Input(format!(
            "{} holds a coref checkpoint, expected jmmt",
            path.display()
        ))),
    }
}
