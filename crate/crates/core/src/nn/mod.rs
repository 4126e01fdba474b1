//! Recurrent encoder-decoder network, losses and training loop (f64, CPU).

pub mod archive;
pub mod loss;
pub mod lstm;
pub mod optim;
pub mod seq2seq;
pub mod train;

use serde::{de::DeserializeOwned, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

pub use loss::{pinball, Objective};
pub use seq2seq::{DecoderState, Feedback, NetConfig, Params, Seq2Seq};
pub use train::{fit, EarlyStopping, SeqData, TrainConfig, TrainHistory};

/// Write `params.bin` and `meta.json` into `dir`.
pub fn save_checkpoint<M: Serialize>(dir: &Path, params: &Params, meta: &M) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("params.bin");
    let mut buf = Vec::new();
    archive::write_tensors(&mut buf, &params.tensors()).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_checkpoint_meta<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_checkpoint_params(dir: &Path, params: &mut Params) -> Result<()> {
    let path = dir.join("params.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let tensors = archive::read_tensors(bytes.as_slice()).map_err(|e| Error::io(&path, e))?;
    archive::load_into(params, &tensors)
}
