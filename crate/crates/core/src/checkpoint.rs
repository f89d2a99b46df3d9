//! JSON checkpoints of a training state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::TrainState;

pub const CHECKPOINT_FORMAT: &str = "cadaft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    format: String,
    version: u32,
    scalar: String,
    state: TrainState<T>,
}

pub fn checkpoint_bytes<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        scalar: T::NAME.into(),
        state: state.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&ck)?;
    out.push(b'\n');
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    #[derive(Deserialize)]
    struct Head {
        format: String,
        version: u32,
        scalar: String,
    }
    let head: Head =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad checkpoint: {e}")))?;
    if head.format != CHECKPOINT_FORMAT || head.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            head.format, head.version
        )));
    }
    if head.scalar != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, expected {}",
            head.scalar,
            T::NAME
        )));
    }
    let ck: Checkpoint<T> =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad checkpoint: {e}")))?;
    Ok(ck.state)
}
