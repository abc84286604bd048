//! Checkpoint files: a short text header, a SHA-256 of the payload, then the
//! training state as JSON with exact float round-tripping.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::state::TrainState;

pub const CHECKPOINT_MAGIC: &str = "VSALIGN-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(state).map_err(|e| Error::Serde(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(&payload));
    let mut out = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\nsha256 {digest}\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut rest = bytes;
    let mut header = Vec::with_capacity(3);
    for _ in 0..3 {
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::CheckpointCorrupt("truncated header".into()));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::CheckpointCorrupt("header is not UTF-8".into()))?;
        header.push(line);
        rest = &rest[nl + 1..];
    }
    if header[0] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint file".into()));
    }
    let version = header[1]
        .strip_prefix("version ")
        .ok_or_else(|| Error::CheckpointCorrupt(format!("bad version line `{}`", header[1])))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let expected = header[2]
        .strip_prefix("sha256 ")
        .ok_or_else(|| Error::CheckpointCorrupt("missing checksum line".into()))?;
    let actual = hex::encode(Sha256::digest(rest));
    if actual != expected {
        return Err(Error::CheckpointCorrupt(
            "checksum mismatch (truncated or modified payload)".into(),
        ));
    }
    serde_json::from_slice(rest).map_err(|e| Error::CheckpointCorrupt(e.to_string()))
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
