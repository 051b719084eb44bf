//! Versioned JSON envelopes and atomic file writes.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so every serialized `f64` reads back bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const PROMPT_BANK: &str = "dmc-prompt-bank";
pub const ENCODER: &str = "dmc-encoder";
pub const PIPELINE_STATE: &str = "dmc-pipeline-state";

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

pub fn to_json<T: Serialize>(format: &str, value: &T) -> Result<String> {
    serde_json::to_string(&EnvelopeRef {
        format,
        version: FORMAT_VERSION,
        payload: value,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let env: Envelope<T> =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if env.format != format {
        return Err(Error::Checkpoint(format!(
            "expected format {format}, found {}",
            env.format
        )));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported {format} version {}",
            env.version
        )));
    }
    Ok(env.payload)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
