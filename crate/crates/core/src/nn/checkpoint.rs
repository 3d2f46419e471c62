//! Versioned JSON checkpoints.
//!
//! Tensors serialize as `{ "shape": [...], "data": [...] }`. Floats are
//! written in shortest round-trip form and parsed with exact rounding, so a
//! save/load cycle is bit-exact for finite values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "ecc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    body: T,
}

pub fn to_string<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        body,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(Error::config("format", format!("expected `{FORMAT}`, found `{}`", env.format)));
    }
    if env.version != VERSION {
        return Err(Error::config(
            "version",
            format!("unsupported checkpoint version {}", env.version),
        ));
    }
    if env.kind != kind {
        return Err(Error::config("kind", format!("expected `{kind}`, found `{}`", env.kind)));
    }
    Ok(env.body)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let text = to_string(kind, body)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(kind, &text)
}
