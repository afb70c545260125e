//! Output plumbing: provenance blocks, 12-significant-digit numbers and
//! atomic file writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL_NAME: &str = "leakrb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: Option<u64>, command: Option<String>) -> Result<Self> {
        Ok(Provenance {
            tool: TOOL_NAME.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: config_hash(config)?,
            command,
        })
    }
}

/// sha256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Round to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(m) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = m;
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 12 significant digits.
pub fn to_json_rounded<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
