//! Run configuration: a TOML file with dotted-key overrides, and the digest
//! that identifies it.
//!
//! Unknown keys are rejected at every level. The digest is the sha256 of
//! the configuration serialized as JSON with object keys in sorted order,
//! so it does not depend on the layout or key order of the source file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

pub type RunConfig = ExperimentConfig;

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

pub fn from_toml(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(cfg_err)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(cfg_err)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value` overrides; each key must already exist.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut root = toml::Value::try_from(cfg).map_err(cfg_err)?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let mut slot = &mut root;
        for part in key.trim().split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown configuration key {:?}", key.trim())))?;
        }
        *slot = parse_value(raw.trim());
    }
    root.try_into().map_err(cfg_err)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of the canonical JSON form.
pub fn digest(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    sha256_hex(&serde_json::to_vec(&v).expect("value serializes"))
}

/// First 12 hex digits of the digest, used in run directory names.
pub fn short_digest(cfg: &RunConfig) -> String {
    digest(cfg)[..12].to_string()
}
