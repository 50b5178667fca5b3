//! Checkpoint bundles: a directory holding one RT3D file per tensor and a
//! `manifest.txt` in `key = value` form.
//!
//! The manifest carries `format`, `version`, the encoder config keys, any
//! caller-supplied metadata, and one `tensor.<name> = <file>` line per tensor
//! in store order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::rt3d;

use super::model::{EncoderConfig, ToyEncoder};

pub const MANIFEST: &str = "manifest.txt";
pub const BUNDLE_FORMAT: &str = "rt3d-bundle";
pub const BUNDLE_VERSION: u32 = 1;

pub fn save_checkpoint(dir: &Path, model: &ToyEncoder, meta: &KvConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut kv = KvConfig::new();
    kv.set("format", BUNDLE_FORMAT);
    kv.set("version", BUNDLE_VERSION);
    kv.merge(&model.config.to_kv());
    for (k, v) in meta.iter() {
        if k.starts_with("tensor.") || k == "format" || k == "version" {
            return Err(Error::Config(format!("metadata key `{k}` is reserved")));
        }
        kv.set(k, v);
    }
    for (name, t) in model.params() {
        let file = format!("{name}.rt3d");
        rt3d::write(dir.join(&file), t)?;
        kv.set(&format!("tensor.{name}"), file);
    }
    std::fs::write(dir.join(MANIFEST), kv.render())?;
    Ok(())
}

/// Returns the model and the full manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(ToyEncoder, KvConfig)> {
    let kv = KvConfig::load(dir.join(MANIFEST))?;
    if kv.get("format") != Some(BUNDLE_FORMAT) {
        return Err(Error::Format(format!("{} is not a checkpoint manifest", dir.display())));
    }
    let version: u32 = kv
        .get_parsed("version")?
        .ok_or_else(|| Error::Format("manifest lacks a version".into()))?;
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut config = EncoderConfig::default();
    config.apply_kv(&kv)?;
    let mut params = Vec::new();
    for (k, file) in kv.iter() {
        if let Some(name) = k.strip_prefix("tensor.") {
            if file.contains('/') || file.contains("..") {
                return Err(Error::Format(format!("tensor path `{file}` escapes the bundle")));
            }
            params.push((name.to_string(), rt3d::read(dir.join(file))?));
        }
    }
    Ok((ToyEncoder::from_params(config, params)?, kv))
}
