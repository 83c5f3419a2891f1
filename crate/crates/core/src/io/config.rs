//! TOML run configuration with `dotted.key=value` overrides.
//!
//! ```toml
//! [scene]
//! path = "scenes/orbit"   # omit to generate the synthetic scene in memory
//! downscale = 1
//!
//! [train]
//! iterations = 3000
//!
//! [train.densify]
//! strategy = "full"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Scene directory; when absent the synthetic scene is generated.
    pub path: Option<PathBuf>,
    pub downscale: u32,
    /// Seed of the generated scene.
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    /// Fraction of initialization points to discard before training.
    pub drop_fraction: f64,
    pub drop_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            path: None,
            downscale: 1,
            seed: 0,
            synthetic: SyntheticSpec::default(),
            drop_fraction: 0.0,
            drop_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.scene.drop_fraction) {
            return Err(Error::Config(format!("scene.drop_fraction {} outside [0, 1)", self.scene.drop_fraction)));
        }
        if self.scene.downscale == 0 {
            return Err(Error::Config("scene.downscale must be >= 1".into()));
        }
        self.scene.synthetic.validate()?;
        self.train.validate()
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` overrides to a TOML table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key `{key}` is malformed")));
        }
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// Parses a configuration from TOML text plus overrides and validates it.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `path` (or the defaults when `None`), applies overrides, and
/// resolves a relative scene path against the config file's directory.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(p.to_path_buf()),
            _ => e.into(),
        })?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text, overrides)?;
    if let (Some(cfg_path), Some(scene)) = (path, cfg.scene.path.as_mut()) {
        if scene.is_relative() {
            if let Some(parent) = cfg_path.parent() {
                *scene = parent.join(&*scene);
            }
        }
    }
    Ok(cfg)
}
