//! Run configuration: one TOML file, optionally patched by `--set` flags.

use std::fs;
use std::path::Path;

use cadaft::datagen::{SyntheticSpec, TextlikeSpec};
use cadaft::{ModelDims, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;
use crate::manifest::MANIFEST_FORMAT;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Numeric,
    Textlike,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub numeric: SyntheticSpec,
    pub textlike: TextlikeSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation and training alike.
    pub seed: u64,
    /// Also checkpoint after every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
}

/// Rewrites a core configuration error so its field carries the section path.
pub fn in_section(section: &str) -> impl Fn(cadaft::Error) -> Failure + '_ {
    move |e| match e {
        cadaft::Error::Config { field, message } => {
            Failure::config(format!("{section}.{field}: {message}"))
        }
        other => other.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        match self.data.kind {
            DataKind::Numeric => self.data.numeric.validate().map_err(in_section("data.numeric"))?,
            DataKind::Textlike => self.data.textlike.validate().map_err(in_section("data.textlike"))?,
        }
        self.train.validate().map_err(in_section("train"))
    }

    /// Dimensions of the data this configuration generates.
    pub fn dims(&self) -> ModelDims {
        match self.data.kind {
            DataKind::Numeric => self.data.numeric.dims(),
            DataKind::Textlike => self.data.textlike.dims(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Loads `path` (a TOML config or a run manifest) or the defaults, then
    /// applies `key=value` overrides in order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut tree = match path {
            None => toml::Table::try_from(RunConfig::default()).map_err(Failure::runtime)?,
            Some(p) => read_tree(p)?,
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(tree)).map_err(|e| {
            let at = e.path().to_string();
            if at == "." {
                Failure::config(e.into_inner().to_string())
            } else {
                Failure::config(format!("{at}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(Failure::runtime)
    }
}

fn read_tree(path: &Path) -> Result<toml::Table, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        // A manifest from an earlier run carries its resolved configuration.
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        if v["format"] != MANIFEST_FORMAT {
            return Err(Failure::config(format!("{}: not a run manifest", path.display())));
        }
        let cfg: RunConfig = serde_json::from_value(v["config"].clone())
            .map_err(|e| Failure::config(format!("{}: config: {e}", path.display())))?;
        return toml::Table::try_from(cfg).map_err(Failure::runtime);
    }
    text.parse::<toml::Table>()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Sets a dotted key. The value is read as TOML when it parses as TOML,
/// else as a bare string.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().unwrap();
    let mut node = tree;
    for (i, p) in parents.iter().enumerate() {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Failure::config(format!("{}: is not a section", parts[..=i].join(".")))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
