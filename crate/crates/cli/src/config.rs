//! Flat JSON run configuration with `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use softshape::TrainConfig;

pub const OUT_DIR_ENV: &str = "SOFTSHAPE_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

/// Parses `key=value`; the value is read as JSON when it parses, otherwise
/// as a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), String> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| format!("override {raw:?} is not of the form key=value"))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(format!("override {raw:?} has an empty key"));
    }
    let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key.to_string(), value))
}

fn take_path(map: &mut Map<String, Value>, key: &str) -> Result<Option<PathBuf>, String> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(other) => Err(format!("{key} must be a string path, got {other}")),
    }
}

impl RunConfig {
    pub fn from_value(doc: Value, overrides: &[String]) -> Result<Self, String> {
        let mut map = match doc {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => return Err(format!("config must be a JSON object, got {other}")),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            map.insert(k, v);
        }
        let dataset = take_path(&mut map, "dataset")?;
        let output_dir = take_path(&mut map, "output_dir")?;
        let train: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        train.validate().map_err(|e| e.to_string())?;
        Ok(Self {
            dataset,
            output_dir,
            train,
        })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => Value::Null,
        };
        Self::from_value(doc, overrides)
    }

    /// Flag, then environment, then config, then `runs/<dataset stem>`.
    pub fn resolve_output(&self, flag: Option<&Path>, env: Option<&str>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(e) = env.filter(|e| !e.is_empty()) {
            return PathBuf::from(e);
        }
        if let Some(o) = &self.output_dir {
            return o.clone();
        }
        let stem = self
            .dataset
            .as_ref()
            .and_then(|d| d.file_stem())
            .map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem)
    }
}
