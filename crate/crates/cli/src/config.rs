//! Flat dotted-key JSON configuration: defaults, then the preset, then the
//! config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mdepth::train::TrainConfig;
use mdepth::{Error, LossConfig, NetworkConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const DEFAULT_PRESET: &str = "toy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
    pub split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            depth_scale: mdepth::data::DEFAULT_DEPTH_SCALE,
            split: "train".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub preset: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

/// Flag values that override file entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn flatten_section(out: &mut BTreeMap<String, Value>, section: &str, value: Value) {
    let Value::Object(map) = value else {
        unreachable!("config sections serialize to objects")
    };
    for (k, v) in map {
        out.insert(format!("{section}.{k}"), v);
    }
}

fn section<T: for<'de> Deserialize<'de>>(flat: &BTreeMap<String, Value>, name: &str) -> Result<T> {
    let prefix = format!("{name}.");
    let map: Map<String, Value> = flat
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|f| (f.to_owned(), v.clone())))
        .collect();
    serde_json::from_value(Value::Object(map)).map_err(|e| config_err(format!("{name}: {e}")))
}

fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(config_err(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(config_err(format!("{}: {e}", path.display()))),
    }
}

impl Resolved {
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let entries = match file {
            Some(p) => read_file(p)?,
            None => Map::new(),
        };
        let file_preset = match entries.get("network.preset") {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => return Err(config_err(format!("network.preset must be a string, got {other}"))),
        };
        let preset = flags
            .preset
            .clone()
            .or(file_preset)
            .unwrap_or_else(|| DEFAULT_PRESET.to_owned());
        let base = Resolved {
            network: NetworkConfig::preset(&preset)?,
            preset,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
        };
        let mut flat = base.flat();
        flat.remove("network.preset");
        for (k, v) in entries {
            if k == "network.preset" {
                continue;
            }
            if v.is_object() {
                return Err(config_err(format!("config key '{k}': nested objects are not allowed, use dotted keys")));
            }
            match flat.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(config_err(format!("unknown config key '{k}'"))),
            }
        }
        if let Some(seed) = flags.seed {
            flat.insert("train.seed".into(), seed.into());
            flat.insert("network.seed".into(), seed.into());
        }
        if let Some(m) = &flags.manifest {
            flat.insert("data.manifest".into(), m.to_string_lossy().into_owned().into());
        }
        let resolved = Resolved {
            preset: base.preset,
            network: section(&flat, "network")?,
            train: section(&flat, "train")?,
            loss: section(&flat, "loss")?,
            data: section(&flat, "data")?,
        };
        resolved.network.validate()?;
        resolved.train.validate()?;
        resolved.loss.validate()?;
        if !(resolved.data.depth_scale > 0.0) {
            return Err(config_err("data.depth_scale must be positive"));
        }
        Ok(resolved)
    }

    /// Every setting as a dotted key, `network.preset` included.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        let to_value = |v: serde_json::Result<Value>| v.expect("config serializes");
        flatten_section(&mut flat, "network", to_value(serde_json::to_value(&self.network)));
        flatten_section(&mut flat, "train", to_value(serde_json::to_value(&self.train)));
        flatten_section(&mut flat, "loss", to_value(serde_json::to_value(&self.loss)));
        flatten_section(&mut flat, "data", to_value(serde_json::to_value(&self.data)));
        flat.insert("network.preset".into(), self.preset.clone().into());
        flat
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.flat()).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults() {
        let r = Resolved::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(r.preset, "toy");
        assert_eq!(r.network, NetworkConfig::toy());
        assert_eq!(r.train.batch_size, 4);
        assert_eq!(r.loss.lambda, 0.1);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"train.epochs": 3, "loss.lambda": 0.5, "train.seed": 9}"#);
        let flags = Overrides {
            seed: Some(4),
            ..Default::default()
        };
        let r = Resolved::resolve(Some(&p), &flags).unwrap();
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.loss.lambda, 0.5);
        assert_eq!(r.train.seed, 4);
        assert_eq!(r.network.seed, 4);
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"network.preset": "densenet121", "train.learning_rate": 0.001}"#);
        let r = Resolved::resolve(Some(&p), &Overrides::default()).unwrap();
        let echoed = r.write(dir.path()).unwrap();
        let again = Resolved::resolve(Some(&echoed), &Overrides::default()).unwrap();
        assert_eq!(r, again);
        assert_eq!(again.network, NetworkConfig::densenet121());
    }

    #[test]
    fn rejects_bad_entries() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            r#"{"train.epoch": 3}"#,
            r#"{"train": {"epochs": 3}}"#,
            r#"{"train.epochs": "three"}"#,
            r#"{"train.learning_rate": -1}"#,
            r#"{"network.preset": "vgg"}"#,
            "[1]",
            "{",
        ] {
            let p = write(dir.path(), text);
            assert!(
                matches!(Resolved::resolve(Some(&p), &Overrides::default()), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
