//! Resolved run configuration: desk defaults, deep-merged with an optional
//! TOML file, then overridden by command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use streetscape::pipeline::PipelineConfig;
use streetscape_service::ServiceConfig;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub service: ServiceConfig,
}

impl Settings {
    pub fn defaults(seed: u64) -> Self {
        Self { seed, pipeline: PipelineConfig::desk(seed), service: ServiceConfig::default() }
    }

    /// Rewrites every stage seed from the master seed, as the desk preset does.
    fn reseed(&mut self, seed: u64) {
        let d = PipelineConfig::desk(seed);
        self.seed = seed;
        self.pipeline.corpus.seed = d.corpus.seed;
        self.pipeline.base_train.seed = d.base_train.seed;
        self.pipeline.control_train.seed = d.control_train.seed;
        self.pipeline.seg_train.seed = d.seg_train.seed;
        self.pipeline.feature_train.seed = d.feature_train.seed;
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
pub fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Rejects keys in `over` that have no counterpart in `base`.
fn check_known(base: &Value, over: &Value, path: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match b.get(k) {
                Some(slot) => check_known(slot, v, &here)?,
                None => bail!("unknown config key '{here}'"),
            }
        }
    }
    Ok(())
}

/// Precedence: `flag_seed` and later flag overrides > file > defaults.
pub fn resolve(file: Option<&Path>, flag_seed: Option<u64>) -> Result<Settings> {
    let overlay: Option<Value> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            Some(serde_json::to_value(table)?)
        }
        None => None,
    };
    let file_seed = match overlay.as_ref().and_then(|o| o.get("seed")) {
        Some(v) => Some(v.as_u64().context("config key 'seed' must be a non-negative integer")?),
        None => None,
    };
    let seed = flag_seed.or(file_seed).unwrap_or(DEFAULT_SEED);
    let mut merged = serde_json::to_value(Settings::defaults(seed))?;
    if let Some(o) = overlay {
        if !o.is_object() {
            bail!("config must be a table");
        }
        check_known(&merged, &o, "")?;
        deep_merge(&mut merged, o);
    }
    let mut settings: Settings = serde_json::from_value(merged).context("config does not match the expected schema")?;
    if let Some(s) = flag_seed {
        settings.reseed(s);
    }
    Ok(settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_keeps_siblings() {
        let mut a = json!({"x": {"a": 1, "b": 2}, "y": 3});
        deep_merge(&mut a, json!({"x": {"b": 5}, "z": 1}));
        assert_eq!(a, json!({"x": {"a": 1, "b": 5}, "y": 3, "z": 1}));
    }

    #[test]
    fn defaults_round_trip() {
        let s = resolve(None, None).unwrap();
        assert_eq!(s, Settings::defaults(DEFAULT_SEED));
    }

    #[test]
    fn file_then_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 7\n[base_train]\nepochs = 3\n[service]\nport = 9000\n").unwrap();
        let s = resolve(Some(&path), None).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.pipeline.corpus.seed, 7);
        assert_eq!(s.pipeline.base_train.epochs, 3);
        assert_eq!(s.pipeline.base_train.lr, 1e-3);
        assert_eq!(s.service.port, 9000);
        let s = resolve(Some(&path), Some(11)).unwrap();
        assert_eq!(s.seed, 11);
        assert_eq!(s.pipeline.corpus.seed, 11);
        assert_eq!(s.pipeline.base_train.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[base_train]\nepoch = 3\n").unwrap();
        assert!(resolve(Some(&path), None).is_err());
    }
}
