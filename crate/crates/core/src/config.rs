//! Resolved run configuration: defaults, optional TOML file, then dotted
//! `key=value` overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalOptions,
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{p}`")))?;
                merge(slot, v, &p)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the TOML file, then `key=value` overrides, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let json = serde_json::to_value(parsed).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut tree, json, "")?;
        }
        for o in overrides {
            Self::apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_override(tree: &mut Value, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        let mut slot = &mut *tree;
        for part in key.trim().split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{}`", key.trim())))?;
        }
        *slot = parse_value(raw.trim());
        Ok(())
    }

    /// Applies one override to an already-resolved config.
    pub fn set(&mut self, kv: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        Self::apply_override(&mut tree, kv)?;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.training.validate()?;
        self.model.high_encoder.validate("model.high_encoder")?;
        self.model.low_encoder.validate("model.low_encoder")?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config renders as TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::resolve(None, &["training.steps=7".into(), "training.encoder_freeze_mode=head".into()]).unwrap();
        assert_eq!(c.training.steps, 7);
        assert_eq!(c.training.encoder_freeze_mode, crate::model::FreezeMode::Head);
        assert!(RunConfig::resolve(None, &["training.stepz=7".into()]).is_err());
        assert!(RunConfig::resolve(None, &["training.steps".into()]).is_err());
        assert!(RunConfig::resolve(None, &["training.single_pair_mix=2".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.set("data.sources=3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), c);
        std::fs::write(&p, "[training]\nbogus = 1\n").unwrap();
        let e = RunConfig::resolve(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("training.bogus"), "{e}");
    }
}
