//! Run configuration: one JSON document
//! `{schedule, denoiser, encoder, train, sample, data, seed}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthSpec;
use crate::denoiser::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, SampleConfig, ScheduleConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: SynthSpec,
    pub seed: u64,
}

/// Dotted paths of keys in `value` that `template` does not have. Objects
/// are compared recursively; `null` template fields accept any value.
fn unknown_keys(value: &Value, template: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(v), Value::Object(t)) = (value, template) {
        for (k, child) in v {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match t.get(k) {
                Some(tc) => unknown_keys(child, tc, &p, out),
                None => out.push(p),
            }
        }
    }
}

impl RunConfig {
    /// Parse and validate. Every unrecognized key is reported at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let template = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &template, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            schedule: self.schedule.clone(),
            denoiser: self.denoiser.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if self.sample.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sample.steps {} exceeds schedule.steps {}",
                self.sample.steps, self.schedule.steps
            )));
        }
        self.data.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn lists_every_unknown_key() {
        let err = RunConfig::from_json(r#"{"seed":1,"bogus":2,"train":{"lr":0.1,"epochs":3},"denoiser":{"heads":4}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        for k in ["bogus", "train.lr", "denoiser.heads"] {
            assert!(msg.contains(k), "{msg}");
        }
        assert!(!msg.contains("epochs"));
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(RunConfig::from_json(r#"{"denoiser":{"d_model":64}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sample":{"eta":2.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train":{"epochs":"x"}}"#).is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }
}
