use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::LocalLossConfig;
use crate::encoders::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::prompts::{Aggregation, InitStrategy};

/// Everything needed to reproduce a run. Encoder fields sit at the top level
/// of the JSON document next to the prompt and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    /// E: prompts per state.
    pub prompts_per_state: usize,
    /// l: learnable context tokens per prompt.
    pub context_len: usize,
    /// Weight of the local loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init: InitStrategy,
    /// Abnormal offset in standard deviations for the `offset` init.
    pub offset_mult: f64,
    pub aggregation: Aggregation,
    pub temperature: f64,
    pub agg_temperature: f64,
    /// Weight of the global probability in the fused image score.
    pub beta: f64,
    pub prefix_init_std: f64,
    pub local: LocalLossConfig,
    pub aupro_fpr_limit: f64,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prompts_per_state: 10,
            context_len: 5,
            lambda: 4.0,
            lr: 1e-3,
            batch_size: 8,
            epochs: 5,
            init: InitStrategy::ClipSpace,
            offset_mult: 5.0,
            aggregation: Aggregation::Mean,
            temperature: 0.07,
            agg_temperature: 0.07,
            beta: 0.5,
            prefix_init_std: 0.02,
            local: LocalLossConfig::default(),
            aupro_fpr_limit: crate::metrics::DEFAULT_FPR_LIMIT,
            eval_batch_size: 25,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Gradient-check scale: tiny encoder, two prompts of two tokens.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            prompts_per_state: 2,
            context_len: 2,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.prompts_per_state == 0 || self.context_len == 0 {
            return fail("prompts_per_state and context_len must be positive".into());
        }
        // start + context + at least one defect word + "anomaly" + "object" + end
        if self.context_len + 5 > self.encoder.context_length {
            return fail(format!(
                "context_len {} leaves no room for the defect words in a context of {}",
                self.context_len, self.encoder.context_length
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("agg_temperature", self.agg_temperature),
            ("pretrain.temperature", self.pretrain.temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("{name} must be positive, got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.aupro_fpr_limit > 0.0 && self.aupro_fpr_limit <= 1.0) {
            return fail(format!("aupro_fpr_limit must lie in (0, 1], got {}", self.aupro_fpr_limit));
        }
        if !(self.prefix_init_std >= 0.0) {
            return fail(format!("prefix_init_std must be >= 0, got {}", self.prefix_init_std));
        }
        if self.local.gamma < 0.0 || self.local.dice_eps < 0.0 {
            return fail("focal gamma and dice eps must be >= 0".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::metrics::write_text(path, &self.to_json()?)
    }

    /// Apply `key=value` overrides. Dotted keys reach nested sections
    /// (`pretrain.epochs=3`); values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` does not name a config section")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                let next = obj.get_mut(*part).expect("checked above");
                if i + 1 == parts.len() {
                    *next = value.clone();
                }
                slot = next;
            }
        }
        let cfg: RunConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
