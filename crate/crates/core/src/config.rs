//! Pipeline configuration, loaded from a JSON object with strict keys.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_IDK_MESSAGE: &str = "I don't have enough information to answer that.";
pub const DEFAULT_OUT_OF_SCOPE_MESSAGE: &str =
    "I can help with questions about products. For browsing or search, please use the search bar.";
pub const DEFAULT_CLARIFICATION_MESSAGE: &str = "Which product are you asking about?";

/// Where a pipeline stage gets its model from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ProviderSelector {
    #[default]
    Builtin,
    /// Base URL of an HTTP endpoint.
    External(String),
}

impl Serialize for ProviderSelector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ProviderSelector::Builtin => s.serialize_str("builtin"),
            ProviderSelector::External(url) => s.serialize_str(url),
        }
    }
}

impl<'de> Deserialize<'de> for ProviderSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SelectorVisitor;
        impl Visitor<'_> for SelectorVisitor {
            type Value = ProviderSelector;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"builtin\" or an http(s) URL")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "builtin" {
                    Ok(ProviderSelector::Builtin)
                } else if v.starts_with("http://") || v.starts_with("https://") {
                    Ok(ProviderSelector::External(v.to_owned()))
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_str(SelectorVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tau_non_decision: f64,
    pub tau_entropy: f64,
    pub top_n_intents: usize,
    pub k_context: usize,
    pub alpha_margin: f64,
    pub embedding_dim: usize,
    pub tau_idk: f64,
    pub fuzzy_threshold: f64,
    pub saq_provider: ProviderSelector,
    pub intent_provider: ProviderSelector,
    pub embedding_provider: ProviderSelector,
    pub generation_provider: ProviderSelector,
    /// Product search endpoint for the last catalog-search fallback; disabled when absent.
    pub search_provider: Option<String>,
    pub idk_message: String,
    pub out_of_scope_message: String,
    pub clarification_message: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_non_decision: 0.5,
            tau_entropy: 0.5,
            top_n_intents: 3,
            k_context: 15,
            alpha_margin: 0.5,
            embedding_dim: 1024,
            tau_idk: 0.25,
            fuzzy_threshold: 0.85,
            saq_provider: ProviderSelector::Builtin,
            intent_provider: ProviderSelector::Builtin,
            embedding_provider: ProviderSelector::Builtin,
            generation_provider: ProviderSelector::Builtin,
            search_provider: None,
            idk_message: DEFAULT_IDK_MESSAGE.to_owned(),
            out_of_scope_message: DEFAULT_OUT_OF_SCOPE_MESSAGE.to_owned(),
            clarification_message: DEFAULT_CLARIFICATION_MESSAGE.to_owned(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}` out of range: {reason}")]
    Range { field: &'static str, reason: String },
}

fn check_unit(field: &'static str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Range {
            field,
            reason: format!("{v} not in [{lo}, {hi}]"),
        })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_unit("tau_non_decision", self.tau_non_decision, 0.0, 1.0)?;
        check_unit("tau_entropy", self.tau_entropy, 0.0, 1.0)?;
        check_unit("tau_idk", self.tau_idk, -1.0, 1.0)?;
        check_unit("fuzzy_threshold", self.fuzzy_threshold, 0.0, 1.0)?;
        if !(self.alpha_margin.is_finite() && self.alpha_margin >= 0.0) {
            return Err(ConfigError::Range {
                field: "alpha_margin",
                reason: format!("{} must be a nonnegative real", self.alpha_margin),
            });
        }
        if !(1..=12).contains(&self.top_n_intents) {
            return Err(ConfigError::Range {
                field: "top_n_intents",
                reason: format!("{} not in 1..=12", self.top_n_intents),
            });
        }
        if self.k_context == 0 {
            return Err(ConfigError::Range {
                field: "k_context",
                reason: "must be positive".into(),
            });
        }
        // the hashed featurizer needs at least 8 buckets
        if self.embedding_dim < 8 {
            return Err(ConfigError::Range {
                field: "embedding_dim",
                reason: format!("{} < 8", self.embedding_dim),
            });
        }
        if self.idk_message.trim().is_empty() {
            return Err(ConfigError::Range {
                field: "idk_message",
                reason: "must be nonempty".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a configuration document. An empty document yields all defaults.
pub fn load_config(document: &str) -> Result<PipelineConfig, ConfigError> {
    let config: PipelineConfig = if document.trim().is_empty() {
        PipelineConfig::default()
    } else {
        serde_json::from_str(document).map_err(|e| ConfigError::Parse(e.to_string()))?
    };
    config.validate()?;
    Ok(config)
}
