//! Intent distribution over the fixed taxonomy and entropy-based routing.
//!
//! Routing happens in two steps. A confident `non_decision` prediction routes
//! the query out of product QA. Otherwise the decision-intent probabilities are
//! renormalized and their Shannon entropy, divided by `ln 12`, picks between
//! the single dominant intent (low entropy) and the top-N intents (high
//! entropy).

mod lexicon;
mod softmax;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::model::{IntentLabel, DECISION_INTENT_COUNT, INTENT_COUNT};
use crate::providers::{JsonEndpoint, ProviderError};

pub use lexicon::{KeywordClassifier, LEXICON, LEXICON_VERSION, SMOOTHING};
pub use softmax::{
    load_intent_dataset, train_softmax, DatasetError, SoftmaxIntentModel, SparseFeatures,
    TrainError,
};

/// Tolerance on the total probability mass.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("probability for {0} is not in [0, 1]")]
    OutOfRange(IntentLabel),
    #[error("probabilities sum to {0}, not 1")]
    BadMass(f64),
    #[error("no positive weight to normalize")]
    ZeroMass,
}

/// Probabilities over the 13 taxonomy labels, in taxonomy order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentDistribution([f64; INTENT_COUNT]);

impl IntentDistribution {
    pub fn new(probs: [f64; INTENT_COUNT]) -> Result<Self, DistributionError> {
        for (label, p) in IntentLabel::ALL.iter().zip(probs) {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(DistributionError::OutOfRange(*label));
            }
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(DistributionError::BadMass(mass));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights to a distribution.
    pub fn from_weights(weights: [f64; INTENT_COUNT]) -> Result<Self, DistributionError> {
        for (label, w) in IntentLabel::ALL.iter().zip(weights) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(DistributionError::OutOfRange(*label));
            }
        }
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return Err(DistributionError::ZeroMass);
        }
        Ok(Self(weights.map(|w| w / mass)))
    }

    pub fn from_map(map: &BTreeMap<IntentLabel, f64>) -> Result<Self, DistributionError> {
        let mut weights = [0.0; INTENT_COUNT];
        for (label, p) in map {
            weights[label.index()] = *p;
        }
        Self::from_weights(weights)
    }

    pub fn prob(&self, label: IntentLabel) -> f64 {
        self.0[label.index()]
    }

    pub fn as_array(&self) -> &[f64; INTENT_COUNT] {
        &self.0
    }

    pub fn to_map(&self) -> BTreeMap<IntentLabel, f64> {
        IntentLabel::ALL
            .iter()
            .map(|l| (*l, self.0[l.index()]))
            .collect()
    }

    pub fn argmax(&self) -> IntentLabel {
        let mut best = IntentLabel::ALL[0];
        for l in IntentLabel::ALL {
            if self.prob(l) > self.prob(best) {
                best = l;
            }
        }
        best
    }

    /// Decision-intent probabilities rescaled to sum to one; `None` when the
    /// decision mass is zero.
    pub fn renormalized_decision(&self) -> Option<BTreeMap<IntentLabel, f64>> {
        let mass: f64 = IntentLabel::decision_labels().map(|l| self.prob(l)).sum();
        (mass > 0.0).then(|| {
            IntentLabel::decision_labels()
                .map(|l| (l, self.prob(l) / mass))
                .collect()
        })
    }
}

impl Serialize for IntentDistribution {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for IntentDistribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<IntentLabel, f64>::deserialize(d)?;
        if map.len() != INTENT_COUNT {
            return Err(serde::de::Error::custom(
                "all 13 intent labels are required",
            ));
        }
        let mut probs = [0.0; INTENT_COUNT];
        for (l, p) in map {
            probs[l.index()] = p;
        }
        IntentDistribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Shannon entropy of the renormalized decision probabilities divided by
/// `ln 12`; 0 when the decision mass is zero.
pub fn normalized_entropy(dist: &IntentDistribution) -> f64 {
    let Some(decision) = dist.renormalized_decision() else {
        return 0.0;
    };
    let h: f64 = decision
        .values()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (h / (DECISION_INTENT_COUNT as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    NonDecision,
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub kind: RoutingKind,
    /// Decision labels by descending probability.
    pub selected_intents: Vec<IntentLabel>,
    pub normalized_entropy: f64,
    pub renormalized_decision_probs: BTreeMap<IntentLabel, f64>,
}

pub fn route(dist: &IntentDistribution, config: &PipelineConfig) -> RoutingDecision {
    let entropy = normalized_entropy(dist);
    let renormalized = dist.renormalized_decision().unwrap_or_default();
    if dist.prob(IntentLabel::NonDecision) >= config.tau_non_decision || renormalized.is_empty() {
        return RoutingDecision {
            kind: RoutingKind::NonDecision,
            selected_intents: Vec::new(),
            normalized_entropy: entropy,
            renormalized_decision_probs: renormalized,
        };
    }
    // stable sort keeps taxonomy order among equal probabilities
    let mut ranked: Vec<(IntentLabel, f64)> = renormalized
        .iter()
        .filter(|(_, p)| **p > 0.0)
        .map(|(l, p)| (*l, *p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (kind, take) = if entropy < config.tau_entropy {
        (RoutingKind::Single, 1)
    } else {
        (RoutingKind::Multi, config.top_n_intents.min(ranked.len()))
    };
    RoutingDecision {
        kind,
        selected_intents: ranked.into_iter().take(take).map(|(l, _)| l).collect(),
        normalized_entropy: entropy,
        renormalized_decision_probs: renormalized,
    }
}

/// Produces an intent distribution for a standalone query.
pub trait IntentClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<IntentDistribution, ProviderError>;
}

/// `POST {standalone_query}` returning `{probabilities: {label: p}}`; replies
/// are renormalized, labels left out count as zero.
pub struct HttpIntentProvider {
    endpoint: JsonEndpoint,
}

impl HttpIntentProvider {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            endpoint: JsonEndpoint::new(url, Duration::from_secs(2)),
        }
    }
}

#[derive(Serialize)]
struct IntentRequest<'a> {
    standalone_query: &'a str,
}

#[derive(Deserialize)]
struct IntentReply {
    probabilities: BTreeMap<String, f64>,
}

impl IntentClassifier for HttpIntentProvider {
    fn classify(&self, text: &str) -> Result<IntentDistribution, ProviderError> {
        let reply: IntentReply = self.endpoint.post(&IntentRequest {
            standalone_query: text,
        })?;
        let mut map = BTreeMap::new();
        for (label, p) in reply.probabilities {
            let label: IntentLabel = label.parse().map_err(|e: crate::model::UnknownLabel| {
                ProviderError::InvalidReply(e.to_string())
            })?;
            map.insert(label, p);
        }
        IntentDistribution::from_map(&map).map_err(|e| ProviderError::InvalidReply(e.to_string()))
    }
}
