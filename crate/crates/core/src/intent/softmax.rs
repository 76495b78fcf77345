//! Bag-of-words softmax regression over the intent taxonomy, trained by
//! seeded mini-batch gradient descent on mean cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IntentLabel, INTENT_COUNT};
use crate::providers::ProviderError;
use crate::text::tokens;

use super::{IntentClassifier, IntentDistribution};

const BATCH_SIZE: usize = 8;

/// Sparse token counts: (vocabulary index, count), sorted by index.
pub type SparseFeatures = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxIntentModel {
    vocabulary: BTreeMap<String, usize>,
    /// Row-major, one row per label: `vocabulary.len()` weights then the bias.
    weights: Vec<f64>,
}

impl SoftmaxIntentModel {
    pub fn zeros(vocabulary: BTreeMap<String, usize>) -> Self {
        let width = vocabulary.len() + 1;
        Self {
            vocabulary,
            weights: vec![0.0; INTENT_COUNT * width],
        }
    }

    pub fn from_parts(vocabulary: BTreeMap<String, usize>, weights: Vec<f64>) -> Option<Self> {
        let mut indices: Vec<usize> = vocabulary.values().copied().collect();
        indices.sort_unstable();
        let dense = indices.iter().enumerate().all(|(i, v)| i == *v);
        let ok = dense
            && weights.len() == INTENT_COUNT * (vocabulary.len() + 1)
            && weights.iter().all(|w| w.is_finite());
        ok.then_some(Self {
            vocabulary,
            weights,
        })
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn width(&self) -> usize {
        self.vocabulary.len() + 1
    }

    pub fn featurize(&self, text: &str) -> SparseFeatures {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokens(text) {
            if let Some(&i) = self.vocabulary.get(&t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        counts.into_iter().collect()
    }

    fn probabilities(&self, x: &SparseFeatures) -> [f64; INTENT_COUNT] {
        let width = self.width();
        let bias = width - 1;
        let mut logits = [0.0; INTENT_COUNT];
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &self.weights[k * width..(k + 1) * width];
            *logit = row[bias] + x.iter().map(|(i, v)| row[*i] * v).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut exps = logits.map(|l| (l - max).exp());
        let z: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= z;
        }
        exps
    }

    pub fn predict(&self, text: &str) -> IntentDistribution {
        let p = self.probabilities(&self.featurize(text));
        IntentDistribution::from_weights(p).expect("softmax output is a distribution")
    }

    /// Mean cross-entropy over `examples` and its gradient with respect to the
    /// flattened weights.
    pub fn loss_and_gradient(&self, examples: &[(SparseFeatures, IntentLabel)]) -> (f64, Vec<f64>) {
        let width = self.width();
        let bias = width - 1;
        let n = examples.len().max(1) as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for (x, label) in examples {
            let p = self.probabilities(x);
            loss -= p[label.index()].max(f64::MIN_POSITIVE).ln();
            for (k, pk) in p.iter().enumerate() {
                let delta = (pk - f64::from(u8::from(k == label.index()))) / n;
                let row = &mut grad[k * width..(k + 1) * width];
                row[bias] += delta;
                for (i, v) in x {
                    row[*i] += delta * v;
                }
            }
        }
        (loss / n, grad)
    }
}

impl IntentClassifier for SoftmaxIntentModel {
    fn classify(&self, text: &str) -> Result<IntentDistribution, ProviderError> {
        Ok(self.predict(text))
    }
}

/// Fits a softmax model. Vocabulary indices follow sorted token order and the
/// weights start at zero, so the result depends only on the data and `seed`.
pub fn train_softmax(
    dataset: &[(String, String)],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<SoftmaxIntentModel, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut labelled = Vec::with_capacity(dataset.len());
    for (text, label) in dataset {
        let label: IntentLabel = label
            .parse()
            .map_err(|_| TrainError::UnknownLabel(label.clone()))?;
        labelled.push((text.as_str(), label));
    }
    let mut vocab_tokens: Vec<String> = labelled.iter().flat_map(|(t, _)| tokens(t)).collect();
    vocab_tokens.sort();
    vocab_tokens.dedup();
    let vocabulary = vocab_tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let mut model = SoftmaxIntentModel::zeros(vocabulary);
    let examples: Vec<(SparseFeatures, IntentLabel)> = labelled
        .iter()
        .map(|(t, l)| (model.featurize(t), *l))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(BATCH_SIZE) {
            let batch: Vec<_> = batch.iter().map(|i| examples[*i].clone()).collect();
            let (loss, grad) = model.loss_and_gradient(&batch);
            if !loss.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            for (w, g) in model.weights.iter_mut().zip(grad) {
                *w -= learning_rate * g;
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct DatasetError {
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    text: String,
    label: String,
}

/// Parses `{"text": ..., "label": ...}` lines; blank lines are skipped.
pub fn load_intent_dataset(jsonl: &str) -> Result<Vec<(String, String)>, Vec<DatasetError>> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetLine>(line) {
            Ok(row) => match row.label.parse::<IntentLabel>() {
                Ok(_) => rows.push((row.text, row.label)),
                Err(e) => errors.push(DatasetError {
                    line: i + 1,
                    message: e.to_string(),
                }),
            },
            Err(e) => errors.push(DatasetError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::separable_intent_set;
    use rand::Rng;

    #[test]
    fn empty_and_unknown_label() {
        assert_eq!(
            train_softmax(&[], 10, 0.1, 1),
            Err(TrainError::EmptyDataset)
        );
        let bad = vec![("x".to_string(), "refunds".to_string())];
        assert_eq!(
            train_softmax(&bad, 10, 0.1, 1),
            Err(TrainError::UnknownLabel("refunds".into()))
        );
    }

    #[test]
    fn fits_a_single_example() {
        let data = vec![("warranty period?".to_string(), "warranty".to_string())];
        let model = train_softmax(&data, 200, 0.5, 7).unwrap();
        assert_eq!(
            model.predict("warranty period?").argmax(),
            IntentLabel::Warranty
        );
    }

    #[test]
    fn separable_set_reaches_full_training_accuracy() {
        let data = separable_intent_set();
        let model = train_softmax(&data, 100, 0.5, 7).unwrap();
        for (text, label) in &data {
            assert_eq!(model.predict(text).argmax().as_str(), label, "{text}");
        }
        // same seed, same model
        assert_eq!(model, train_softmax(&data, 100, 0.5, 7).unwrap());
    }

    #[test]
    fn predictions_are_distributions() {
        let model = train_softmax(&separable_intent_set(), 5, 0.5, 3).unwrap();
        for text in ["", "warranty", "unseen words only"] {
            let d = model.predict(text);
            assert!((d.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let vocab: BTreeMap<String, usize> = (0..4).map(|i| (format!("t{i}"), i)).collect();
            let mut model = SoftmaxIntentModel::zeros(vocab);
            for w in model.weights_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            let examples: Vec<(SparseFeatures, IntentLabel)> = (0..5)
                .map(|_| {
                    let mut x = SparseFeatures::new();
                    for i in 0..4 {
                        if rng.gen_bool(0.6) {
                            x.push((i, rng.gen_range(1.0..3.0)));
                        }
                    }
                    (x, IntentLabel::ALL[rng.gen_range(0..INTENT_COUNT)])
                })
                .collect();
            let (_, grad) = model.loss_and_gradient(&examples);
            let h = 1e-6;
            for j in 0..model.weights().len() {
                let mut plus = model.clone();
                plus.weights_mut()[j] += h;
                let mut minus = model.clone();
                minus.weights_mut()[j] -= h;
                let fd = (plus.loss_and_gradient(&examples).0
                    - minus.loss_and_gradient(&examples).0)
                    / (2.0 * h);
                let denom = grad[j].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[j] - fd).abs() / denom < 1e-4 || (grad[j] - fd).abs() < 1e-9,
                    "j={j} {} vs {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn dataset_parsing() {
        let ok = load_intent_dataset("{\"text\":\"a\",\"label\":\"warranty\"}\n\n").unwrap();
        assert_eq!(ok, vec![("a".to_string(), "warranty".to_string())]);
        let errs = load_intent_dataset("{\"text\":\"a\",\"label\":\"warranty\"}\nnot json\n{\"text\":\"b\",\"label\":\"nope\"}").unwrap_err();
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 3]);
    }
}
