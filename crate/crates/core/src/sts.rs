//! Bi-encoder embeddings for semantic scoring and the triplet-margin trainer.
//!
//! The base featurizer is a signed hashed bag of words (64-bit FNV-1a, bucket
//! `hash mod dim`, sign from bit 63). [`LinearEmbedder`] puts a trainable
//! square projection on top of it and re-normalizes the output; training
//! minimizes `sum_i max(0, |f(q)-f(p)|^2 - |f(q)-f(n)|^2 + alpha)`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::providers::{JsonEndpoint, ProviderError};
use crate::text::tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn squared_distance(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("triplet {0} has an empty text")]
    EmptyText(usize),
    #[error("training diverged at epoch {0}")]
    Divergence(usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// English function words skipped by [`HashedBowEmbedder::content_words`].
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "do", "does", "for", "from", "has",
    "have", "how", "i", "in", "is", "it", "its", "me", "my", "of", "on", "or", "s", "that", "the",
    "there", "this", "to", "was", "what", "when", "which", "will", "with", "you",
];

/// Unit-norm sparse hashed bag of words, sorted by bucket.
pub fn hashed_bow_sparse(text: &str, dim: usize) -> Vec<(usize, f64)> {
    sparse_from_tokens(tokens(text), dim)
}

fn sparse_from_tokens(tokens: impl IntoIterator<Item = String>, dim: usize) -> Vec<(usize, f64)> {
    let mut buckets: BTreeMap<usize, f64> = BTreeMap::new();
    for t in tokens {
        let h = fnv1a64(t.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        *buckets.entry((h % dim as u64) as usize).or_default() += sign;
    }
    let norm = buckets.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Vec::new();
    }
    buckets
        .into_iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|(i, v)| (i, v / norm))
        .collect()
}

pub fn embed_hashed_bow(text: &str, dim: usize) -> EmbeddingVector {
    let mut v = vec![0.0; dim];
    for (i, x) in hashed_bow_sparse(text, dim) {
        v[i] = x;
    }
    EmbeddingVector(v)
}

/// Cosine similarity; 0.0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, StsError> {
    if a.dim() != b.dim() {
        return Err(StsError::DimMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;

    fn embed_many(
        &self,
        texts: &[&str],
        exec: Execution,
    ) -> Result<Vec<EmbeddingVector>, ProviderError> {
        exec.map(texts, |t| self.embed(t)).into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowEmbedder {
    pub dim: usize,
    pub skip_function_words: bool,
}

impl HashedBowEmbedder {
    /// Exactly [`embed_hashed_bow`].
    pub const fn reference(dim: usize) -> Self {
        Self {
            dim,
            skip_function_words: false,
        }
    }

    /// Drops [`FUNCTION_WORDS`] before hashing; text made only of function
    /// words embeds to the zero vector.
    pub const fn content_words(dim: usize) -> Self {
        Self {
            dim,
            skip_function_words: true,
        }
    }
}

impl Embedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if !self.skip_function_words {
            return Ok(embed_hashed_bow(text, self.dim));
        }
        let content = tokens(text)
            .into_iter()
            .filter(|t| !FUNCTION_WORDS.contains(&t.as_str()));
        let mut v = vec![0.0; self.dim];
        for (i, x) in sparse_from_tokens(content, self.dim) {
            v[i] = x;
        }
        Ok(EmbeddingVector(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "q")]
    pub query: String,
    #[serde(rename = "p")]
    pub positive: String,
    #[serde(rename = "n")]
    pub negative: String,
}

impl Triplet {
    pub fn new(q: impl Into<String>, p: impl Into<String>, n: impl Into<String>) -> Self {
        Self {
            query: q.into(),
            positive: p.into(),
            negative: n.into(),
        }
    }
}

fn check_batch(batch: &[Triplet]) -> Result<(), StsError> {
    if batch.is_empty() {
        return Err(StsError::EmptyBatch);
    }
    for (i, t) in batch.iter().enumerate() {
        if [&t.query, &t.positive, &t.negative]
            .iter()
            .any(|s| s.trim().is_empty())
        {
            return Err(StsError::EmptyText(i));
        }
    }
    Ok(())
}

/// Sum over the batch of `max(0, d(q,p)^2 - d(q,n)^2 + alpha)` on embedder outputs.
pub fn triplet_loss(
    embedder: &dyn Embedder,
    batch: &[Triplet],
    alpha: f64,
) -> Result<f64, StsError> {
    check_batch(batch)?;
    let mut total = 0.0;
    for t in batch {
        let q = embedder.embed(&t.query)?;
        let p = embedder.embed(&t.positive)?;
        let n = embedder.embed(&t.negative)?;
        if q.dim() != p.dim() || q.dim() != n.dim() {
            return Err(StsError::DimMismatch(q.dim(), p.dim().max(n.dim())));
        }
        total += (q.squared_distance(&p) - q.squared_distance(&n) + alpha).max(0.0);
    }
    Ok(total)
}

/// Square projection over the hashed bag of words, output re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedder {
    dim: usize,
    /// Row-major `dim x dim`.
    projection: Vec<f64>,
    pub alpha: f64,
}

/// Gradient contribution for one input column.
type ColumnGrad = (usize, Vec<f64>);

impl LinearEmbedder {
    pub fn identity(dim: usize, alpha: f64) -> Self {
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        Self {
            dim,
            projection,
            alpha,
        }
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    /// Unnormalized projection `W x` for a sparse input.
    fn project(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let mut u = vec![0.0; self.dim];
        for (j, xj) in x {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.projection[i * self.dim + j] * xj;
            }
        }
        u
    }

    pub fn embed_vector(&self, text: &str) -> EmbeddingVector {
        let u = self.project(&hashed_bow_sparse(text, self.dim));
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return EmbeddingVector(u);
        }
        EmbeddingVector(u.into_iter().map(|v| v / norm).collect())
    }

    /// Loss of one triplet and its sparse gradient (by input column).
    fn triplet_terms(&self, t: &Triplet, alpha: f64) -> (f64, Vec<ColumnGrad>) {
        let xs = [&t.query, &t.positive, &t.negative].map(|s| hashed_bow_sparse(s, self.dim));
        let us = xs.each_ref().map(|x| self.project(x));
        let norms = us
            .each_ref()
            .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt());
        let fs: [Vec<f64>; 3] = std::array::from_fn(|k| {
            if norms[k] == 0.0 {
                us[k].clone()
            } else {
                us[k].iter().map(|v| v / norms[k]).collect()
            }
        });
        let sq =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let arg = sq(&fs[0], &fs[1]) - sq(&fs[0], &fs[2]) + alpha;
        if arg <= 0.0 {
            // flat side of the hinge, and subgradient 0 at the kink
            return (0.0, Vec::new());
        }
        let (q, p, n) = (&fs[0], &fs[1], &fs[2]);
        let grads_f: [Vec<f64>; 3] = [
            (0..self.dim).map(|i| 2.0 * (n[i] - p[i])).collect(),
            (0..self.dim).map(|i| 2.0 * (p[i] - q[i])).collect(),
            (0..self.dim).map(|i| 2.0 * (q[i] - n[i])).collect(),
        ];
        let mut columns = Vec::new();
        for k in 0..3 {
            if norms[k] == 0.0 {
                continue;
            }
            let f = &fs[k];
            let g = &grads_f[k];
            let fg: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
            let du: Vec<f64> = (0..self.dim)
                .map(|i| (g[i] - f[i] * fg) / norms[k])
                .collect();
            for (j, xj) in &xs[k] {
                columns.push((*j, du.iter().map(|d| d * xj).collect()));
            }
        }
        (arg, columns)
    }

    /// Summed triplet loss and its gradient with respect to the projection
    /// (row-major, same layout as [`LinearEmbedder::projection`]).
    pub fn loss_and_gradient(
        &self,
        batch: &[Triplet],
        alpha: f64,
        exec: Execution,
    ) -> (f64, Vec<f64>) {
        let terms = exec.map(batch, |t| self.triplet_terms(t, alpha));
        let mut grad = vec![0.0; self.dim * self.dim];
        let mut loss = 0.0;
        for (l, columns) in terms {
            loss += l;
            for (j, du) in columns {
                for (i, d) in du.into_iter().enumerate() {
                    grad[i * self.dim + j] += d;
                }
            }
        }
        (loss, grad)
    }
}

impl Embedder for LinearEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        Ok(self.embed_vector(text))
    }
}

/// On disk only the projection columns that differ from the identity are kept.
#[derive(Serialize, Deserialize)]
struct StoredEmbedder {
    dim: usize,
    alpha: f64,
    columns: BTreeMap<usize, Vec<f64>>,
}

impl Serialize for LinearEmbedder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut columns = BTreeMap::new();
        for j in 0..self.dim {
            let col: Vec<f64> = (0..self.dim)
                .map(|i| self.projection[i * self.dim + j])
                .collect();
            let is_identity = col
                .iter()
                .enumerate()
                .all(|(i, v)| *v == f64::from(u8::from(i == j)));
            if !is_identity {
                columns.insert(j, col);
            }
        }
        StoredEmbedder {
            dim: self.dim,
            alpha: self.alpha,
            columns,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinearEmbedder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let stored = StoredEmbedder::deserialize(d)?;
        let mut e = LinearEmbedder::identity(stored.dim, stored.alpha);
        for (j, col) in stored.columns {
            if j >= stored.dim || col.len() != stored.dim || col.iter().any(|v| !v.is_finite()) {
                return Err(serde::de::Error::custom(format!(
                    "bad projection column {j}"
                )));
            }
            for (i, v) in col.into_iter().enumerate() {
                e.projection[i * stored.dim + j] = v;
            }
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletTrainConfig {
    pub dim: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TripletTrainConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            alpha: 0.5,
            epochs: 50,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripletTrainReport {
    /// Mean loss before training, then after each epoch.
    pub mean_losses: Vec<f64>,
}

/// Full-batch gradient descent on the mean triplet loss, starting from the
/// identity projection.
pub fn train_triplet(
    triplets: &[Triplet],
    config: &TripletTrainConfig,
    exec: Execution,
) -> Result<(LinearEmbedder, TripletTrainReport), StsError> {
    check_batch(triplets)?;
    let mut model = LinearEmbedder::identity(config.dim, config.alpha);
    let n = triplets.len() as f64;
    let mut mean_losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, grad) = model.loss_and_gradient(triplets, config.alpha, exec);
        let mean = loss / n;
        if !mean.is_finite() {
            return Err(StsError::Divergence(epoch));
        }
        mean_losses.push(mean);
        if epoch == config.epochs || loss == 0.0 {
            break;
        }
        for (w, g) in model.projection.iter_mut().zip(grad) {
            *w -= config.learning_rate * g / n;
        }
    }
    Ok((model, TripletTrainReport { mean_losses }))
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct TripletFileError {
    pub line: usize,
    pub message: String,
}

/// Parses `{"q": ..., "p": ..., "n": ...}` lines.
pub fn load_triplets(jsonl: &str) -> Result<Vec<Triplet>, Vec<TripletFileError>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Triplet>(line) {
            Ok(t)
                if [&t.query, &t.positive, &t.negative]
                    .iter()
                    .all(|s| !s.trim().is_empty()) =>
            {
                out.push(t)
            }
            Ok(_) => errors.push(TripletFileError {
                line: i + 1,
                message: "empty text".into(),
            }),
            Err(e) => errors.push(TripletFileError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

/// `POST {texts: [...]}` returning `{vectors: [[...]]}`; dimensions checked.
pub struct HttpEmbeddingProvider {
    endpoint: JsonEndpoint,
    dim: usize,
}

impl HttpEmbeddingProvider {
    pub fn new(url: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: JsonEndpoint::new(url, Duration::from_secs(5)),
            dim,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f64>>,
}

impl Embedder for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let mut v = self.embed_many(&[text], Execution::Sequential)?;
        Ok(v.remove(0))
    }

    fn embed_many(
        &self,
        texts: &[&str],
        _exec: Execution,
    ) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let reply: EmbedReply = self.endpoint.post(&EmbedRequest { texts })?;
        if reply.vectors.len() != texts.len() {
            return Err(ProviderError::InvalidReply(format!(
                "expected {} vectors, got {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                    Err(ProviderError::InvalidReply(format!(
                        "vector of dim {} (expected {})",
                        v.len(),
                        self.dim
                    )))
                } else {
                    Ok(EmbeddingVector(v))
                }
            })
            .collect()
    }
}
