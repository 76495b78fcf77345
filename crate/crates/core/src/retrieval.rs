//! Two-stage retrieval. Stage 1 pulls raw entries for each (product, intent)
//! pair from the catalog and the policy store; stage 2 chunks them, scores
//! every chunk against the standalone query and keeps the top k.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CatalogIndex;
use crate::exec::Execution;
use crate::intent::LEXICON;
use crate::model::{IntentLabel, ProductId, ProductRecord};
use crate::providers::ProviderError;
use crate::sts::{cosine, Embedder};
use crate::text::{normalize_text, tokens};

/// Upper bound on tokens per unstructured snippet.
pub const MAX_CHUNK_TOKENS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Structured,
    SemiStructured,
    Unstructured,
    Policy,
}

impl SourceKind {
    pub fn source_name(self) -> &'static str {
        match self {
            SourceKind::Structured => "attributes",
            SourceKind::SemiStructured => "qa",
            SourceKind::Unstructured => "reviews",
            SourceKind::Policy => "policies",
        }
    }
}

/// Which raw sources serve an intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourcePlan {
    /// Attributes, Q/A pairs and reviews of the product.
    ProductContent,
    /// Policy entries for the product plus attributes whose name matches the intent.
    PolicyAndAttributes,
}

pub fn source_plan(intent: IntentLabel) -> Option<SourcePlan> {
    use IntentLabel::*;
    match intent {
        NonDecision => None,
        ProductSpec | SizeAndFit | Variant | Authenticity => Some(SourcePlan::ProductContent),
        OffersAndDiscounts | PaymentOptions | Checkout | DeliverySla | ReturnPolicy
        | ProductExchange | Warranty | StockAvailability => Some(SourcePlan::PolicyAndAttributes),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EntryPayload {
    Attribute { name: String, value: String },
    QaPair { question: String, answer: String },
    Passage { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_kind: SourceKind,
    pub source_name: String,
    pub payload: EntryPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSlot {
    pub product_id: ProductId,
    pub intent: IntentLabel,
    pub entries: Vec<SourceEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBundle {
    /// One slot per requested (product, intent) pair, products outer, intents inner.
    pub slots: Vec<BundleSlot>,
    pub unknown_products: Vec<ProductId>,
}

impl SourceBundle {
    pub fn slot(&self, product_id: &str, intent: IntentLabel) -> Option<&BundleSlot> {
        self.slots
            .iter()
            .find(|s| s.product_id == product_id && s.intent == intent)
    }

    pub fn intents(&self) -> BTreeSet<IntentLabel> {
        self.slots.iter().map(|s| s.intent).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("no intents requested")]
    NoIntents,
    #[error("{0} is not a decision intent")]
    NonDecisionIntent(IntentLabel),
    #[error("policy store unavailable: {0}")]
    PolicyStoreUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub product_id: ProductId,
    pub intent: IntentLabel,
    pub text: String,
}

pub trait PolicySource: Send + Sync {
    fn policies(
        &self,
        product_id: &str,
        intent: IntentLabel,
    ) -> Result<Vec<String>, RetrievalError>;
}

/// In-memory policy texts keyed by product and intent, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyStore {
    entries: BTreeMap<(ProductId, IntentLabel), Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct PolicyFileError {
    pub line: usize,
    pub message: String,
}

impl PolicyStore {
    pub fn from_entries(entries: impl IntoIterator<Item = PolicyEntry>) -> Self {
        let mut store = Self::default();
        for e in entries {
            store
                .entries
                .entry((e.product_id, e.intent))
                .or_default()
                .push(e.text);
        }
        store
    }

    pub fn from_jsonl(jsonl: &str) -> Result<Self, PolicyFileError> {
        let mut entries = Vec::new();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: PolicyEntry = serde_json::from_str(line).map_err(|e| PolicyFileError {
                line: i + 1,
                message: e.to_string(),
            })?;
            if entry.text.trim().is_empty() {
                return Err(PolicyFileError {
                    line: i + 1,
                    message: "empty text".into(),
                });
            }
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl PolicySource for PolicyStore {
    fn policies(
        &self,
        product_id: &str,
        intent: IntentLabel,
    ) -> Result<Vec<String>, RetrievalError> {
        Ok(self
            .entries
            .get(&(product_id.to_string(), intent))
            .cloned()
            .unwrap_or_default())
    }
}

/// True when a normalized attribute name contains one of the intent's lexicon
/// phrases or a word of the label itself.
fn attribute_matches(name: &str, intent: IntentLabel) -> bool {
    let padded = format!(" {} ", normalize_text(name));
    let phrases = LEXICON[intent.index()].1;
    phrases.iter().any(|p| padded.contains(&format!(" {p} ")))
        || intent
            .as_str()
            .split('_')
            .filter(|w| w.len() > 3)
            .any(|w| padded.contains(&format!(" {w} ")))
}

fn attribute_entries<'a>(
    record: &'a ProductRecord,
    keep: impl Fn(&str) -> bool + 'a,
) -> impl Iterator<Item = SourceEntry> + 'a {
    record
        .structured
        .iter()
        .filter(move |(n, _)| keep(n))
        .map(|(name, value)| SourceEntry {
            source_kind: SourceKind::Structured,
            source_name: SourceKind::Structured.source_name().into(),
            payload: EntryPayload::Attribute {
                name: name.clone(),
                value: value.clone(),
            },
        })
}

fn slot_entries(
    record: &ProductRecord,
    intent: IntentLabel,
    policies: &dyn PolicySource,
) -> Result<Vec<SourceEntry>, RetrievalError> {
    let plan = source_plan(intent).ok_or(RetrievalError::NonDecisionIntent(intent))?;
    let mut out = Vec::new();
    match plan {
        SourcePlan::ProductContent => {
            out.extend(attribute_entries(record, |_| true));
            out.extend(record.semi_structured.iter().map(|qa| SourceEntry {
                source_kind: SourceKind::SemiStructured,
                source_name: SourceKind::SemiStructured.source_name().into(),
                payload: EntryPayload::QaPair {
                    question: qa.question.clone(),
                    answer: qa.answer.clone(),
                },
            }));
            out.extend(record.unstructured.iter().map(|text| SourceEntry {
                source_kind: SourceKind::Unstructured,
                source_name: SourceKind::Unstructured.source_name().into(),
                payload: EntryPayload::Passage { text: text.clone() },
            }));
        }
        SourcePlan::PolicyAndAttributes => {
            out.extend(
                policies
                    .policies(&record.product_id, intent)?
                    .into_iter()
                    .map(|text| SourceEntry {
                        source_kind: SourceKind::Policy,
                        source_name: SourceKind::Policy.source_name().into(),
                        payload: EntryPayload::Passage { text },
                    }),
            );
            out.extend(attribute_entries(record, move |n| {
                attribute_matches(n, intent)
            }));
        }
    }
    Ok(out)
}

/// Stage 1: pull raw entries for every (product, intent) pair. Unknown
/// products get empty slots and are listed in `unknown_products`.
pub fn orchestrate(
    intents: &[IntentLabel],
    product_ids: &[ProductId],
    catalog: &CatalogIndex,
    policies: &dyn PolicySource,
    exec: Execution,
) -> Result<SourceBundle, RetrievalError> {
    if intents.is_empty() {
        return Err(RetrievalError::NoIntents);
    }
    if let Some(bad) = intents.iter().find(|i| !i.is_decision()) {
        return Err(RetrievalError::NonDecisionIntent(*bad));
    }
    let pairs: Vec<(&ProductId, IntentLabel)> = product_ids
        .iter()
        .flat_map(|p| intents.iter().map(move |i| (p, *i)))
        .collect();
    let filled = exec.map(&pairs, |(pid, intent)| match catalog.get(pid) {
        Some(record) => slot_entries(record, *intent, policies),
        None => Ok(Vec::new()),
    });
    let mut bundle = SourceBundle::default();
    for ((pid, intent), entries) in pairs.into_iter().zip(filled) {
        bundle.slots.push(BundleSlot {
            product_id: pid.clone(),
            intent,
            entries: entries?,
        });
    }
    bundle.unknown_products = product_ids
        .iter()
        .filter(|p| catalog.get(p).is_none())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSnippet {
    pub snippet_id: String,
    pub product_id: ProductId,
    pub intent: IntentLabel,
    pub source_kind: SourceKind,
    pub text: String,
    pub score: f64,
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

/// Greedy sentence packing into chunks of at most `max_tokens` tokens. A
/// sentence longer than the limit is cut at token boundaries on its own.
pub fn pack_sentences(text: &str, max_tokens: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut current_len = 0;
    for sentence in split_sentences(text) {
        let n = tokens(sentence).len();
        if n == 0 {
            continue;
        }
        if n > max_tokens {
            if !current.is_empty() {
                chunks.push(current.join(" "));
                current.clear();
                current_len = 0;
            }
            let words: Vec<&str> = sentence.split_whitespace().collect();
            let mut piece: Vec<&str> = Vec::new();
            let mut piece_len = 0;
            for w in words {
                let wl = tokens(w).len();
                if piece_len + wl > max_tokens && !piece.is_empty() {
                    chunks.push(piece.join(" "));
                    piece.clear();
                    piece_len = 0;
                }
                piece.push(w);
                piece_len += wl;
            }
            if !piece.is_empty() {
                chunks.push(piece.join(" "));
            }
            continue;
        }
        if current_len + n > max_tokens {
            chunks.push(current.join(" "));
            current.clear();
            current_len = 0;
        }
        current.push(sentence);
        current_len += n;
    }
    if !current.is_empty() {
        chunks.push(current.join(" "));
    }
    chunks
}

/// Unscored snippets with ids `product:intent:source:ordinal`. Policy text is
/// prefixed with the intent name.
pub fn chunk(bundle: &SourceBundle) -> Vec<ContextSnippet> {
    let mut out = Vec::new();
    for slot in &bundle.slots {
        let mut ordinals: BTreeMap<&str, usize> = BTreeMap::new();
        for entry in &slot.entries {
            let texts = match &entry.payload {
                EntryPayload::Attribute { name, value } => vec![format!("{name}: {value}")],
                EntryPayload::QaPair { question, answer } => {
                    vec![format!("Q: {question} A: {answer}")]
                }
                EntryPayload::Passage { text } if entry.source_kind == SourceKind::Policy => {
                    let label = slot.intent.human_name();
                    pack_sentences(text, MAX_CHUNK_TOKENS)
                        .into_iter()
                        .map(|t| format!("{label}: {t}"))
                        .collect()
                }
                EntryPayload::Passage { text } => pack_sentences(text, MAX_CHUNK_TOKENS),
            };
            for text in texts {
                if text.trim().is_empty() {
                    continue;
                }
                let ordinal = ordinals.entry(&entry.source_name).or_default();
                out.push(ContextSnippet {
                    snippet_id: format!(
                        "{}:{}:{}:{}",
                        slot.product_id, slot.intent, entry.source_name, ordinal
                    ),
                    product_id: slot.product_id.clone(),
                    intent: slot.intent,
                    source_kind: entry.source_kind,
                    text,
                    score: 0.0,
                });
                *ordinal += 1;
            }
        }
    }
    out
}

/// Scores texts against a query; higher means more relevant.
pub trait SnippetScorer: Send + Sync {
    fn score(
        &self,
        query: &str,
        texts: &[&str],
        exec: Execution,
    ) -> Result<Vec<f64>, ProviderError>;
}

/// Cosine between embeddings.
pub struct EmbeddingScorer<'a>(pub &'a dyn Embedder);

impl SnippetScorer for EmbeddingScorer<'_> {
    fn score(
        &self,
        query: &str,
        texts: &[&str],
        exec: Execution,
    ) -> Result<Vec<f64>, ProviderError> {
        let q = self.0.embed(query)?;
        let vs = self.0.embed_many(texts, exec)?;
        vs.iter()
            .map(|v| cosine(&q, v).map_err(|e| ProviderError::InvalidReply(e.to_string())))
            .collect()
    }
}

/// Jaccard overlap of normalized token sets. Benchmark baseline only.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl SnippetScorer for LexicalOverlapScorer {
    fn score(
        &self,
        query: &str,
        texts: &[&str],
        exec: Execution,
    ) -> Result<Vec<f64>, ProviderError> {
        let q: BTreeSet<String> = tokens(query).into_iter().collect();
        Ok(exec.map(texts, |t| {
            let s: BTreeSet<String> = tokens(t).into_iter().collect();
            let union = q.union(&s).count();
            if union == 0 {
                0.0
            } else {
                q.intersection(&s).count() as f64 / union as f64
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedContext {
    pub query: String,
    pub snippets: Vec<ContextSnippet>,
}

fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Stage 2: score every snippet against `query` and keep the best `k`
/// (score descending, snippet id ascending).
pub fn reduce(
    query: &str,
    mut snippets: Vec<ContextSnippet>,
    scorer: &dyn SnippetScorer,
    k: usize,
    exec: Execution,
) -> Result<ReducedContext, ProviderError> {
    let texts: Vec<&str> = snippets.iter().map(|s| s.text.as_str()).collect();
    let scores = scorer.score(query, &texts, exec)?;
    for (s, score) in snippets.iter_mut().zip(scores) {
        s.score = score;
    }
    snippets.sort_by(|a, b| by_score_then_id((a.score, &a.snippet_id), (b.score, &b.snippet_id)));
    snippets.truncate(k);
    Ok(ReducedContext {
        query: query.to_string(),
        snippets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallBenchCase {
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub truth_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecallError {
    #[error("no benchmark cases")]
    EmptyCases,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("case {index}: {reason}")]
    InvalidCase { index: usize, reason: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl RecallBenchCase {
    pub fn validate(&self) -> Result<(), String> {
        if self.truth_ids.is_empty() {
            return Err("truth_ids is empty".into());
        }
        let ids: BTreeSet<&str> = self.candidates.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != self.candidates.len() {
            return Err("duplicate candidate id".into());
        }
        if let Some(t) = self.truth_ids.iter().find(|t| !ids.contains(t.as_str())) {
            return Err(format!("truth id {t} is not a candidate"));
        }
        Ok(())
    }
}

/// Parses benchmark JSONL, reporting the first bad line (1-based).
pub fn load_recall_cases(jsonl: &str) -> Result<Vec<RecallBenchCase>, (usize, String)> {
    let mut cases = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: RecallBenchCase =
            serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
        case.validate().map_err(|e| (i + 1, e))?;
        cases.push(case);
    }
    Ok(cases)
}

/// 1-based rank of the best-placed ground-truth candidate in each case.
pub fn truth_ranks(
    cases: &[RecallBenchCase],
    scorer: &dyn SnippetScorer,
    exec: Execution,
) -> Result<Vec<usize>, RecallError> {
    if cases.is_empty() {
        return Err(RecallError::EmptyCases);
    }
    for (index, c) in cases.iter().enumerate() {
        c.validate()
            .map_err(|reason| RecallError::InvalidCase { index, reason })?;
    }
    let ranked = exec.map(cases, |case| -> Result<usize, ProviderError> {
        let texts: Vec<&str> = case.candidates.iter().map(|c| c.text.as_str()).collect();
        // the candidates are scored sequentially here; cases are the parallel axis
        let scores = scorer.score(&case.query, &texts, Execution::Sequential)?;
        let mut order: Vec<(f64, &str)> = scores
            .into_iter()
            .zip(case.candidates.iter().map(|c| c.id.as_str()))
            .collect();
        order.sort_by(|a, b| by_score_then_id(*a, *b));
        let truth: BTreeSet<&str> = case.truth_ids.iter().map(String::as_str).collect();
        Ok(order
            .iter()
            .position(|(_, id)| truth.contains(id))
            .expect("truth ids are candidates")
            + 1)
    });
    ranked
        .into_iter()
        .map(|r| r.map_err(RecallError::from))
        .collect()
}

/// Fraction of cases whose top `k` contains a ground-truth candidate.
pub fn recall_at_k(
    cases: &[RecallBenchCase],
    scorer: &dyn SnippetScorer,
    k: usize,
    exec: Execution,
) -> Result<f64, RecallError> {
    if k == 0 {
        return Err(RecallError::ZeroK);
    }
    let ranks = truth_ranks(cases, scorer, exec)?;
    Ok(recall_from_ranks(&ranks, k))
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64
}
