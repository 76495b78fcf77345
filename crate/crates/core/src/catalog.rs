//! Catalog index and the product-resolution cascade: exact match against the
//! conversation, fuzzy match against the conversation and then the catalog,
//! and finally a salient-name lookup through an optional search client.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProductId, ProductRecord, RecordError, Session};
use crate::providers::{JsonEndpoint, ProviderError};
use crate::saq::StandaloneQuery;
use crate::text::{normalize_text, spanned_tokens, tokens};

/// Maximum number of catalog candidates scored per fuzzy lookup.
pub const MAX_FUZZY_CANDIDATES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("duplicate product_id {0}")]
    DuplicateId(ProductId),
    #[error("products {first} and {second} share the normalized name {name:?}")]
    DuplicateName {
        name: String,
        first: ProductId,
        second: ProductId,
    },
    #[error(transparent)]
    InvalidRecord(#[from] RecordError),
}

/// Immutable lookup structure over a set of products.
#[derive(Debug, Clone, Default)]
pub struct CatalogIndex {
    records: BTreeMap<ProductId, ProductRecord>,
    by_name: HashMap<String, ProductId>,
    name_tokens: HashMap<ProductId, Vec<String>>,
    postings: BTreeMap<String, BTreeSet<ProductId>>,
    by_first_token: HashMap<String, Vec<ProductId>>,
}

/// A catalog name found inside a piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub product_id: ProductId,
    /// Byte span in the scanned text.
    pub start: usize,
    pub end: usize,
}

pub fn build_index(records: Vec<ProductRecord>) -> Result<CatalogIndex, CatalogError> {
    let mut index = CatalogIndex::default();
    for record in records {
        record.validate()?;
        if index.records.contains_key(&record.product_id) {
            return Err(CatalogError::DuplicateId(record.product_id));
        }
        let norm = normalize_text(&record.canonical_name);
        if let Some(first) = index.by_name.get(&norm) {
            return Err(CatalogError::DuplicateName {
                name: norm,
                first: first.clone(),
                second: record.product_id,
            });
        }
        let toks: Vec<String> = norm
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        for t in &toks {
            index
                .postings
                .entry(t.clone())
                .or_default()
                .insert(record.product_id.clone());
        }
        if let Some(first) = toks.first() {
            index
                .by_first_token
                .entry(first.clone())
                .or_default()
                .push(record.product_id.clone());
        }
        index.by_name.insert(norm, record.product_id.clone());
        index.name_tokens.insert(record.product_id.clone(), toks);
        index.records.insert(record.product_id.clone(), record);
    }
    // longest names first so the mention scan prefers the most specific match
    for ids in index.by_first_token.values_mut() {
        let name_tokens = &index.name_tokens;
        ids.sort_by(|a, b| {
            name_tokens[b]
                .len()
                .cmp(&name_tokens[a].len())
                .then_with(|| a.cmp(b))
        });
    }
    Ok(index)
}

impl CatalogIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProductRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProductRecord> {
        self.records.values()
    }

    pub fn canonical_name(&self, id: &str) -> Option<&str> {
        self.records.get(id).map(|r| r.canonical_name.as_str())
    }

    /// Looks a product up by any text whose normalized form equals a canonical name.
    pub fn id_by_name(&self, name: &str) -> Option<&ProductId> {
        self.by_name.get(&normalize_text(name))
    }

    pub fn in_vocabulary(&self, token: &str) -> bool {
        self.postings.contains_key(token)
    }

    /// Non-overlapping catalog-name mentions in `text`, left to right; at each
    /// position the longest matching name wins.
    pub fn find_mentions(&self, text: &str) -> Vec<Mention> {
        let toks = spanned_tokens(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let found = self.by_first_token.get(&toks[i].norm).and_then(|ids| {
                ids.iter().find(|id| {
                    let name = &self.name_tokens[*id];
                    i + name.len() <= toks.len()
                        && name.iter().zip(&toks[i..]).all(|(a, b)| *a == b.norm)
                })
            });
            match found {
                Some(id) => {
                    let n = self.name_tokens[id].len();
                    out.push(Mention {
                        product_id: id.clone(),
                        start: toks[i].start,
                        end: toks[i + n - 1].end,
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Distinct products mentioned in `text`, in order of first appearance.
    pub fn mentioned_ids(&self, text: &str) -> Vec<ProductId> {
        let mut seen = BTreeSet::new();
        self.find_mentions(text)
            .into_iter()
            .filter(|m| seen.insert(m.product_id.clone()))
            .map(|m| m.product_id)
            .collect()
    }

    /// Catalog candidates sharing at least one token with `text`, ranked by the
    /// number of shared tokens, capped at [`MAX_FUZZY_CANDIDATES`].
    pub fn fuzzy_candidates(&self, text: &str) -> Vec<ProductId> {
        let mut hits: BTreeMap<&ProductId, usize> = BTreeMap::new();
        let query: BTreeSet<String> = tokens(text).into_iter().collect();
        for t in &query {
            if let Some(ids) = self.postings.get(t) {
                for id in ids {
                    *hits.entry(id).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&ProductId, usize)> = hits.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
            .into_iter()
            .take(MAX_FUZZY_CANDIDATES)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Blend of token-set Jaccard and normalized Levenshtein similarity on the
/// normalized forms of `a` and `b`. Symmetric, in [0, 1], and 1.0 exactly when
/// the normalized forms are equal.
pub fn fuzzy_score(a: &str, b: &str) -> f64 {
    let na = normalize_text(a);
    let nb = normalize_text(b);
    if na == nb {
        return 1.0;
    }
    let sa: BTreeSet<&str> = na.split(' ').filter(|t| !t.is_empty()).collect();
    let sb: BTreeSet<&str> = nb.split(' ').filter(|t| !t.is_empty()).collect();
    let union = sa.union(&sb).count();
    let jaccard = if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    };
    let max_len = na.chars().count().max(nb.chars().count());
    let edit = strsim::levenshtein(&na, &nb) as f64 / max_len as f64;
    (0.5 * jaccard + 0.5 * (1.0 - edit)).clamp(0.0, 1.0)
}

/// Longest contiguous run of query tokens that all occur in catalog names;
/// leftmost on ties.
pub fn salient_name(query: &str, index: &CatalogIndex) -> Option<String> {
    let toks = tokens(query);
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = 0;
    for i in 0..=toks.len() {
        let inside = i < toks.len() && index.in_vocabulary(&toks[i]);
        if !inside {
            let len = i - run_start;
            if len > 0 && best.is_none_or(|(_, l)| len > l) {
                best = Some((run_start, len));
            }
            run_start = i + 1;
        }
    }
    best.map(|(s, l)| toks[s..s + l].join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    ExactHistory,
    FuzzyHistory,
    FuzzyCatalog,
    SearchFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMatch {
    pub product_id: ProductId,
    pub matched_name: String,
    pub method: MatchMethod,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionMiss {
    pub mention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolveOutcome {
    pub matches: Vec<ProductMatch>,
    pub misses: Vec<MentionMiss>,
}

impl ResolveOutcome {
    pub fn product_ids(&self) -> Vec<ProductId> {
        self.matches.iter().map(|m| m.product_id.clone()).collect()
    }
}

/// Resolves a salient product name to a canonical catalog name.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str) -> Result<Option<String>, ProviderError>;
}

/// `GET <url>?q=<query>` returning `{"canonical_name": ...}`.
pub struct HttpSearchClient {
    endpoint: JsonEndpoint,
}

impl HttpSearchClient {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            endpoint: JsonEndpoint::new(url, Duration::from_secs(2)),
        }
    }
}

#[derive(Deserialize)]
struct SearchReply {
    canonical_name: Option<String>,
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str) -> Result<Option<String>, ProviderError> {
        let reply: SearchReply = self.endpoint.get(&[("q", query)])?;
        Ok(reply.canonical_name.filter(|n| !n.trim().is_empty()))
    }
}

/// Products present in the conversation, most recent first: per turn (newest
/// first) the resolved ids, then names in the response, then names in the
/// query; the page product comes last.
pub fn history_products(session: &Session, index: &CatalogIndex) -> Vec<ProductId> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |id: &ProductId, out: &mut Vec<ProductId>| {
        if index.get(id).is_some() && seen.insert(id.clone()) {
            out.push(id.clone());
        }
    };
    for turn in session.turns.iter().rev() {
        for id in &turn.resolved_product_ids {
            push(id, &mut out);
        }
        for id in index.mentioned_ids(&turn.system_response) {
            push(&id, &mut out);
        }
        for id in index.mentioned_ids(&turn.user_query) {
            push(&id, &mut out);
        }
    }
    if let Some(page) = &session.current_page_product_id {
        push(page, &mut out);
    }
    out
}

/// Runs the resolution cascade for one mention.
pub fn resolve_mention(
    mention: &str,
    standalone_text: &str,
    session: &Session,
    index: &CatalogIndex,
    search: Option<&dyn SearchClient>,
    fuzzy_threshold: f64,
) -> Result<ProductMatch, MentionMiss> {
    let history = history_products(session, index);
    let norm = normalize_text(mention);

    if let Some(id) = history
        .iter()
        .find(|id| normalize_text(&index.records[*id].canonical_name) == norm)
    {
        return Ok(ProductMatch {
            product_id: id.clone(),
            matched_name: index.records[id].canonical_name.clone(),
            method: MatchMethod::ExactHistory,
            score: 1.0,
        });
    }

    // (score, recency rank, id); recency rank 0 is the most recent
    let pick = |cands: &mut dyn Iterator<Item = (usize, &ProductId)>| -> Option<(f64, ProductId)> {
        cands
            .map(|(rank, id)| {
                (
                    fuzzy_score(mention, &index.records[id].canonical_name),
                    rank,
                    id,
                )
            })
            .filter(|(s, _, _)| *s >= fuzzy_threshold)
            .min_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(b.2))
            })
            .map(|(s, _, id)| (s, id.clone()))
    };

    if let Some((score, id)) = pick(&mut history.iter().enumerate()) {
        return Ok(ProductMatch {
            matched_name: index.records[&id].canonical_name.clone(),
            product_id: id,
            method: MatchMethod::FuzzyHistory,
            score,
        });
    }

    let candidates = index.fuzzy_candidates(mention);
    if let Some((score, id)) = pick(&mut candidates.iter().map(|id| (0, id))) {
        return Ok(ProductMatch {
            matched_name: index.records[&id].canonical_name.clone(),
            product_id: id,
            method: MatchMethod::FuzzyCatalog,
            score,
        });
    }

    let mut miss = MentionMiss {
        mention: mention.to_owned(),
        search_error: None,
    };
    if let (Some(client), Some(salient)) = (search, salient_name(standalone_text, index)) {
        match client.search(&salient) {
            Ok(Some(name)) => {
                if let Some(id) = index.id_by_name(&name) {
                    let record = &index.records[id];
                    return Ok(ProductMatch {
                        product_id: id.clone(),
                        matched_name: record.canonical_name.clone(),
                        method: MatchMethod::SearchFallback,
                        score: fuzzy_score(&salient, &record.canonical_name),
                    });
                }
            }
            Ok(None) => {}
            Err(e) => miss.search_error = Some(e.to_string()),
        }
    }
    Err(miss)
}

/// Maps every product mention of a standalone query to a catalog id.
pub fn resolve(
    saq: &StandaloneQuery,
    session: &Session,
    index: &CatalogIndex,
    search: Option<&dyn SearchClient>,
    fuzzy_threshold: f64,
) -> ResolveOutcome {
    let mut mentions: Vec<&str> = saq.mentioned_products.iter().map(String::as_str).collect();
    if let Some(reference) = &saq.reference_phrase {
        mentions.push(reference);
    }
    let mut outcome = ResolveOutcome::default();
    for mention in mentions {
        match resolve_mention(mention, &saq.text, session, index, search, fuzzy_threshold) {
            Ok(m) => {
                if !outcome.matches.iter().any(|x| x.product_id == m.product_id) {
                    outcome.matches.push(m);
                }
            }
            Err(miss) => outcome.misses.push(miss),
        }
    }
    outcome
}
