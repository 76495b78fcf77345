//! Standalone-query rewriting: turns a conversational follow-up into a
//! self-contained question by resolving anaphora, carrying attributes across
//! product switches and disambiguating products listed earlier in the chat.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CatalogIndex;
use crate::model::{ProductId, Session};
use crate::providers::{JsonEndpoint, ProviderError};
use crate::text::{normalize_text, spanned_tokens, tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    BuiltinRules,
    ExternalProvider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandaloneQuery {
    pub text: String,
    /// Canonical names present verbatim in `text`.
    pub mentioned_products: Vec<String>,
    /// A product reference kept verbatim because it matched no catalog name
    /// (e.g. "LG fridge"); handed to catalog search as an extra mention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_phrase: Option<String>,
    pub source: QuerySource,
}

impl StandaloneQuery {
    pub fn is_valid(&self) -> bool {
        !self.text.trim().is_empty()
            && self
                .mentioned_products
                .iter()
                .all(|p| self.text.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusDerivation {
    Page,
    History,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FocusState {
    pub focus_product_name: Option<String>,
    pub focus_product_id: Option<ProductId>,
    pub derivation: Option<FocusDerivation>,
}

impl FocusState {
    fn of(index: &CatalogIndex, id: &str, derivation: FocusDerivation) -> Self {
        Self {
            focus_product_name: index.canonical_name(id).map(str::to_owned),
            focus_product_id: Some(id.to_owned()),
            derivation: Some(derivation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaqError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("the query refers to a product but no referent is known")]
    NoFocus,
    #[error("no earlier question to carry an attribute over from")]
    NothingToCarryOver,
    #[error("rewrite provider failed ({provider}) and the rule fallback failed ({fallback})")]
    ProviderUnavailable {
        provider: String,
        fallback: Box<SaqError>,
    },
}

/// Anaphora understood by the rule rewriter, longest first.
const ANAPHORA: &[(&str, Referent)] = &[
    ("the same product", Referent::Focus),
    ("the first one", Referent::Ordinal(1)),
    ("the second one", Referent::Ordinal(2)),
    ("the third one", Referent::Ordinal(3)),
    ("same product", Referent::Focus),
    ("this one", Referent::Focus),
    ("this phone", Referent::Focus),
    ("this fridge", Referent::Focus),
    ("this tv", Referent::Focus),
    ("this", Referent::Focus),
    ("that", Referent::Focus),
    ("its", Referent::Possessive),
    ("it", Referent::Focus),
];

/// First words that mark a full sentence rather than a bare attribute phrase.
const SENTENCE_STARTERS: &[&str] = &[
    "what",
    "whats",
    "how",
    "when",
    "where",
    "which",
    "who",
    "why",
    "is",
    "are",
    "does",
    "do",
    "did",
    "can",
    "could",
    "will",
    "would",
    "should",
    "show",
    "find",
    "list",
    "compare",
    "tell",
    "give",
    "get",
    "buy",
    "add",
    "i",
    "please",
    "any",
    "has",
    "have",
    "was",
    "were",
    "there",
    "my",
    "need",
    "want",
    "search",
    "recommend",
    "suggest",
    "help",
    "and",
    "hi",
    "hello",
    "thanks",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Referent {
    Focus,
    Possessive,
    Ordinal(usize),
}

/// Texts of one turn in recency order: response, recorded rewrite, user query.
fn turn_texts(turn: &crate::model::ConversationTurn) -> impl Iterator<Item = &str> {
    std::iter::once(turn.system_response.as_str())
        .chain(turn.standalone_query.as_deref())
        .chain(std::iter::once(turn.user_query.as_str()))
}

/// The product the conversation is currently about: the newest history text
/// naming a catalog product decides; a text naming several distinct products
/// leaves the focus unresolved. Falls back to the page product.
pub fn derive_focus(session: &Session, index: &CatalogIndex) -> FocusState {
    for turn in session.turns.iter().rev() {
        for text in turn_texts(turn) {
            let ids = index.mentioned_ids(text);
            match ids.len() {
                0 => continue,
                1 => return FocusState::of(index, &ids[0], FocusDerivation::History),
                _ => return FocusState::default(),
            }
        }
    }
    match &session.current_page_product_id {
        Some(id) if index.get(id).is_some() => FocusState::of(index, id, FocusDerivation::Page),
        _ => FocusState::default(),
    }
}

/// Products listed by the newest system response that names any product,
/// in order of first appearance.
pub fn recent_listing(session: &Session, index: &CatalogIndex) -> Vec<ProductId> {
    session
        .turns
        .iter()
        .rev()
        .map(|t| index.mentioned_ids(&t.system_response))
        .find(|ids| !ids.is_empty())
        .unwrap_or_default()
}

/// Replaces every catalog-name mention with its canonical spelling and
/// returns the canonical names in order of appearance.
pub fn canonicalize(text: &str, index: &CatalogIndex) -> (String, Vec<String>) {
    let mentions = index.find_mentions(text);
    let mut out = String::with_capacity(text.len());
    let mut names = Vec::new();
    let mut cursor = 0;
    for m in &mentions {
        let name = index.canonical_name(&m.product_id).unwrap_or_default();
        out.push_str(&text[cursor..m.start]);
        out.push_str(name);
        cursor = m.end;
        if !names.iter().any(|n| n == name) {
            names.push(name.to_owned());
        }
    }
    out.push_str(&text[cursor..]);
    (out, names)
}

fn split_terminal(query: &str) -> (&str, &str) {
    let body = query.trim_end_matches(|c: char| matches!(c, '?' | '.' | '!') || c.is_whitespace());
    let tail = query[body.len()..].trim();
    (body, tail)
}

fn lowercase_phrase(phrase: &str) -> String {
    let first_word = phrase.split_whitespace().next().unwrap_or("");
    let is_acronym =
        first_word.chars().count() > 1 && first_word.chars().all(|c| !c.is_lowercase());
    if is_acronym {
        return phrase.to_owned();
    }
    let mut chars = phrase.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn attribute_question(attribute: &str, product: &str) -> String {
    format!("What is the {} of {product}?", lowercase_phrase(attribute))
}

#[derive(Debug, PartialEq)]
enum Shape<'a> {
    Switch(&'a str),
    Attribute {
        attribute: &'a str,
        target: Option<&'a str>,
    },
    Sentence,
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    let head = text.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix)
        .then(|| &text[prefix.len()..])
}

fn shape(body: &str) -> Shape<'_> {
    for p in ["how about ", "what about "] {
        if let Some(rest) = strip_prefix_ci(body, p) {
            if !rest.trim().is_empty() {
                return Shape::Switch(rest.trim());
            }
        }
    }
    let attribute_part = ["what is the ", "what's the ", "whats the "]
        .iter()
        .find_map(|p| strip_prefix_ci(body, p))
        .or_else(|| {
            let first = tokens(body.split_whitespace().next().unwrap_or("")).join("");
            (!first.is_empty() && !SENTENCE_STARTERS.contains(&first.as_str())).then_some(body)
        });
    match attribute_part {
        Some(phrase) => {
            let phrase = phrase.trim();
            match find_ci(phrase, " of ") {
                Some(at) => Shape::Attribute {
                    attribute: phrase[..at].trim(),
                    target: Some(phrase[at + 4..].trim()).filter(|t| !t.is_empty()),
                },
                None => Shape::Attribute {
                    attribute: phrase,
                    target: None,
                },
            }
        }
        None => Shape::Sentence,
    }
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack.to_ascii_lowercase().find(needle)
}

/// Finds the longest anaphor in `text` on token boundaries; returns its byte span.
fn find_anaphor(text: &str) -> Option<(usize, usize, Referent)> {
    let toks = spanned_tokens(text);
    let mut best: Option<(usize, usize, Referent, usize)> = None;
    for (phrase, referent) in ANAPHORA {
        let words: Vec<&str> = phrase.split(' ').collect();
        for i in 0..toks.len() {
            if i + words.len() <= toks.len()
                && words.iter().zip(&toks[i..]).all(|(w, t)| *w == t.norm)
            {
                let span = (toks[i].start, toks[i + words.len() - 1].end);
                let better = match best {
                    None => true,
                    Some((s, _, _, n)) => words.len() > n || (words.len() == n && span.0 < s),
                };
                if better {
                    best = Some((span.0, span.1, *referent, words.len()));
                }
            }
        }
    }
    best.map(|(s, e, r, _)| (s, e, r))
}

fn is_anaphor(phrase: &str) -> Option<Referent> {
    let norm = normalize_text(phrase);
    ANAPHORA.iter().find(|(p, _)| *p == norm).map(|(_, r)| *r)
}

fn resolve_referent(
    referent: Referent,
    session: &Session,
    index: &CatalogIndex,
) -> Result<String, SaqError> {
    let id = match referent {
        Referent::Ordinal(n) => recent_listing(session, index).into_iter().nth(n - 1),
        Referent::Focus | Referent::Possessive => derive_focus(session, index).focus_product_id,
    };
    id.and_then(|id| index.canonical_name(&id).map(str::to_owned))
        .ok_or(SaqError::NoFocus)
}

/// Picks the listed product sharing the most tokens with a descriptive
/// reference such as "LG fridge"; earliest listed wins ties.
fn match_listing(reference: &str, session: &Session, index: &CatalogIndex) -> Option<String> {
    let wanted = tokens(reference);
    let mut best: Option<(usize, String)> = None;
    for id in recent_listing(session, index) {
        let name = index.canonical_name(&id)?;
        let name_tokens = tokens(name);
        let overlap = wanted.iter().filter(|t| name_tokens.contains(t)).count();
        if overlap > 0 && best.as_ref().is_none_or(|(b, _)| overlap > *b) {
            best = Some((overlap, name.to_owned()));
        }
    }
    best.map(|(_, n)| n)
}

fn rule_output(text: String, index: &CatalogIndex, reference: Option<String>) -> StandaloneQuery {
    let (text, mentioned_products) = canonicalize(&text, index);
    StandaloneQuery {
        text,
        mentioned_products,
        reference_phrase: reference,
        source: QuerySource::BuiltinRules,
    }
}

/// Attribute of the newest attribute question in the history, replaying the
/// rules for turns that did not record their rewrite.
fn carried_from_history(session: &Session, index: &CatalogIndex) -> Option<String> {
    (0..session.turns.len()).rev().find_map(|i| {
        let turn = &session.turns[i];
        let standalone = match &turn.standalone_query {
            Some(text) => text.clone(),
            None => {
                let mut earlier = session.clone();
                earlier.turns.truncate(i);
                rewrite_rule_based(&turn.user_query, &earlier, index)
                    .ok()?
                    .text
            }
        };
        carried_attribute(&standalone)
    })
}

fn carried_attribute(previous: &str) -> Option<String> {
    let (body, _) = split_terminal(previous);
    let rest = strip_prefix_ci(body, "what is the ")?;
    let at = find_ci(rest, " of ")?;
    Some(rest[..at].trim().to_owned()).filter(|a| !a.is_empty())
}

/// Deterministic rewriter covering co-reference, ellipsis, product switches
/// and disambiguation against previously listed products.
pub fn rewrite_rule_based(
    query: &str,
    session: &Session,
    index: &CatalogIndex,
) -> Result<StandaloneQuery, SaqError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(SaqError::EmptyQuery);
    }
    let (body, tail) = split_terminal(query);
    let shape = shape(body);

    if let Shape::Switch(target) = shape {
        let product = if let Some(m) = index.find_mentions(target).first() {
            Some(
                index
                    .canonical_name(&m.product_id)
                    .unwrap_or_default()
                    .to_owned(),
            )
        } else if let Some(referent) = is_anaphor(target) {
            Some(resolve_referent(referent, session, index)?)
        } else {
            match_listing(target, session, index)
        };
        return match product {
            Some(product) => {
                let attribute =
                    carried_from_history(session, index).ok_or(SaqError::NothingToCarryOver)?;
                Ok(rule_output(
                    attribute_question(&attribute, &product),
                    index,
                    None,
                ))
            }
            // "How about the warranty?": same product, new attribute
            None => {
                let attribute = strip_prefix_ci(target, "the ").unwrap_or(target);
                let product = resolve_referent(Referent::Focus, session, index)?;
                Ok(rule_output(
                    attribute_question(attribute, &product),
                    index,
                    None,
                ))
            }
        };
    }

    // Queries that already name a catalog product are self-contained.
    if !index.find_mentions(query).is_empty() {
        return Ok(rule_output(query.to_owned(), index, None));
    }

    match shape {
        Shape::Attribute { attribute, target } => {
            let (product, reference) = match target {
                None => (resolve_referent(Referent::Focus, session, index)?, None),
                Some(t) => match is_anaphor(t) {
                    Some(referent) => (resolve_referent(referent, session, index)?, None),
                    None => match match_listing(t, session, index) {
                        Some(name) => (name, None),
                        None => (t.to_owned(), Some(t.to_owned())),
                    },
                },
            };
            Ok(rule_output(
                attribute_question(attribute, &product),
                index,
                reference,
            ))
        }
        Shape::Sentence => match find_anaphor(body) {
            Some((start, end, referent)) => {
                let product = resolve_referent(referent, session, index)?;
                let replacement = if referent == Referent::Possessive {
                    format!("{product}'s")
                } else {
                    product
                };
                let text = format!("{}{}{}", &query[..start], replacement, &query[end..]);
                Ok(rule_output(text, index, None))
            }
            None => {
                let product = resolve_referent(Referent::Focus, session, index)?;
                Ok(rule_output(
                    format!("{body} for {product}{tail}"),
                    index,
                    None,
                ))
            }
        },
        Shape::Switch(_) => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryPair {
    pub user: String,
    pub system: String,
}

/// Wire body for an external rewrite provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub query: String,
    pub history: Vec<HistoryPair>,
    pub page_product: Option<String>,
}

impl RewriteRequest {
    pub fn new(query: &str, session: &Session, index: &CatalogIndex) -> Self {
        Self {
            query: query.to_owned(),
            history: session
                .turns
                .iter()
                .map(|t| HistoryPair {
                    user: t.user_query.clone(),
                    system: t.system_response.clone(),
                })
                .collect(),
            page_product: session
                .current_page_product_id
                .as_deref()
                .and_then(|id| index.canonical_name(id))
                .map(str::to_owned),
        }
    }
}

pub trait RewriteProvider: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ProviderError>;
}

pub struct HttpRewriteProvider {
    endpoint: JsonEndpoint,
}

impl HttpRewriteProvider {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: JsonEndpoint::new(url, timeout),
        }
    }
}

#[derive(Deserialize)]
struct RewriteReply {
    standalone_query: String,
}

impl RewriteProvider for HttpRewriteProvider {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, ProviderError> {
        let reply: RewriteReply = self.endpoint.post(request)?;
        Ok(reply.standalone_query)
    }
}

/// Delegates to `provider` when present, falling back to the rule rewriter
/// when the provider fails or returns an unusable query.
pub fn rewrite(
    query: &str,
    session: &Session,
    index: &CatalogIndex,
    provider: Option<&dyn RewriteProvider>,
) -> Result<StandaloneQuery, SaqError> {
    let Some(provider) = provider else {
        return rewrite_rule_based(query, session, index);
    };
    if query.trim().is_empty() {
        return Err(SaqError::EmptyQuery);
    }
    let failure = match provider.rewrite(&RewriteRequest::new(query, session, index)) {
        Ok(text) if !text.trim().is_empty() => {
            let (text, mentioned_products) = canonicalize(text.trim(), index);
            return Ok(StandaloneQuery {
                text,
                mentioned_products,
                reference_phrase: None,
                source: QuerySource::ExternalProvider,
            });
        }
        Ok(_) => "empty standalone query".to_owned(),
        Err(e) => e.to_string(),
    };
    rewrite_rule_based(query, session, index).map_err(|fallback| SaqError::ProviderUnavailable {
        provider: failure,
        fallback: Box::new(fallback),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{rewrite_sessions, toy_catalog};
    use crate::model::ConversationTurn;
    use crate::providers::mock::serve;

    fn rw(q: &str, s: &Session) -> String {
        rewrite_rule_based(q, s, &toy_catalog()).unwrap().text
    }

    #[test]
    fn focus_from_page_history_or_nothing() {
        let idx = toy_catalog();
        let page = Session::new("s").on_page("P100");
        let f = derive_focus(&page, &idx);
        assert_eq!(f.focus_product_name.as_deref(), Some("iPhone 13"));
        assert_eq!(f.derivation, Some(FocusDerivation::Page));

        assert_eq!(
            derive_focus(&Session::new("e"), &idx),
            FocusState::default()
        );

        let mut switched = page.clone();
        switched.turns.push(ConversationTurn::new(
            1,
            "How about iPhone 14?",
            "iPhone 14: Battery Size: 3279 mAh",
        ));
        let f = derive_focus(&switched, &idx);
        assert_eq!(f.focus_product_name.as_deref(), Some("iPhone 14"));
        assert_eq!(f.derivation, Some(FocusDerivation::History));
    }

    #[test]
    fn reference_rewrites() {
        let [follow_up, switch, accessory, browse] = rewrite_sessions();
        assert_eq!(
            rw("Display size?", &follow_up),
            "What is the display size of iPhone 13?"
        );
        assert_eq!(
            rw("How about iPhone 14?", &switch),
            "What is the battery size of iPhone 14?"
        );
        assert_eq!(
            rw("Show me cases for this phone.", &accessory),
            "Show me cases for iPhone 13."
        );
        assert_eq!(
            rw("Capacity of LG fridge?", &browse),
            "What is the capacity of LG 242 L Frost Free 2 Star?"
        );
    }

    #[test]
    fn mentions_and_invariants() {
        let [_, _, accessory, browse] = rewrite_sessions();
        let idx = toy_catalog();
        let q = rewrite_rule_based("Show me cases for this phone.", &accessory, &idx).unwrap();
        assert_eq!(q.mentioned_products, ["iPhone 13"]);
        assert!(q.is_valid());
        let q = rewrite_rule_based("Capacity of LG fridge?", &browse, &idx).unwrap();
        assert_eq!(q.mentioned_products, ["LG 242 L Frost Free 2 Star"]);
        assert_eq!(q.reference_phrase, None);
    }

    #[test]
    fn ordinal_resolves_against_listing() {
        let [_, _, _, browse] = rewrite_sessions();
        assert_eq!(
            rw("Is the second one frost free?", &browse),
            "Is Samsung 253 L Frost Free 3 Star frost free?"
        );
        assert_eq!(
            rw("Capacity of the first one?", &browse),
            "What is the capacity of LG 242 L Frost Free 2 Star?"
        );
    }

    #[test]
    fn pronouns_and_ellipsis() {
        let s = Session::new("s").on_page("P100");
        assert_eq!(rw("Does it support 5G?", &s), "Does iPhone 13 support 5G?");
        assert_eq!(
            rw("What is its warranty?", &s),
            "What is iPhone 13's warranty?"
        );
        assert_eq!(
            rw("What is the warranty?", &s),
            "What is the warranty of iPhone 13?"
        );
        assert_eq!(rw("When will it arrive", &s), "When will iPhone 13 arrive");
        assert_eq!(
            rw("Is there an exchange offer?", &s),
            "Is there an exchange offer for iPhone 13?"
        );
        assert_eq!(rw("RAM?", &s), "What is the RAM of iPhone 13?");
        assert_eq!(
            rw("How about the warranty?", &s),
            "What is the warranty of iPhone 13?"
        );
    }

    #[test]
    fn missing_referent_is_no_focus() {
        let idx = toy_catalog();
        let empty = Session::new("s");
        assert_eq!(
            rewrite_rule_based("Display size?", &empty, &idx),
            Err(SaqError::NoFocus)
        );
        assert_eq!(
            rewrite_rule_based("Does it fold?", &empty, &idx),
            Err(SaqError::NoFocus)
        );
        assert_eq!(
            rewrite_rule_based("  ", &empty, &idx),
            Err(SaqError::EmptyQuery)
        );
        // a switch with nothing to carry over
        assert_eq!(
            rewrite_rule_based("How about iPhone 14?", &empty, &idx),
            Err(SaqError::NothingToCarryOver)
        );
        // two products named in the newest response: ambiguous "it"
        let mut amb = Session::new("a");
        amb.turns.push(ConversationTurn::new(
            1,
            "compare",
            "iPhone 13 and iPhone 14 are similar",
        ));
        assert_eq!(
            rewrite_rule_based("Is it waterproof?", &amb, &idx),
            Err(SaqError::NoFocus)
        );
    }

    #[test]
    fn turn_one_queries_naming_a_product_are_unchanged() {
        let idx = toy_catalog();
        let empty = Session::new("s");
        for q in [
            "What is the battery size of iPhone 13?",
            "Does iPhone 14 have eSIM support?",
            "Capacity of LG 242 L Frost Free 2 Star?",
        ] {
            let out = rewrite_rule_based(q, &empty, &idx).unwrap();
            assert_eq!(out.text, q);
            assert_eq!(out.mentioned_products.len(), 1);
        }
        // differently cased mentions are canonicalized
        let out = rewrite_rule_based("battery of IPHONE 13?", &empty, &idx).unwrap();
        assert_eq!(out.text, "battery of iPhone 13?");
        assert!(out.is_valid());
    }

    #[test]
    fn rewrites_are_fixed_points() {
        let idx = toy_catalog();
        for s in rewrite_sessions() {
            for q in [
                "Display size?",
                "How about iPhone 14?",
                "Show me cases for this phone.",
                "Capacity of LG fridge?",
            ] {
                if let Ok(first) = rewrite_rule_based(q, &s, &idx) {
                    let again = rewrite_rule_based(&first.text, &s, &idx).unwrap();
                    assert_eq!(again.text, first.text, "session {} query {q}", s.session_id);
                }
            }
        }
    }

    #[test]
    fn unresolved_descriptions_are_kept_as_references() {
        let idx = toy_catalog();
        let s = Session::new("s");
        let q = rewrite_rule_based("Price of Sony TV?", &s, &idx).unwrap();
        assert_eq!(q.text, "What is the price of Sony TV?");
        assert_eq!(q.reference_phrase.as_deref(), Some("Sony TV"));
        assert!(q.mentioned_products.is_empty());
    }

    struct Fixed(Result<String, ProviderError>);
    impl RewriteProvider for Fixed {
        fn rewrite(&self, _: &RewriteRequest) -> Result<String, ProviderError> {
            self.0.clone()
        }
    }

    #[test]
    fn dispatch_and_fallback() {
        let idx = toy_catalog();
        let s = Session::new("s").on_page("P100");
        let turn1 = rewrite("Battery size of iPhone 13?", &Session::new("t"), &idx, None).unwrap();
        assert_eq!(turn1.text, "Battery size of iPhone 13?");
        assert_eq!(turn1.mentioned_products, ["iPhone 13"]);

        let ext = Fixed(Ok("what is the display size of iphone 13?".into()));
        let q = rewrite("Display size?", &s, &idx, Some(&ext)).unwrap();
        assert_eq!(q.source, QuerySource::ExternalProvider);
        assert_eq!(q.text, "what is the display size of iPhone 13?");
        assert!(q.is_valid());

        let bad = Fixed(Ok("   ".into()));
        let q = rewrite("Display size?", &s, &idx, Some(&bad)).unwrap();
        assert_eq!(q.source, QuerySource::BuiltinRules);
        assert_eq!(q.text, "What is the display size of iPhone 13?");

        let down = Fixed(Err(ProviderError::Unavailable("x".into())));
        assert!(matches!(
            rewrite("Display size?", &Session::new("e"), &idx, Some(&down)),
            Err(SaqError::ProviderUnavailable { .. })
        ));
    }

    #[test]
    fn http_provider_wire_format_and_timeout() {
        let idx = toy_catalog();
        let [follow_up, ..] = rewrite_sessions();
        let srv = serve(vec![(
            200,
            r#"{"standalone_query":"What is the display size of iPhone 13?"}"#.into(),
            Duration::ZERO,
        )]);
        let p = HttpRewriteProvider::new(&srv.url);
        let q = rewrite("Display size?", &follow_up, &idx, Some(&p)).unwrap();
        assert_eq!(q.source, QuerySource::ExternalProvider);
        let (_, body) = srv.requests.recv().unwrap();
        let sent: RewriteRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(sent.query, "Display size?");
        assert_eq!(sent.page_product.as_deref(), Some("iPhone 13"));
        assert_eq!(sent.history.len(), 1);
        assert_eq!(sent.history[0].user, "Battery size?");

        let slow = serve(vec![(
            200,
            r#"{"standalone_query":"x"}"#.into(),
            Duration::from_millis(800),
        )]);
        let p = HttpRewriteProvider::with_timeout(&slow.url, Duration::from_millis(150));
        let q = rewrite("Display size?", &follow_up, &idx, Some(&p)).unwrap();
        assert_eq!(q.source, QuerySource::BuiltinRules);
        assert_eq!(q.text, "What is the display size of iPhone 13?");
    }
}
