//! Prompt composition and response generation.
//!
//! A prompt has five sections in fixed order (system, context, user profile,
//! intent metadata, question), each introduced by a `## NAME` header line and
//! followed by one blank line. The built-in provider is extractive: it quotes
//! the best-scoring snippet, or returns the IDK message when nothing clears
//! `tau_idk`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intent::LEXICON;
use crate::model::{IntentLabel, ProductId, UserContext};
use crate::providers::{JsonEndpoint, ProviderError};
use crate::retrieval::{ContextSnippet, ReducedContext};
use crate::saq::StandaloneQuery;
use crate::sts::{cosine, Embedder};
use crate::text::normalize_text;

pub const SECTION_HEADERS: [&str; 5] = [
    "## SYSTEM",
    "## CONTEXT",
    "## USER_PROFILE",
    "## METADATA",
    "## QUESTION",
];

pub const CORE_INSTRUCTIONS: &str = "You are a shopping assistant answering questions about the products listed in CONTEXT.\n\
Answer only from CONTEXT. Never use facts about other products.\n\
Use USER_PROFILE to phrase the answer, never to override facts in CONTEXT.\n\
If CONTEXT does not contain the answer, or contains only part of it, say \"I don't have enough information to answer that.\" for the missing part.\n\
Cite the snippet ids you used in square brackets.";

const FEWSHOT: [(IntentLabel, &str); 12] = [
    (
        IntentLabel::Authenticity,
        include_str!("../templates/fewshot/authenticity.txt"),
    ),
    (
        IntentLabel::Checkout,
        include_str!("../templates/fewshot/checkout.txt"),
    ),
    (
        IntentLabel::DeliverySla,
        include_str!("../templates/fewshot/delivery_sla.txt"),
    ),
    (
        IntentLabel::OffersAndDiscounts,
        include_str!("../templates/fewshot/offers_and_discounts.txt"),
    ),
    (
        IntentLabel::PaymentOptions,
        include_str!("../templates/fewshot/payment_options.txt"),
    ),
    (
        IntentLabel::ProductExchange,
        include_str!("../templates/fewshot/product_exchange.txt"),
    ),
    (
        IntentLabel::ProductSpec,
        include_str!("../templates/fewshot/product_spec.txt"),
    ),
    (
        IntentLabel::ReturnPolicy,
        include_str!("../templates/fewshot/return_policy.txt"),
    ),
    (
        IntentLabel::SizeAndFit,
        include_str!("../templates/fewshot/size_and_fit.txt"),
    ),
    (
        IntentLabel::StockAvailability,
        include_str!("../templates/fewshot/stock_availability.txt"),
    ),
    (
        IntentLabel::Variant,
        include_str!("../templates/fewshot/variant.txt"),
    ),
    (
        IntentLabel::Warranty,
        include_str!("../templates/fewshot/warranty.txt"),
    ),
];

/// Per-intent exemplar text placed after the core instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotLibrary {
    templates: BTreeMap<IntentLabel, String>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing template for {0}")]
    Missing(IntentLabel),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FewShotLibrary {
    pub fn builtin() -> Self {
        Self {
            templates: FEWSHOT
                .iter()
                .map(|(l, t)| (*l, t.trim_end().to_string()))
                .collect(),
        }
    }

    /// Reads `<intent>.txt` for every decision intent from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for label in IntentLabel::decision_labels() {
            let path = dir.join(format!("{label}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| match source.kind() {
                std::io::ErrorKind::NotFound => TemplateError::Missing(label),
                _ => TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                },
            })?;
            templates.insert(label, text.trim_end().to_string());
        }
        Ok(Self { templates })
    }

    pub fn get(&self, intent: IntentLabel) -> Option<&str> {
        self.templates.get(&intent).map(String::as_str)
    }

    /// Core instructions followed by the exemplars of the routed intents.
    pub fn persona(&self, intents: &[IntentLabel]) -> String {
        let mut out = CORE_INSTRUCTIONS.to_string();
        for intent in intents {
            if let Some(t) = self.get(*intent) {
                out.push_str(&format!("\n\nExample ({intent}):\n{t}"));
            }
        }
        out
    }
}

impl Default for FewShotLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn intent_description(intent: IntentLabel) -> &'static str {
    use IntentLabel::*;
    match intent {
        NonDecision => "Browsing or search request outside single-product question answering.",
        Authenticity => "Whether the product is genuine and sold by an authorised seller.",
        Checkout => "Placing the order, cart and cash on delivery terms.",
        DeliverySla => "Expected delivery window and shipping speed for the product.",
        OffersAndDiscounts => "Bank offers, coupons and discounts that apply to the product.",
        PaymentOptions => "Accepted payment methods and EMI terms.",
        ProductExchange => "Trading in an old product or exchanging for another size or variant.",
        ProductSpec => "Technical attributes and features of the product.",
        ReturnPolicy => "Return, refund and replacement window and conditions.",
        SizeAndFit => "Sizing, fit and measurements.",
        StockAvailability => "Whether the product is in stock and can ship.",
        Variant => "Available colours, sizes and storage configurations.",
        Warranty => "Warranty period and what it covers.",
    }
}

pub fn default_intent_metadata() -> BTreeMap<IntentLabel, String> {
    IntentLabel::ALL
        .iter()
        .map(|l| (*l, intent_description(*l).to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductTitle {
    pub product_id: ProductId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParts {
    pub persona_instructions: String,
    pub reduced_context: ReducedContext,
    pub product_titles: Vec<ProductTitle>,
    pub user_context: UserContext,
    pub intent_metadata: BTreeMap<IntentLabel, String>,
    /// Only these intents get a metadata line and an answer clause.
    pub routed_intents: Vec<IntentLabel>,
    pub standalone_query: StandaloneQuery,
}

impl PromptParts {
    pub fn title_for(&self, product_id: &str) -> Option<&str> {
        self.product_titles
            .iter()
            .find(|t| t.product_id == product_id)
            .or_else(|| self.product_titles.first())
            .map(|t| t.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("context is not anchored by a product title")]
    MissingTitle,
    #[error("standalone query is invalid")]
    InvalidQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub text: String,
    /// Byte ranges of the five section bodies, in section order.
    pub section_offsets: [(usize, usize); 5],
}

impl ComposedPrompt {
    pub fn section(&self, i: usize) -> &str {
        let (s, e) = self.section_offsets[i];
        &self.text[s..e]
    }
}

/// Collapses line breaks so a value cannot forge a section header.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn compose_prompt(parts: &PromptParts) -> Result<ComposedPrompt, PromptError> {
    if !parts.standalone_query.is_valid() {
        return Err(PromptError::InvalidQuery);
    }
    if !parts.reduced_context.snippets.is_empty() && parts.product_titles.is_empty() {
        return Err(PromptError::MissingTitle);
    }
    let system = parts
        .persona_instructions
        .lines()
        .map(|l| {
            if l.starts_with("## ") {
                format!(" {l}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
        .trim_end()
        .to_string();
    let mut context: Vec<String> = parts
        .product_titles
        .iter()
        .map(|t| {
            format!(
                "Product: {} ({})",
                one_line(&t.name),
                one_line(&t.product_id)
            )
        })
        .collect();
    context.extend(
        parts
            .reduced_context
            .snippets
            .iter()
            .map(|s| format!("[{}] {}", s.snippet_id, one_line(&s.text))),
    );
    let profile: Vec<String> = parts
        .user_context
        .iter()
        .map(|(k, v)| format!("{}: {}", one_line(k), one_line(v)))
        .collect();
    let metadata: Vec<String> = parts
        .routed_intents
        .iter()
        .filter_map(|i| {
            parts
                .intent_metadata
                .get(i)
                .map(|m| format!("{i}: {}", one_line(m)))
        })
        .collect();
    let bodies = [
        system,
        context.join("\n"),
        profile.join("\n"),
        metadata.join("\n"),
        one_line(&parts.standalone_query.text),
    ];
    let mut text = String::new();
    let mut section_offsets = [(0, 0); 5];
    for (i, (header, body)) in SECTION_HEADERS.iter().zip(&bodies).enumerate() {
        text.push_str(header);
        text.push('\n');
        let start = text.len();
        text.push_str(body);
        section_offsets[i] = (start, text.len());
        text.push_str("\n\n");
    }
    Ok(ComposedPrompt {
        text,
        section_offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Answer,
    Idk,
    OutOfScope,
    Clarification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseProvider {
    BuiltinExtractive,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub kind: ResponseKind,
    pub text: String,
    pub supporting_snippet_ids: Vec<String>,
    pub provider: ResponseProvider,
    /// Set when the external provider failed and the extractive path answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

impl GeneratedResponse {
    pub fn idk(message: &str, provider: ResponseProvider) -> Self {
        Self {
            kind: ResponseKind::Idk,
            text: message.to_string(),
            supporting_snippet_ids: Vec::new(),
            provider,
            fallback_reason: None,
        }
    }

    pub fn fixed(kind: ResponseKind, message: &str) -> Self {
        Self {
            kind,
            text: message.to_string(),
            supporting_snippet_ids: Vec::new(),
            provider: ResponseProvider::BuiltinExtractive,
            fallback_reason: None,
        }
    }
}

/// Lexicon phrases of `intent` present in `query`, joined; `None` when none match.
fn intent_focus(query: &str, intent: IntentLabel) -> Option<String> {
    let padded = format!(" {} ", normalize_text(query));
    let hits: Vec<&str> = LEXICON[intent.index()]
        .1
        .iter()
        .copied()
        .filter(|p| padded.contains(&format!(" {p} ")))
        .collect();
    (!hits.is_empty()).then(|| hits.join(" "))
}

fn best_snippet<'a>(
    query: &str,
    snippets: &[&'a ContextSnippet],
    embedder: &dyn Embedder,
) -> Result<Option<(&'a ContextSnippet, f64)>, ProviderError> {
    let q = embedder.embed(query)?;
    let mut best: Option<(&ContextSnippet, f64)> = None;
    for s in snippets {
        let v = embedder.embed(&s.text)?;
        let score = cosine(&q, &v).map_err(|e| ProviderError::InvalidReply(e.to_string()))?;
        let better = match best {
            None => true,
            Some((b, bs)) => score > bs || (score == bs && s.snippet_id < b.snippet_id),
        };
        if better {
            best = Some((s, score));
        }
    }
    Ok(best)
}

/// Extractive answer. With one routed intent the best snippet overall is
/// quoted against the full query. With several, each intent's snippets are
/// scored against that intent's own phrases from the query (the full query
/// when none occur) and contribute either a quoted clause or an IDK clause.
pub fn answer_extractive(
    parts: &PromptParts,
    embedder: &dyn Embedder,
    tau_idk: f64,
    idk_message: &str,
) -> Result<GeneratedResponse, ProviderError> {
    let snippets = &parts.reduced_context.snippets;
    let query = &parts.standalone_query.text;
    let idk = GeneratedResponse::idk(idk_message, ResponseProvider::BuiltinExtractive);
    if snippets.is_empty() {
        return Ok(idk);
    }
    let quote = |s: &ContextSnippet| {
        format!(
            "{}: {}",
            parts.title_for(&s.product_id).unwrap_or(&s.product_id),
            s.text
        )
    };

    if parts.routed_intents.len() <= 1 {
        let all: Vec<&ContextSnippet> = snippets.iter().collect();
        return Ok(match best_snippet(query, &all, embedder)? {
            Some((s, score)) if score >= tau_idk => GeneratedResponse {
                kind: ResponseKind::Answer,
                text: quote(s),
                supporting_snippet_ids: vec![s.snippet_id.clone()],
                provider: ResponseProvider::BuiltinExtractive,
                fallback_reason: None,
            },
            _ => idk,
        });
    }

    let mut clauses = Vec::new();
    let mut supporting = Vec::new();
    for intent in &parts.routed_intents {
        let own: Vec<&ContextSnippet> = snippets.iter().filter(|s| s.intent == *intent).collect();
        let focus = intent_focus(query, *intent).unwrap_or_else(|| query.clone());
        match best_snippet(&focus, &own, embedder)? {
            Some((s, score)) if score >= tau_idk => {
                clauses.push(quote(s));
                supporting.push(s.snippet_id.clone());
            }
            _ => clauses.push(format!("{}: {idk_message}", intent.human_name())),
        }
    }
    if supporting.is_empty() {
        return Ok(idk);
    }
    Ok(GeneratedResponse {
        kind: ResponseKind::Answer,
        text: clauses.join(" "),
        supporting_snippet_ids: supporting,
        provider: ResponseProvider::BuiltinExtractive,
        fallback_reason: None,
    })
}

pub trait GenerationProvider: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError>;
}

/// `POST {prompt}` returning `{text}`.
pub struct HttpGenerationProvider {
    endpoint: JsonEndpoint,
}

impl HttpGenerationProvider {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: JsonEndpoint::new(url, timeout),
        }
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

impl GenerationProvider for HttpGenerationProvider {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        let reply: GenerateReply = self.endpoint.post(&GenerateRequest { prompt })?;
        Ok(reply.text)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("generation unavailable: {0}")]
    ProviderUnavailable(String),
}

/// Interprets external output. Cited `[snippet id]`s that exist in the
/// context become the supporting ids; with no citation every context id
/// supports the answer.
fn classify_external(text: String, parts: &PromptParts, idk_message: &str) -> GeneratedResponse {
    let ids: Vec<&str> = parts
        .reduced_context
        .snippets
        .iter()
        .map(|s| s.snippet_id.as_str())
        .collect();
    if text.trim().starts_with(idk_message) || ids.is_empty() {
        return GeneratedResponse::idk(idk_message, ResponseProvider::External);
    }
    let cited: Vec<String> = ids
        .iter()
        .filter(|id| text.contains(&format!("[{id}]")))
        .map(|s| s.to_string())
        .collect();
    GeneratedResponse {
        kind: ResponseKind::Answer,
        text,
        supporting_snippet_ids: if cited.is_empty() {
            ids.iter().map(|s| s.to_string()).collect()
        } else {
            cited
        },
        provider: ResponseProvider::External,
        fallback_reason: None,
    }
}

/// Sends the composed prompt to `provider` when one is given, falling back
/// to [`answer_extractive`] if it fails.
pub fn generate(
    parts: &PromptParts,
    provider: Option<&dyn GenerationProvider>,
    embedder: &dyn Embedder,
    tau_idk: f64,
    idk_message: &str,
) -> Result<GeneratedResponse, GenerationError> {
    let prompt = compose_prompt(parts)?;
    let mut fallback_reason = None;
    if let Some(p) = provider {
        match p.generate(&prompt.text) {
            Ok(text) => return Ok(classify_external(text, parts, idk_message)),
            Err(e) => fallback_reason = Some(e.to_string()),
        }
    }
    match answer_extractive(parts, embedder, tau_idk, idk_message) {
        Ok(mut r) => {
            r.fallback_reason = fallback_reason;
            Ok(r)
        }
        Err(e) => Err(GenerationError::ProviderUnavailable(
            match fallback_reason {
                Some(f) => format!("{f}; fallback: {e}"),
                None => e.to_string(),
            },
        )),
    }
}
