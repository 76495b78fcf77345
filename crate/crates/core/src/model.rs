//! Shared data model: catalog records, sessions and the intent taxonomy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque catalog identifier.
pub type ProductId = String;

/// One question/answer pair attached to a product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// One catalog product: structured attributes, free-text passages and Q/A pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductRecord {
    pub product_id: ProductId,
    pub canonical_name: String,
    #[serde(default)]
    pub structured: IndexMap<String, String>,
    #[serde(default)]
    pub unstructured: Vec<String>,
    #[serde(default)]
    pub semi_structured: Vec<QaPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("product_id is empty")]
    EmptyId,
    #[error("canonical_name is empty for {0}")]
    EmptyName(ProductId),
}

impl ProductRecord {
    pub fn new(product_id: impl Into<String>, canonical_name: impl Into<String>) -> Self {
        Self {
            product_id: product_id.into(),
            canonical_name: canonical_name.into(),
            structured: IndexMap::new(),
            unstructured: Vec::new(),
            semi_structured: Vec::new(),
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.structured.insert(name.into(), value.into());
        self
    }

    pub fn with_review(mut self, text: impl Into<String>) -> Self {
        self.unstructured.push(text.into());
        self
    }

    pub fn with_qa(mut self, question: impl Into<String>, answer: impl Into<String>) -> Self {
        self.semi_structured.push(QaPair {
            question: question.into(),
            answer: answer.into(),
        });
        self
    }

    /// Attribute-name uniqueness is guaranteed by the map itself.
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.product_id.trim().is_empty() {
            return Err(RecordError::EmptyId);
        }
        if self.canonical_name.trim().is_empty() {
            return Err(RecordError::EmptyName(self.product_id.clone()));
        }
        Ok(())
    }
}

/// Profile and preference pairs for the current user. May be empty.
pub type UserContext = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_index: u32,
    pub user_query: String,
    pub system_response: String,
    #[serde(default)]
    pub resolved_product_ids: Vec<ProductId>,
    pub timestamp: u64,
    /// The rewritten query produced for this turn, when the pipeline recorded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standalone_query: Option<String>,
}

impl ConversationTurn {
    pub fn new(
        turn_index: u32,
        user_query: impl Into<String>,
        system_response: impl Into<String>,
    ) -> Self {
        Self {
            turn_index,
            user_query: user_query.into(),
            system_response: system_response.into(),
            resolved_product_ids: Vec::new(),
            timestamp: 0,
            standalone_query: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    #[serde(default)]
    pub user_context: UserContext,
    #[serde(default)]
    pub turns: Vec<ConversationTurn>,
    #[serde(default)]
    pub current_page_product_id: Option<ProductId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("turn index gap: expected {expected}, got {got}")]
    IndexGap { expected: u32, got: u32 },
    #[error("user query is empty")]
    EmptyQuery,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            user_context: UserContext::new(),
            turns: Vec::new(),
            current_page_product_id: None,
        }
    }

    pub fn on_page(mut self, product_id: impl Into<String>) -> Self {
        self.current_page_product_id = Some(product_id.into());
        self
    }

    pub fn next_turn_index(&self) -> u32 {
        self.turns.last().map_or(1, |t| t.turn_index + 1)
    }

    /// Returns a new session with `turn` appended.
    pub fn append_turn(&self, turn: ConversationTurn) -> Result<Session, SessionError> {
        let mut next = self.clone();
        next.push_turn(turn)?;
        Ok(next)
    }

    pub(crate) fn push_turn(&mut self, turn: ConversationTurn) -> Result<(), SessionError> {
        let expected = self.next_turn_index();
        if turn.turn_index != expected {
            return Err(SessionError::IndexGap {
                expected,
                got: turn.turn_index,
            });
        }
        if turn.user_query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        self.turns.push(turn);
        Ok(())
    }
}

/// The fixed 13-label intent taxonomy, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentLabel {
    NonDecision,
    Authenticity,
    Checkout,
    DeliverySla,
    OffersAndDiscounts,
    PaymentOptions,
    ProductExchange,
    ProductSpec,
    ReturnPolicy,
    SizeAndFit,
    StockAvailability,
    Variant,
    Warranty,
}

pub const INTENT_COUNT: usize = 13;
pub const DECISION_INTENT_COUNT: usize = 12;

impl IntentLabel {
    pub const ALL: [IntentLabel; INTENT_COUNT] = [
        IntentLabel::NonDecision,
        IntentLabel::Authenticity,
        IntentLabel::Checkout,
        IntentLabel::DeliverySla,
        IntentLabel::OffersAndDiscounts,
        IntentLabel::PaymentOptions,
        IntentLabel::ProductExchange,
        IntentLabel::ProductSpec,
        IntentLabel::ReturnPolicy,
        IntentLabel::SizeAndFit,
        IntentLabel::StockAvailability,
        IntentLabel::Variant,
        IntentLabel::Warranty,
    ];

    pub fn decision_labels() -> impl Iterator<Item = IntentLabel> {
        Self::ALL.into_iter().filter(|l| l.is_decision())
    }

    pub fn is_decision(self) -> bool {
        self != IntentLabel::NonDecision
    }

    /// Position in the canonical taxonomy order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntentLabel::NonDecision => "non_decision",
            IntentLabel::Authenticity => "authenticity",
            IntentLabel::Checkout => "checkout",
            IntentLabel::DeliverySla => "delivery_sla",
            IntentLabel::OffersAndDiscounts => "offers_and_discounts",
            IntentLabel::PaymentOptions => "payment_options",
            IntentLabel::ProductExchange => "product_exchange",
            IntentLabel::ProductSpec => "product_spec",
            IntentLabel::ReturnPolicy => "return_policy",
            IntentLabel::SizeAndFit => "size_and_fit",
            IntentLabel::StockAvailability => "stock_availability",
            IntentLabel::Variant => "variant",
            IntentLabel::Warranty => "warranty",
        }
    }
}

impl IntentLabel {
    /// Label as a capitalized phrase, e.g. "Return policy".
    pub fn human_name(self) -> String {
        if self == IntentLabel::DeliverySla {
            return "Delivery".into();
        }
        let s = self.as_str().replace('_', " ");
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => s,
        }
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown intent label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for IntentLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IntentLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_owned()))
    }
}
