//! Deterministic keyword classifier used as the built-in intent provider.

use crate::model::{IntentLabel, INTENT_COUNT};
use crate::providers::ProviderError;
use crate::text::normalize_text;

use super::{IntentClassifier, IntentDistribution};

/// Bumped whenever a phrase is added or removed.
pub const LEXICON_VERSION: u32 = 1;

/// Pseudo-count added to every label before normalizing.
pub const SMOOTHING: f64 = 0.01;

/// Probability assigned to `non_decision` when nothing matches.
const NO_MATCH_NON_DECISION: f64 = 0.6;

/// Phrases per label, matched on normalized text at token boundaries.
pub const LEXICON: [(IntentLabel, &[&str]); INTENT_COUNT] = [
    (
        IntentLabel::NonDecision,
        &[
            "show me",
            "list",
            "compare",
            "find",
            "search",
            "recommend",
            "suggest",
            "similar",
        ],
    ),
    (
        IntentLabel::Authenticity,
        &[
            "original",
            "genuine",
            "authentic",
            "fake",
            "counterfeit",
            "authorised",
            "authorized",
            "brand new",
        ],
    ),
    (
        IntentLabel::Checkout,
        &[
            "checkout",
            "check out",
            "place the order",
            "place order",
            "add to cart",
            "cart",
            "cash on delivery",
            "buy now",
        ],
    ),
    (
        IntentLabel::DeliverySla,
        &[
            "deliver",
            "delivery",
            "when will it arrive",
            "arrive",
            "shipping",
            "ship",
            "dispatch",
            "how soon",
        ],
    ),
    (
        IntentLabel::OffersAndDiscounts,
        &[
            "offer",
            "offers",
            "discount",
            "discounts",
            "coupon",
            "deal",
            "cashback",
            "sale",
        ],
    ),
    (
        IntentLabel::PaymentOptions,
        &[
            "payment",
            "pay",
            "emi",
            "upi",
            "credit card",
            "debit card",
            "net banking",
            "installment",
        ],
    ),
    (
        IntentLabel::ProductExchange,
        &[
            "exchange",
            "trade in",
            "swap",
            "old phone",
            "buyback",
            "upgrade program",
            "exchange value",
            "trade my",
        ],
    ),
    (
        IntentLabel::ProductSpec,
        &[
            "spec",
            "specs",
            "specification",
            "specifications",
            "feature",
            "features",
            "display size",
            "screen size",
            "battery",
            "camera",
            "processor",
            "capacity",
            "storage",
            "ram",
            "waterproof",
            "refresh rate",
            "dimensions",
            "weight",
        ],
    ),
    (
        IntentLabel::ReturnPolicy,
        &[
            "return",
            "returns",
            "refund",
            "return policy",
            "send back",
            "replacement",
            "returnable",
            "money back",
        ],
    ),
    (
        IntentLabel::SizeAndFit,
        &[
            "fit",
            "size chart",
            "true to size",
            "waist",
            "length",
            "tight",
            "loose",
            "which size",
        ],
    ),
    (
        IntentLabel::StockAvailability,
        &[
            "in stock",
            "stock",
            "available",
            "availability",
            "out of stock",
            "sold out",
            "restock",
            "back in stock",
        ],
    ),
    (
        IntentLabel::Variant,
        &[
            "variant",
            "variants",
            "color",
            "colour",
            "colors",
            "colours",
            "other colors",
            "storage options",
        ],
    ),
    (
        IntentLabel::Warranty,
        &[
            "warranty",
            "guarantee",
            "warranty period",
            "extended warranty",
            "guaranteed",
            "covered",
            "coverage",
            "apple care",
        ],
    ),
];

/// Counts distinct lexicon phrases per label, adds [`SMOOTHING`] to each count
/// and normalizes. With no match at all, `non_decision` gets 0.6 and the rest
/// is spread evenly over the decision labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordClassifier;

impl KeywordClassifier {
    pub fn match_counts(text: &str) -> [usize; INTENT_COUNT] {
        let padded = format!(" {} ", normalize_text(text));
        let mut counts = [0usize; INTENT_COUNT];
        for (label, phrases) in LEXICON {
            counts[label.index()] = phrases
                .iter()
                .filter(|p| padded.contains(&format!(" {p} ")))
                .count();
        }
        counts
    }

    pub fn distribution(text: &str) -> IntentDistribution {
        let counts = Self::match_counts(text);
        let weights = if counts.iter().all(|c| *c == 0) {
            let mut w = [(1.0 - NO_MATCH_NON_DECISION) / 12.0; INTENT_COUNT];
            w[IntentLabel::NonDecision.index()] = NO_MATCH_NON_DECISION;
            w
        } else {
            counts.map(|c| c as f64 + SMOOTHING)
        };
        IntentDistribution::from_weights(weights).expect("weights are positive")
    }
}

impl IntentClassifier for KeywordClassifier {
    fn classify(&self, text: &str) -> Result<IntentDistribution, ProviderError> {
        Ok(Self::distribution(text))
    }
}
