//! Small checked-in catalog, policy store and conversations used by tests,
//! benchmarks and the demo CLI.

use crate::catalog::{build_index, CatalogIndex};
use crate::model::{ConversationTurn, ProductRecord, Session};
use crate::retrieval::{load_recall_cases, PolicyStore, RecallBenchCase};
use crate::sts::{load_triplets, Triplet};

pub const TOY_CATALOG_JSONL: &str = include_str!("../fixtures/toy_catalog.jsonl");
pub const TOY_POLICIES_JSONL: &str = include_str!("../fixtures/toy_policies.jsonl");
pub const JUDGMENTS_F1_JSONL: &str = include_str!("../fixtures/judgments_f1.jsonl");
pub const TRIPLETS_FASHION_JSONL: &str = include_str!("../fixtures/triplets_fashion.jsonl");
pub const RECALL_FASHION_JSONL: &str = include_str!("../fixtures/recall_fashion.jsonl");

pub fn toy_records() -> Vec<ProductRecord> {
    TOY_CATALOG_JSONL
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("toy catalog line"))
        .collect()
}

pub fn toy_catalog() -> CatalogIndex {
    build_index(toy_records()).expect("toy catalog is consistent")
}

pub fn toy_policies() -> PolicyStore {
    PolicyStore::from_jsonl(TOY_POLICIES_JSONL).expect("toy policies parse")
}

/// The four illustrative conversations, each ending just before the query
/// being rewritten: follow-up, product switch, accessory search, browse.
pub fn rewrite_sessions() -> [Session; 4] {
    let on_page = |id: &str| {
        let mut s = Session::new(id).on_page("P100");
        s.turns.push(ConversationTurn::new(
            1,
            "Battery size?",
            "The battery capacity is 3240 mAh.",
        ));
        s
    };
    let mut browse = Session::new("browse");
    browse.turns.push(ConversationTurn::new(
        1,
        "Show 2 door refrigerators.",
        "Here are some options: LG 242 L Frost Free 2 Star, Samsung 253 L Frost Free 3 Star \
         and Whirlpool 265 L Frost Free 3 Star.",
    ));
    [
        on_page("follow-up"),
        on_page("switch"),
        on_page("accessory"),
        browse,
    ]
}

/// (session, query, expected standalone query) for the four conversations.
pub fn rewrite_cases() -> Vec<(Session, &'static str, &'static str)> {
    let [a, b, c, d] = rewrite_sessions();
    vec![
        (a, "Display size?", "What is the display size of iPhone 13?"),
        (
            b,
            "How about iPhone 14?",
            "What is the battery size of iPhone 14?",
        ),
        (
            c,
            "Show me cases for this phone.",
            "Show me cases for iPhone 13.",
        ),
        (
            d,
            "Capacity of LG fridge?",
            "What is the capacity of LG 242 L Frost Free 2 Star?",
        ),
    ]
}

/// Fifty fashion triplets: positives share the garment word with the query
/// and carry the matching attribute wording, negatives share neither.
pub fn fashion_triplets() -> Vec<Triplet> {
    load_triplets(TRIPLETS_FASHION_JSONL).expect("triplet fixture parses")
}

/// Twenty fashion recall cases of 41 candidates each, one ground truth per case.
pub fn fashion_recall_cases() -> Vec<RecallBenchCase> {
    load_recall_cases(RECALL_FASHION_JSONL).expect("recall fixture parses")
}

/// Twenty short queries, ten warranty and ten delivery, with disjoint keywords.
pub fn separable_intent_set() -> Vec<(String, String)> {
    let warranty = [
        "what is the warranty period",
        "is there a warranty",
        "warranty coverage details",
        "how long is the guarantee",
        "does warranty cover screen damage",
        "extended warranty available",
        "warranty claim process",
        "guarantee on this item",
        "manufacturer warranty length",
        "is the guarantee international",
    ];
    let delivery = [
        "when will it be delivered",
        "delivery time to my city",
        "how fast is shipping",
        "can you ship tomorrow",
        "delivery charges please",
        "is express delivery possible",
        "shipping to remote pincode",
        "when does dispatch happen",
        "track my delivery date",
        "same day shipping option",
    ];
    warranty
        .iter()
        .map(|t| (t.to_string(), "warranty".to_string()))
        .chain(
            delivery
                .iter()
                .map(|t| (t.to_string(), "delivery_sla".to_string())),
        )
        .collect()
}
