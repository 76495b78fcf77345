//! Context-aware product question answering: query rewriting, catalog
//! resolution, entropy-based intent routing, two-stage retrieval, grounded
//! generation and the answer-quality metric suite.

pub mod catalog;
pub mod config;
pub mod eval;
pub mod exec;
pub mod fixtures;
pub mod generation;
pub mod ingest;
pub mod intent;
pub mod model;
pub mod pipeline;
pub mod providers;
pub mod retrieval;
pub mod saq;
pub mod store;
pub mod sts;
pub mod text;
