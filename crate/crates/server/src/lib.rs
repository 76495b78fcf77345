//! HTTP API and command-line front end for the product QA pipeline.

pub mod api;
pub mod cli;
