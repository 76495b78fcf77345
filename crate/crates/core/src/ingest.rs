//! File ingestion: catalog JSONL into a [`CatalogIndex`] and judgment JSONL
//! into an [`EvalReport`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{build_index, CatalogIndex};
use crate::eval::{aggregate, build_report, load_judgments, EvalReport, JudgmentLineError};
use crate::exec::Execution;
use crate::model::{ProductId, ProductRecord};
use crate::text::normalize_text;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_read: usize,
    pub records_indexed: usize,
    pub duplicates: usize,
    /// Message per 1-based line number.
    pub errors: BTreeMap<usize, String>,
}

impl IngestReport {
    pub fn is_consistent(&self) -> bool {
        self.records_read == self.records_indexed + self.duplicates + self.errors.len()
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("judgment file has {} bad line(s): {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<JudgmentLineError>),
}

fn read(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses catalog JSONL, skipping blank lines. A repeated product_id counts
/// as a duplicate (first occurrence wins); a name that normalizes like an
/// earlier product's name is a line error.
pub fn parse_catalog(jsonl: &str) -> (CatalogIndex, IngestReport) {
    let mut report = IngestReport::default();
    let mut records: Vec<ProductRecord> = Vec::new();
    let mut ids: HashSet<ProductId> = HashSet::new();
    let mut names: HashMap<String, ProductId> = HashMap::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.records_read += 1;
        let record = match serde_json::from_str::<ProductRecord>(line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.insert(i + 1, e.to_string());
                continue;
            }
        };
        if let Err(e) = record.validate() {
            report.errors.insert(i + 1, e.to_string());
            continue;
        }
        if ids.contains(&record.product_id) {
            report.duplicates += 1;
            continue;
        }
        let norm = normalize_text(&record.canonical_name);
        if let Some(first) = names.get(&norm) {
            report.errors.insert(
                i + 1,
                format!(
                    "name {:?} collides with product {first}",
                    record.canonical_name
                ),
            );
            continue;
        }
        ids.insert(record.product_id.clone());
        names.insert(norm, record.product_id.clone());
        records.push(record);
    }
    report.records_indexed = records.len();
    let index = build_index(records).expect("records were deduplicated and validated");
    (index, report)
}

pub fn ingest_catalog(path: &Path) -> Result<(CatalogIndex, IngestReport), IngestError> {
    Ok(parse_catalog(&read(path)?))
}

/// Reads judgments and computes the report; per-intent rows are dropped
/// unless `group_by_intent`.
pub fn run_eval_job(
    path: &Path,
    group_by_intent: bool,
    exec: Execution,
) -> Result<EvalReport, IngestError> {
    let records = load_judgments(&read(path)?).map_err(IngestError::Schema)?;
    let mut report = build_report(&aggregate(&records, exec));
    if !group_by_intent {
        report.per_intent.clear();
    }
    Ok(report)
}
