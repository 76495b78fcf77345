//! Answer-quality metrics over judged queries.
//!
//! Each judgment falls in one of four scenarios: S1 sufficient context and an
//! answer, S2 insufficient context and IDK, S3 insufficient context and an
//! answer, S4 sufficient context and IDK. Partial sufficiency counts as
//! sufficient. A metric whose denominator is zero is undefined (`None`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::IntentLabel;
use crate::providers::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sufficiency {
    Full,
    Partial,
    None,
}

impl Sufficiency {
    pub fn is_sufficient(self) -> bool {
        !matches!(self, Sufficiency::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Answer,
    Idk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub intent: IntentLabel,
    pub context_sufficiency: Sufficiency,
    pub answer_kind: AnswerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factually_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgmentError {
    #[error("answer judgments need factually_correct and complete")]
    MissingAnswerLabels,
    #[error("IDK judgments must not carry factually_correct or complete")]
    UnexpectedAnswerLabels,
}

impl JudgmentRecord {
    pub fn validate(&self) -> Result<(), JudgmentError> {
        let labelled = (self.factually_correct.is_some(), self.complete.is_some());
        match (self.answer_kind, labelled) {
            (AnswerKind::Answer, (true, true)) | (AnswerKind::Idk, (false, false)) => Ok(()),
            (AnswerKind::Answer, _) => Err(JudgmentError::MissingAnswerLabels),
            (AnswerKind::Idk, _) => Err(JudgmentError::UnexpectedAnswerLabels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub scenario: Scenario,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s1_good: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s1_factually_correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s1_complete: Option<bool>,
}

/// Expects a record that passed [`JudgmentRecord::validate`]; missing S1
/// labels are read as false.
pub fn classify_scenario(record: &JudgmentRecord) -> ScenarioLabel {
    let scenario = match (
        record.context_sufficiency.is_sufficient(),
        record.answer_kind,
    ) {
        (true, AnswerKind::Answer) => Scenario::S1,
        (false, AnswerKind::Idk) => Scenario::S2,
        (false, AnswerKind::Answer) => Scenario::S3,
        (true, AnswerKind::Idk) => Scenario::S4,
    };
    if scenario != Scenario::S1 {
        return ScenarioLabel {
            scenario,
            s1_good: None,
            s1_factually_correct: None,
            s1_complete: None,
        };
    }
    let fc = record.factually_correct.unwrap_or(false);
    let comp = record.complete.unwrap_or(false);
    ScenarioLabel {
        scenario,
        s1_good: Some(fc && comp),
        s1_factually_correct: Some(fc),
        s1_complete: Some(comp),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub m: u64,
    pub n_s1: u64,
    pub n_s2: u64,
    pub n_s3: u64,
    pub n_s4: u64,
    pub n_s1_fc: u64,
    pub n_s1_comp: u64,
    pub n_s1_good: u64,
    pub n_s1_bad: u64,
    pub n_answerable: u64,
}

impl EvalCounts {
    pub fn add(&mut self, record: &JudgmentRecord) {
        let label = classify_scenario(record);
        self.m += 1;
        self.n_answerable += u64::from(record.context_sufficiency.is_sufficient());
        match label.scenario {
            Scenario::S1 => {
                self.n_s1 += 1;
                self.n_s1_fc += u64::from(label.s1_factually_correct == Some(true));
                self.n_s1_comp += u64::from(label.s1_complete == Some(true));
                if label.s1_good == Some(true) {
                    self.n_s1_good += 1;
                } else {
                    self.n_s1_bad += 1;
                }
            }
            Scenario::S2 => self.n_s2 += 1,
            Scenario::S3 => self.n_s3 += 1,
            Scenario::S4 => self.n_s4 += 1,
        }
    }

    pub fn merge(self, o: EvalCounts) -> EvalCounts {
        EvalCounts {
            m: self.m + o.m,
            n_s1: self.n_s1 + o.n_s1,
            n_s2: self.n_s2 + o.n_s2,
            n_s3: self.n_s3 + o.n_s3,
            n_s4: self.n_s4 + o.n_s4,
            n_s1_fc: self.n_s1_fc + o.n_s1_fc,
            n_s1_comp: self.n_s1_comp + o.n_s1_comp,
            n_s1_good: self.n_s1_good + o.n_s1_good,
            n_s1_bad: self.n_s1_bad + o.n_s1_bad,
            n_answerable: self.n_answerable + o.n_answerable,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.n_s1 + self.n_s2 + self.n_s3 + self.n_s4 == self.m
            && self.n_s1_good <= self.n_s1_fc.min(self.n_s1_comp)
            && self.n_s1_fc.max(self.n_s1_comp) <= self.n_s1
            && self.n_s1_bad == self.n_s1 - self.n_s1_good
            && self.n_answerable == self.n_s1 + self.n_s4
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateCounts {
    pub overall: EvalCounts,
    pub per_intent: BTreeMap<IntentLabel, EvalCounts>,
}

impl AggregateCounts {
    fn add(mut self, r: &JudgmentRecord) -> Self {
        self.overall.add(r);
        self.per_intent.entry(r.intent).or_default().add(r);
        self
    }

    fn merge(mut self, o: AggregateCounts) -> Self {
        self.overall = self.overall.merge(o.overall);
        for (k, v) in o.per_intent {
            let e = self.per_intent.entry(k).or_default();
            *e = e.merge(v);
        }
        self
    }
}

pub fn aggregate(records: &[JudgmentRecord], exec: Execution) -> AggregateCounts {
    exec.fold(
        records,
        AggregateCounts::default,
        AggregateCounts::add,
        AggregateCounts::merge,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub context_coverage: Option<f64>,
    pub grounded_accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub hallucination_rate: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(c: &EvalCounts) -> MetricValues {
    MetricValues {
        context_coverage: ratio(c.n_answerable, c.m),
        grounded_accuracy: ratio(c.n_s1_fc, c.n_s1),
        completeness: ratio(c.n_s1_comp, c.n_s1),
        precision: ratio(c.n_s1_good, c.n_s1 + c.n_s3),
        recall: ratio(c.n_s1_good, c.n_s1 + c.n_s4),
        accuracy: ratio(c.n_s1_good + c.n_s2, c.m),
        hallucination_rate: ratio(c.n_s3 + c.n_s1_bad, c.m),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub counts: EvalCounts,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ReportRow,
    pub per_intent: BTreeMap<IntentLabel, ReportRow>,
}

pub fn build_report(counts: &AggregateCounts) -> EvalReport {
    let row = |c: &EvalCounts| ReportRow {
        counts: *c,
        metrics: compute_metrics(c),
    };
    EvalReport {
        overall: row(&counts.overall),
        per_intent: counts
            .per_intent
            .iter()
            .map(|(k, v)| (*k, row(v)))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown report format {0:?} (expected json or table)")]
pub struct UnknownFormat(pub String);

impl FromStr for ReportFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(UnknownFormat(other.to_string())),
        }
    }
}

const TABLE_COLUMNS: [&str; 9] = [
    "intent",
    "queries",
    "coverage",
    "precision",
    "recall",
    "hallucination",
    "accuracy",
    "grounded",
    "completeness",
];

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn table_row(name: &str, row: &ReportRow) -> [String; 9] {
    let m = &row.metrics;
    [
        name.to_string(),
        row.counts.m.to_string(),
        fmt_metric(m.context_coverage),
        fmt_metric(m.precision),
        fmt_metric(m.recall),
        fmt_metric(m.hallucination_rate),
        fmt_metric(m.accuracy),
        fmt_metric(m.grounded_accuracy),
        fmt_metric(m.completeness),
    ]
}

pub fn emit_report(report: &EvalReport, format: &str) -> Result<String, UnknownFormat> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report).expect("report serializes")),
        ReportFormat::Table => {
            let mut rows = vec![TABLE_COLUMNS.map(String::from)];
            rows.extend(
                report
                    .per_intent
                    .iter()
                    .map(|(k, r)| table_row(k.as_str(), r)),
            );
            rows.push(table_row("overall", &report.overall));
            let mut widths = [0usize; 9];
            for r in &rows {
                for (w, cell) in widths.iter_mut().zip(r) {
                    *w = (*w).max(cell.chars().count());
                }
            }
            let mut out = String::new();
            for r in &rows {
                let cells: Vec<String> = r
                    .iter()
                    .zip(widths)
                    .enumerate()
                    .map(|(i, (cell, w))| {
                        let pad = " ".repeat(w - cell.chars().count());
                        if i == 0 {
                            format!("{cell}{pad}")
                        } else {
                            format!("{pad}{cell}")
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct JudgmentLineError {
    pub line: usize,
    pub message: String,
}

/// Parses judgment JSONL, collecting every bad line (1-based).
pub fn load_judgments(jsonl: &str) -> Result<Vec<JudgmentRecord>, Vec<JudgmentLineError>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<JudgmentRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => out.push(r),
            Err(message) => errors.push(JudgmentLineError {
                line: i + 1,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

/// Source of judgments for generated answers. Nothing in this crate
/// implements it; judgments are read from files.
pub trait Judge: Send + Sync {
    fn judge(
        &self,
        query: &str,
        context: &[String],
        answer: &str,
        intent: IntentLabel,
    ) -> Result<JudgmentRecord, ProviderError>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::JUDGMENTS_F1_JSONL;
    use proptest::prelude::*;
    use IntentLabel::*;

    fn rec(s: Sufficiency, a: AnswerKind, fc: Option<bool>, comp: Option<bool>) -> JudgmentRecord {
        JudgmentRecord {
            query_id: "q".into(),
            intent: Warranty,
            context_sufficiency: s,
            answer_kind: a,
            factually_correct: fc,
            complete: comp,
        }
    }

    #[test]
    fn scenario_examples() {
        let l = classify_scenario(&rec(
            Sufficiency::Full,
            AnswerKind::Answer,
            Some(true),
            Some(true),
        ));
        assert_eq!((l.scenario, l.s1_good), (Scenario::S1, Some(true)));
        assert_eq!(
            classify_scenario(&rec(Sufficiency::None, AnswerKind::Idk, None, None)).scenario,
            Scenario::S2
        );
        assert_eq!(
            classify_scenario(&rec(Sufficiency::Partial, AnswerKind::Idk, None, None)).scenario,
            Scenario::S4
        );
        assert_eq!(
            classify_scenario(&rec(
                Sufficiency::None,
                AnswerKind::Answer,
                Some(true),
                Some(true)
            ))
            .scenario,
            Scenario::S3
        );
    }

    #[test]
    fn validation() {
        assert_eq!(
            rec(Sufficiency::Full, AnswerKind::Answer, Some(true), None).validate(),
            Err(JudgmentError::MissingAnswerLabels)
        );
        assert_eq!(
            rec(Sufficiency::Full, AnswerKind::Idk, Some(true), None).validate(),
            Err(JudgmentError::UnexpectedAnswerLabels)
        );
    }

    #[test]
    fn fixture_f1() {
        let records = load_judgments(JUDGMENTS_F1_JSONL).unwrap();
        let c = aggregate(&records, Execution::Sequential).overall;
        assert_eq!(
            c,
            EvalCounts {
                m: 10,
                n_s1: 6,
                n_s2: 2,
                n_s3: 1,
                n_s4: 1,
                n_s1_fc: 5,
                n_s1_comp: 6,
                n_s1_good: 5,
                n_s1_bad: 1,
                n_answerable: 7,
            }
        );
        let m = compute_metrics(&c);
        let close = |v: Option<f64>, x: f64| (v.unwrap() - x).abs() < 1e-12;
        assert!(close(m.context_coverage, 0.7));
        assert!(close(m.grounded_accuracy, 5.0 / 6.0));
        assert!(close(m.completeness, 1.0));
        assert!(close(m.precision, 5.0 / 7.0));
        assert!(close(m.recall, 5.0 / 7.0));
        assert!(close(m.accuracy, 0.7));
        assert!(close(m.hallucination_rate, 0.2));

        let report = build_report(&aggregate(&records, Execution::Parallel));
        let json = emit_report(&report, "json").unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
        let table = emit_report(&report, "table").unwrap();
        let overall = table.lines().find(|l| l.starts_with("overall")).unwrap();
        assert!(overall.contains("0.7143"), "{overall}");
        assert_eq!(
            emit_report(&report, "csv"),
            Err(UnknownFormat("csv".into()))
        );
    }

    #[test]
    fn empty_and_degenerate_sets() {
        let c = aggregate(&[], Execution::Sequential);
        assert_eq!(c.overall, EvalCounts::default());
        assert_eq!(compute_metrics(&c.overall), MetricValues::default());

        let one = aggregate(
            &[rec(Sufficiency::None, AnswerKind::Idk, None, None)],
            Execution::Sequential,
        )
        .overall;
        assert_eq!(
            one,
            EvalCounts {
                m: 1,
                n_s2: 1,
                ..Default::default()
            }
        );

        let all_s2 = vec![rec(Sufficiency::None, AnswerKind::Idk, None, None); 7];
        let m = compute_metrics(&aggregate(&all_s2, Execution::Sequential).overall);
        assert_eq!(
            (m.accuracy, m.hallucination_rate, m.context_coverage),
            (Some(1.0), Some(0.0), Some(0.0))
        );
        assert_eq!(
            (m.precision, m.recall, m.grounded_accuracy, m.completeness),
            (None, None, None, None)
        );
    }

    #[test]
    fn undefined_renders_as_dash_and_null() {
        let report = build_report(&aggregate(
            &[rec(Sufficiency::None, AnswerKind::Idk, None, None)],
            Execution::Sequential,
        ));
        assert!(emit_report(&report, "table")
            .unwrap()
            .split_whitespace()
            .any(|cell| cell == "-"));
        let v: serde_json::Value =
            serde_json::from_str(&emit_report(&report, "json").unwrap()).unwrap();
        assert!(v["overall"]["metrics"]["precision"].is_null());
    }

    #[test]
    fn line_errors_are_reported() {
        let text = format!(
            "{}\n{}\n{}",
            r#"{"query_id":"a","intent":"warranty","context_sufficiency":"full","answer_kind":"idk"}"#,
            r#"{"query_id":"b","intent":"warranty","context_sufficiency":"maybe","answer_kind":"idk"}"#,
            r#"{"query_id":"c","intent":"warranty","context_sufficiency":"full","answer_kind":"answer"}"#,
        );
        let errs = load_judgments(&text).unwrap_err();
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 3]);
    }

    fn record_strategy() -> impl Strategy<Value = JudgmentRecord> {
        (
            0usize..13,
            0u8..3,
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(i, s, answer, fc, comp)| JudgmentRecord {
                query_id: "q".into(),
                intent: IntentLabel::ALL[i],
                context_sufficiency: [Sufficiency::Full, Sufficiency::Partial, Sufficiency::None]
                    [s as usize],
                answer_kind: if answer {
                    AnswerKind::Answer
                } else {
                    AnswerKind::Idk
                },
                factually_correct: answer.then_some(fc),
                complete: answer.then_some(comp),
            })
    }

    proptest! {
        #[test]
        fn counts_are_consistent_and_partition(records in proptest::collection::vec(record_strategy(), 0..200)) {
            let agg = aggregate(&records, Execution::Parallel);
            prop_assert_eq!(&agg, &aggregate(&records, Execution::Sequential));
            prop_assert!(agg.overall.is_consistent());
            let summed = agg.per_intent.values().fold(EvalCounts::default(), |a, b| a.merge(*b));
            prop_assert_eq!(summed, agg.overall);
            let c = agg.overall;
            let m = compute_metrics(&c);
            if c.m > 0 {
                let lhs = m.accuracy.unwrap() * c.m as f64 + m.hallucination_rate.unwrap() * c.m as f64;
                prop_assert!((lhs - (c.m - c.n_s4) as f64).abs() < 1e-9);
            }
            for v in [m.context_coverage, m.grounded_accuracy, m.completeness, m.precision, m.recall, m.accuracy, m.hallucination_rate].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn s3_to_s2_never_hurts(mut records in proptest::collection::vec(record_strategy(), 1..100), pick in any::<prop::sample::Index>()) {
            let s3: Vec<usize> = records.iter().enumerate().filter(|(_, r)| classify_scenario(r).scenario == Scenario::S3).map(|(i, _)| i).collect();
            prop_assume!(!s3.is_empty());
            let before = compute_metrics(&aggregate(&records, Execution::Sequential).overall);
            let i = s3[pick.index(s3.len())];
            records[i].answer_kind = AnswerKind::Idk;
            records[i].factually_correct = None;
            records[i].complete = None;
            let after = compute_metrics(&aggregate(&records, Execution::Sequential).overall);
            prop_assert!(after.accuracy >= before.accuracy);
            prop_assert!(after.hallucination_rate <= before.hallucination_rate);
        }
    }
}
