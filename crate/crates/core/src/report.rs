//! The analysis report: trace metadata, failure anomalies, pattern runs and
//! pending events, serialized as strict, byte-stable JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::failures::Anomaly;
use crate::model::EventGraph;
use crate::patterns::PatternRun;
use crate::trace::PendingReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSummary {
    pub process_count: u32,
    pub event_count: u64,
    pub relation_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub trace: TraceSummary,
    pub anomalies: Vec<Anomaly>,
    pub runs: Vec<PatternRun>,
    pub pendings: PendingReport,
}

impl AnalysisReport {
    pub fn empty(process_count: u32) -> Self {
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            trace: TraceSummary {
                process_count,
                event_count: 0,
                relation_count: 0,
            },
            anomalies: Vec::new(),
            runs: Vec::new(),
            pendings: PendingReport::default(),
        }
    }

    /// Assembles a report; pending events are read off the graph.
    pub fn new(graph: &EventGraph, anomalies: Vec<Anomaly>, runs: Vec<PatternRun>) -> Self {
        let (sends, receives) = graph.unmatched();
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            trace: TraceSummary {
                process_count: graph.process_count(),
                event_count: graph.event_count() as u64,
                relation_count: graph.relations().len() as u64,
            },
            anomalies,
            runs,
            pendings: PendingReport { sends, receives },
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
}

/// Pretty-printed JSON with a trailing newline. Field order is fixed by the
/// type definitions, so equal reports serialize to equal bytes.
pub fn serialize_report(report: &AnalysisReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

pub fn parse_report(text: &str) -> Result<AnalysisReport, ReportError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let report: AnalysisReport = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ReportError::SchemaViolation {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    let violation = |path: String, message: &str| {
        Err(ReportError::SchemaViolation {
            path,
            message: message.to_owned(),
        })
    };
    if report.schema_version != SCHEMA_VERSION {
        return violation("schema_version".into(), "unsupported schema version");
    }
    for (n, a) in report.anomalies.iter().enumerate() {
        if !a.is_well_formed() {
            return violation(format!("anomalies[{n}].events"), "wrong number of events for the anomaly kind");
        }
    }
    for (n, run) in report.runs.iter().enumerate() {
        if run.occurrences.len() < 2 {
            return violation(format!("runs[{n}].occurrences"), "a run needs at least two occurrences");
        }
        if run.stride == 0 {
            return violation(format!("runs[{n}].stride"), "stride must be positive");
        }
        for (m, irr) in run.irregularities.iter().enumerate() {
            if irr.anomaly.is_some_and(|a| a >= report.anomalies.len()) {
                return violation(
                    format!("runs[{n}].irregularities[{m}].anomaly"),
                    "anomaly reference out of range",
                );
            }
        }
    }
    Ok(report)
}
