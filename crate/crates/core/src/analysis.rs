//! Analyzers behind a common trait, selectable by name, and the in-process
//! analysis that runs them over a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::failures::{self, Anomaly, FailureError};
use crate::model::{Event, EventGraph, GraphBuilder, GraphError};
use crate::patterns::{self, PatternError, PatternRun, PatternTemplate};
use crate::report::AnalysisReport;
use crate::trace::{match_messages, PendingReport};

/// Results accumulated as analyzers run. A field is `None` until some
/// analyzer has produced it; this is also the payload of a Findings message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Findings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomalies: Option<Vec<Anomaly>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<PatternRun>>,
}

impl Findings {
    /// Fields present in `other` replace ours.
    pub fn merge(&mut self, other: Findings) {
        if other.anomalies.is_some() {
            self.anomalies = other.anomalies;
        }
        if other.runs.is_some() {
            self.runs = other.runs;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("findings serialize")
    }

    pub fn from_json(text: &str) -> Result<Findings, AnalysisError> {
        serde_json::from_str(text).map_err(|e| AnalysisError::BadFindings(e.to_string()))
    }

    pub fn into_report(self, graph: &EventGraph) -> AnalysisReport {
        AnalysisReport::new(graph, self.anomalies.unwrap_or_default(), self.runs.unwrap_or_default())
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Failure(#[from] FailureError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("unknown analyzer `{0}`")]
    UnknownAnalyzer(String),
    #[error("malformed findings: {0}")]
    BadFindings(String),
}

pub trait Analyzer: Send {
    fn name(&self) -> &'static str;

    fn analyze(&self, graph: &EventGraph, pending: &PendingReport, findings: &mut Findings) -> Result<(), AnalysisError>;
}

/// Length mismatches and isolated events.
pub struct FailureAnalyzer;

impl Analyzer for FailureAnalyzer {
    fn name(&self) -> &'static str {
        "failures"
    }

    fn analyze(&self, graph: &EventGraph, pending: &PendingReport, findings: &mut Findings) -> Result<(), AnalysisError> {
        findings.anomalies = Some(failures::detect_failures(graph, pending)?);
        Ok(())
    }
}

/// Template matching, run detection, and irregularity classification
/// against whatever anomalies are already known.
pub struct PatternAnalyzer {
    pub templates: Vec<PatternTemplate>,
}

impl Analyzer for PatternAnalyzer {
    fn name(&self) -> &'static str {
        "patterns"
    }

    fn analyze(&self, graph: &EventGraph, _pending: &PendingReport, findings: &mut Findings) -> Result<(), AnalysisError> {
        let mut runs = Vec::new();
        for t in &self.templates {
            let occurrences = patterns::match_template(graph, t)?;
            runs.extend(patterns::detect_runs(&occurrences));
        }
        let anomalies = findings.anomalies.as_deref().unwrap_or(&[]);
        findings.runs = Some(patterns::find_irregularities(runs, anomalies));
        Ok(())
    }
}

/// Built-in simple exchange followed by any templates from the database,
/// a database entry replacing a built-in of the same name.
pub fn template_set(database: Vec<PatternTemplate>) -> Vec<PatternTemplate> {
    let mut out = vec![patterns::builtin_simple_exchange()];
    for t in database {
        match out.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => out.push(t),
        }
    }
    out
}

type AnalyzerFactory = Box<dyn Fn(&[PatternTemplate]) -> Box<dyn Analyzer> + Send + Sync>;

pub struct AnalyzerRegistry {
    factories: BTreeMap<&'static str, AnalyzerFactory>,
}

impl AnalyzerRegistry {
    pub fn empty() -> Self {
        AnalyzerRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: AnalyzerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, templates: &[PatternTemplate]) -> Result<Box<dyn Analyzer>, AnalysisError> {
        self.factories
            .get(name)
            .map(|f| f(templates))
            .ok_or_else(|| AnalysisError::UnknownAnalyzer(name.to_owned()))
    }
}

impl Default for AnalyzerRegistry {
    fn default() -> Self {
        let mut r = AnalyzerRegistry::empty();
        r.register("failures", Box::new(|_| Box::new(FailureAnalyzer)));
        r.register(
            "patterns",
            Box::new(|t| {
                Box::new(PatternAnalyzer {
                    templates: t.to_vec(),
                })
            }),
        );
        r
    }
}

/// The analyzer order used for a full analysis.
pub const FULL_ANALYSIS: [&str; 2] = ["failures", "patterns"];

pub fn run_analyzers(
    analyzers: &[Box<dyn Analyzer>],
    graph: &EventGraph,
    pending: &PendingReport,
    findings: &mut Findings,
) -> Result<(), AnalysisError> {
    for a in analyzers {
        log::debug!("running analyzer {}", a.name());
        a.analyze(graph, pending, findings)?;
    }
    Ok(())
}

pub fn analyze_graph(graph: &EventGraph, templates: &[PatternTemplate]) -> Result<AnalysisReport, AnalysisError> {
    let registry = AnalyzerRegistry::default();
    let analyzers = FULL_ANALYSIS
        .iter()
        .map(|n| registry.create(n, templates))
        .collect::<Result<Vec<_>, _>>()?;
    let (sends, receives) = graph.unmatched();
    let pending = PendingReport { sends, receives };
    let mut findings = Findings::default();
    run_analyzers(&analyzers, graph, &pending, &mut findings)?;
    Ok(findings.into_report(graph))
}

/// Matches messages, builds the graph, and runs the full analysis.
pub fn build_graph(process_count: u32, events: Vec<Event>) -> Result<EventGraph, GraphError> {
    let matched = match_messages(&events);
    GraphBuilder::from_parts(process_count, events, matched.relations)?.build()
}

pub fn analyze_events(
    process_count: u32,
    events: Vec<Event>,
    templates: &[PatternTemplate],
) -> Result<AnalysisReport, AnalysisError> {
    let graph = build_graph(process_count, events)?;
    analyze_graph(&graph, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::failures::AnomalyKind;
    use crate::synth::{self, Fault, Scenario, SyntheticSpec};

    fn analyze(spec: &SyntheticSpec) -> AnalysisReport {
        let t = synth::generate(spec, 11).unwrap();
        analyze_events(t.process_count, t.events, &template_set(Vec::new())).unwrap()
    }

    #[test]
    fn clean_exchange() {
        let r = analyze(&SyntheticSpec::new(Scenario::SimpleExchangeLoop, 4, 5));
        assert!(r.anomalies.is_empty());
        assert_eq!(r.runs.len(), 2);
        assert_eq!(r.trace.event_count, 40);
        assert_eq!(r.trace.relation_count, 20);
    }

    #[test]
    fn wrong_destination_gives_two_isolated_events() {
        let r = analyze(
            &SyntheticSpec::new(Scenario::SimpleExchangeLoop, 2, 10)
                .with_fault(Fault::WrongDestination { iteration: 5, process: 0 }),
        );
        let kinds: Vec<_> = r.anomalies.iter().map(|a| a.kind).collect();
        assert_eq!(kinds, vec![AnomalyKind::IsolatedSend, AnomalyKind::IsolatedReceive]);
        assert_eq!(r.pendings.sends.len(), 1);
    }

    #[test]
    fn registry_lookup() {
        let r = AnalyzerRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["failures", "patterns"]);
        assert!(matches!(r.create("nope", &[]), Err(AnalysisError::UnknownAnalyzer(_))));
    }

    #[test]
    fn findings_merge_and_round_trip() {
        let mut f = Findings {
            anomalies: Some(Vec::new()),
            runs: None,
        };
        f.merge(Findings {
            anomalies: None,
            runs: Some(Vec::new()),
        });
        assert_eq!(f.anomalies, Some(Vec::new()));
        assert_eq!(Findings::from_json(&f.to_json()).unwrap(), f);
        assert!(Findings::from_json("{\"x\":1}").is_err());
    }

    #[test]
    fn database_template_replaces_builtin() {
        let mut t = patterns::builtin_simple_exchange();
        t.events.swap(0, 1);
        let set = template_set(vec![t.clone()]);
        assert_eq!(set, vec![t]);
    }
}
