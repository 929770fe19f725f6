//! Communication-failure detection: length mismatches on matched messages
//! and isolated (unmatched) sends and receives.
//!
//! A pending blocking receive would wait forever for its message, blocking
//! the receiving process; a pending send typically comes from a wrong
//! destination address.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EventGraph, EventId};
use crate::trace::PendingReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnomalyKind {
    LengthMismatch,
    IsolatedSend,
    IsolatedReceive,
}

impl AnomalyKind {
    /// CSS class used by the renderer.
    pub fn css_class(self) -> &'static str {
        match self {
            AnomalyKind::LengthMismatch => "length-mismatch",
            AnomalyKind::IsolatedSend => "isolated-send",
            AnomalyKind::IsolatedReceive => "isolated-receive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    pub severity: Severity,
    pub events: Vec<EventId>,
    pub details: BTreeMap<String, u64>,
}

impl Anomaly {
    pub fn length_mismatch(send: EventId, recv: EventId, send_len: u64, recv_len: u64) -> Self {
        Anomaly {
            kind: AnomalyKind::LengthMismatch,
            // differing lengths are not necessarily an error
            severity: Severity::Warning,
            events: vec![send, recv],
            details: BTreeMap::from([("recv_len".to_owned(), recv_len), ("send_len".to_owned(), send_len)]),
        }
    }

    pub fn isolated(kind: AnomalyKind, event: EventId) -> Self {
        debug_assert_ne!(kind, AnomalyKind::LengthMismatch);
        Anomaly {
            kind,
            severity: Severity::Error,
            events: vec![event],
            details: BTreeMap::new(),
        }
    }

    /// Checks the coordinate-count rule for the kind.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            AnomalyKind::LengthMismatch => self.events.len() == 2,
            AnomalyKind::IsolatedSend | AnomalyKind::IsolatedReceive => self.events.len() == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FailureError {
    #[error("matched event {event} lacks an unsigned `len` attribute")]
    MissingAttr { event: EventId },
}

/// One warning per matched pair whose send and receive lengths differ,
/// ordered by send coordinate.
pub fn check_length_mismatch(graph: &EventGraph) -> Result<Vec<Anomaly>, FailureError> {
    let len_of = |id: EventId| {
        graph
            .event(id)
            .and_then(|e| e.attr_u64("len"))
            .ok_or(FailureError::MissingAttr { event: id })
    };
    let mut out = Vec::new();
    for r in graph.sorted_relations() {
        let send_len = len_of(r.send)?;
        let recv_len = len_of(r.recv)?;
        if send_len != recv_len {
            out.push(Anomaly::length_mismatch(r.send, r.recv, send_len, recv_len));
        }
    }
    Ok(out)
}

/// Isolated sends first, then isolated receives, each in coordinate order.
pub fn find_isolated_events(pending: &PendingReport) -> Vec<Anomaly> {
    let mut sends = pending.sends.clone();
    let mut recvs = pending.receives.clone();
    sends.sort();
    recvs.sort();
    sends
        .into_iter()
        .map(|e| Anomaly::isolated(AnomalyKind::IsolatedSend, e))
        .chain(recvs.into_iter().map(|e| Anomaly::isolated(AnomalyKind::IsolatedReceive, e)))
        .collect()
}

/// Both checks, length mismatches first.
pub fn detect_failures(graph: &EventGraph, pending: &PendingReport) -> Result<Vec<Anomaly>, FailureError> {
    let mut out = check_length_mismatch(graph)?;
    out.extend(find_isolated_events(pending));
    Ok(out)
}
