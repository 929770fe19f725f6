//! Event-graph model, wire protocol, trace ingestion, analyses, and
//! rendering for a distributed trace-analysis pipeline.

pub mod analysis;
pub mod failures;
pub mod model;
pub mod module;
pub mod patterns;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod synth;
pub mod trace;
pub mod wire;

pub use model::{Event, EventGraph, EventId, EventKind, GraphBuilder, GraphError, ProcessId, Relation, SeqIndex};
