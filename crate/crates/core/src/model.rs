//! Event-graph data model.
//!
//! An event graph holds one ordered timeline of [`Event`]s per process (the
//! sequential order) and a set of [`Relation`]s linking each send to the
//! receive it was matched with (the concurrent order). Happened-before is the
//! transitive closure of both; it is decided here through vector clocks that
//! are always recomputed from the graph itself.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum encoded length of a string attribute value.
pub const MAX_ATTR_STRING: usize = u16::MAX as usize;
/// Maximum encoded length of an attribute name.
pub const MAX_ATTR_NAME: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

/// 1-based position of an event on its process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqIndex(pub u64);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SeqIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Coordinate of an event: `(process, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u64)", into = "(u32, u64)")]
pub struct EventId {
    pub process: ProcessId,
    pub index: SeqIndex,
}

impl EventId {
    pub const fn new(process: u32, index: u64) -> Self {
        EventId {
            process: ProcessId(process),
            index: SeqIndex(index),
        }
    }
}

impl From<(u32, u64)> for EventId {
    fn from((p, i): (u32, u64)) -> Self {
        EventId::new(p, i)
    }
}

impl From<EventId> for (u32, u64) {
    fn from(id: EventId) -> Self {
        (id.process.0, id.index.0)
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e[{}:{}]", self.process, self.index)
    }
}

/// Kind of an event. Codes 1..=6 are the canonical kinds, codes >= 1000 are
/// user-defined; everything else is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKind(u16);

impl EventKind {
    pub const SEND: EventKind = EventKind(1);
    pub const RECEIVE: EventKind = EventKind(2);
    pub const LOCK: EventKind = EventKind(3);
    pub const UNLOCK: EventKind = EventKind(4);
    pub const READ: EventKind = EventKind(5);
    pub const WRITE: EventKind = EventKind(6);
    pub const FIRST_USER_CODE: u16 = 1000;

    const NAMES: [(&'static str, EventKind); 6] = [
        ("send", EventKind::SEND),
        ("receive", EventKind::RECEIVE),
        ("lock", EventKind::LOCK),
        ("unlock", EventKind::UNLOCK),
        ("read", EventKind::READ),
        ("write", EventKind::WRITE),
    ];

    pub fn from_code(code: u16) -> Result<Self, GraphError> {
        match code {
            1..=6 => Ok(EventKind(code)),
            c if c >= Self::FIRST_USER_CODE => Ok(EventKind(c)),
            c => Err(GraphError::KindReserved(c)),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, k)| *k)
    }

    pub fn code(self) -> u16 {
        self.0
    }

    /// Canonical name, `None` for user-defined kinds.
    pub fn name(self) -> Option<&'static str> {
        Self::NAMES.iter().find(|(_, k)| *k == self).map(|(n, _)| *n)
    }

    pub fn is_user_defined(self) -> bool {
        self.0 >= Self::FIRST_USER_CODE
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "user:{}", self.0),
        }
    }
}

/// Kinds serialize as their canonical name or, for user kinds, as the bare code.
impl Serialize for EventKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.name() {
            Some(n) => s.serialize_str(n),
            None => s.serialize_u16(self.0),
        }
    }
}

impl<'de> Deserialize<'de> for EventKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Code(u16),
        }
        match Repr::deserialize(d)? {
            Repr::Name(n) => EventKind::from_name(&n)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown event kind `{n}`"))),
            Repr::Code(c) => EventKind::from_code(c).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    U64(u64),
    I64(i64),
    F64(f64),
    Str(String),
}

impl AttrValue {
    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            AttrValue::U64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            AttrValue::U64(v) => Some(v as f64),
            AttrValue::I64(v) => Some(v as f64),
            AttrValue::F64(v) => Some(v),
            AttrValue::Str(_) => None,
        }
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub process: ProcessId,
    pub index: SeqIndex,
    pub kind: EventKind,
    pub attrs: Attrs,
}

impl Event {
    pub fn new(process: u32, index: u64, kind: EventKind) -> Self {
        Event {
            process: ProcessId(process),
            index: SeqIndex(index),
            kind,
            attrs: Attrs::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: AttrValue) -> Self {
        self.attrs.insert(key.to_owned(), value);
        self
    }

    pub fn send(process: u32, index: u64, dst: u64, len: u64) -> Self {
        Event::new(process, index, EventKind::SEND)
            .with_attr("dst", AttrValue::U64(dst))
            .with_attr("len", AttrValue::U64(len))
    }

    pub fn receive(process: u32, index: u64, src: u64, len: u64) -> Self {
        Event::new(process, index, EventKind::RECEIVE)
            .with_attr("src", AttrValue::U64(src))
            .with_attr("len", AttrValue::U64(len))
    }

    pub fn id(&self) -> EventId {
        EventId {
            process: self.process,
            index: self.index,
        }
    }

    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).and_then(AttrValue::as_u64)
    }

    /// Message tag; absent means 0.
    pub fn tag(&self) -> u64 {
        self.attr_u64("tag").unwrap_or(0)
    }

    /// Checks the per-kind required attributes and encoded size limits.
    pub fn validate(&self) -> Result<(), GraphError> {
        EventKind::from_code(self.kind.code())?;
        if self.index.0 == 0 {
            return Err(GraphError::IndexGap {
                process: self.process,
                expected: 1,
                got: 0,
            });
        }
        let required: &[&str] = match self.kind {
            EventKind::SEND => &["dst", "len"],
            EventKind::RECEIVE => &["src", "len"],
            _ => &[],
        };
        for key in required.iter().chain(["tag"].iter()) {
            let present = self.attrs.get(*key);
            let ok = match present {
                Some(v) => v.as_u64().is_some(),
                None => *key == "tag",
            };
            if !ok {
                return Err(GraphError::MissingRequiredAttr {
                    event: self.id(),
                    attr: (*key).to_owned(),
                });
            }
        }
        for (k, v) in &self.attrs {
            if k.len() > MAX_ATTR_NAME {
                return Err(GraphError::AttrTooLong { event: self.id() });
            }
            if let AttrValue::Str(s) = v {
                if s.len() > MAX_ATTR_STRING {
                    return Err(GraphError::AttrTooLong { event: self.id() });
                }
            }
        }
        Ok(())
    }
}

/// A matched message: `(p, i, q, j)` with the send at `e_p^i` and the receive
/// at `e_q^j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relation {
    pub send: EventId,
    pub recv: EventId,
}

impl Relation {
    pub const fn new(p: u32, i: u64, q: u32, j: u64) -> Self {
        Relation {
            send: EventId::new(p, i),
            recv: EventId::new(q, j),
        }
    }
}

impl Serialize for Relation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (
            self.send.process.0,
            self.send.index.0,
            self.recv.process.0,
            self.recv.index.0,
        )
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (p, i, q, j) = <(u32, u64, u32, u64)>::deserialize(d)?;
        Ok(Relation::new(p, i, q, j))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph is frozen")]
    Frozen,
    #[error("process count must be positive")]
    NoProcesses,
    #[error("process {0} is outside the declared process count")]
    UnknownProcess(ProcessId),
    #[error("index gap on process {process}: expected {expected}, got {got}")]
    IndexGap {
        process: ProcessId,
        expected: u64,
        got: u64,
    },
    #[error("duplicate event {0}")]
    DuplicateEvent(EventId),
    #[error("event kind code {0} is reserved")]
    KindReserved(u16),
    #[error("event {event} lacks required unsigned attribute `{attr}`")]
    MissingRequiredAttr { event: EventId, attr: String },
    #[error("attribute name or string value too long on {event}")]
    AttrTooLong { event: EventId },
    #[error("relation endpoint {0} does not exist")]
    UnknownEndpoint(EventId),
    #[error("relation {send} -> {recv} does not link a send to a receive")]
    KindMismatch { send: EventId, recv: EventId },
    #[error("event {0} already participates in a relation")]
    EndpointReused(EventId),
    #[error("relation endpoints lie on the same process {0}")]
    SelfProcess(ProcessId),
    #[error("graph validation failed: {0:?}")]
    ValidationFailed(Vec<GraphError>),
    #[error("relations form a causal cycle")]
    CausalCycle,
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("vector clocks have not been assigned")]
    ClocksMissing,
}

/// Mutable, single-writer construction state of an [`EventGraph`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    process_count: u32,
    timelines: Vec<Vec<Event>>,
    relations: Vec<Relation>,
    frozen: Option<EventGraph>,
}

impl GraphBuilder {
    pub fn new(process_count: u32) -> Result<Self, GraphError> {
        if process_count == 0 {
            return Err(GraphError::NoProcesses);
        }
        Ok(GraphBuilder {
            process_count,
            timelines: vec![Vec::new(); process_count as usize],
            relations: Vec::new(),
            frozen: None,
        })
    }

    /// Loads events and relations without per-item checks; everything is
    /// validated at [`freeze`](Self::freeze) time and reported together.
    pub fn from_parts(
        process_count: u32,
        events: Vec<Event>,
        relations: Vec<Relation>,
    ) -> Result<Self, GraphError> {
        let mut builder = GraphBuilder::new(process_count)?;
        let mut stray = Vec::new();
        for e in events {
            match builder.timelines.get_mut(e.process.0 as usize) {
                Some(t) => t.push(e),
                None => stray.push(e),
            }
        }
        if let Some(e) = stray.first() {
            return Err(GraphError::UnknownProcess(e.process));
        }
        builder.relations = relations;
        Ok(builder)
    }

    pub fn process_count(&self) -> u32 {
        self.process_count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn add_event(&mut self, event: Event) -> Result<(), GraphError> {
        if self.is_frozen() {
            return Err(GraphError::Frozen);
        }
        let timeline = self
            .timelines
            .get_mut(event.process.0 as usize)
            .ok_or(GraphError::UnknownProcess(event.process))?;
        let expected = timeline.len() as u64 + 1;
        if event.index.0 < expected && event.index.0 > 0 {
            return Err(GraphError::DuplicateEvent(event.id()));
        }
        if event.index.0 != expected {
            return Err(GraphError::IndexGap {
                process: event.process,
                expected,
                got: event.index.0,
            });
        }
        event.validate()?;
        timeline.push(event);
        Ok(())
    }

    fn lookup(&self, id: EventId) -> Option<&Event> {
        lookup(&self.timelines, id)
    }

    pub fn add_relation(&mut self, relation: Relation) -> Result<(), GraphError> {
        if self.is_frozen() {
            return Err(GraphError::Frozen);
        }
        if self.relations.contains(&relation) {
            return Ok(());
        }
        check_relation(&self.timelines, &relation)?;
        for r in &self.relations {
            if r.send == relation.send {
                return Err(GraphError::EndpointReused(relation.send));
            }
            if r.recv == relation.recv {
                return Err(GraphError::EndpointReused(relation.recv));
            }
        }
        debug_assert!(self.lookup(relation.send).is_some());
        self.relations.push(relation);
        Ok(())
    }

    /// Validates the whole graph and makes it immutable. Calling it again
    /// returns the same graph.
    pub fn freeze(&mut self) -> Result<EventGraph, GraphError> {
        if let Some(g) = &self.frozen {
            return Ok(g.clone());
        }
        let graph = build_graph(
            self.process_count,
            self.timelines.clone(),
            self.relations.clone(),
        )?;
        self.frozen = Some(graph.clone());
        Ok(graph)
    }

    /// Consuming variant of [`freeze`](Self::freeze).
    pub fn build(self) -> Result<EventGraph, GraphError> {
        match self.frozen {
            Some(g) => Ok(g),
            None => build_graph(self.process_count, self.timelines, self.relations),
        }
    }
}

fn lookup(timelines: &[Vec<Event>], id: EventId) -> Option<&Event> {
    let timeline = timelines.get(id.process.0 as usize)?;
    let pos = id.index.0.checked_sub(1)?;
    timeline.get(usize::try_from(pos).ok()?)
}

fn check_relation(timelines: &[Vec<Event>], r: &Relation) -> Result<(), GraphError> {
    if r.send.process == r.recv.process {
        return Err(GraphError::SelfProcess(r.send.process));
    }
    let send = lookup(timelines, r.send).ok_or(GraphError::UnknownEndpoint(r.send))?;
    let recv = lookup(timelines, r.recv).ok_or(GraphError::UnknownEndpoint(r.recv))?;
    if send.kind != EventKind::SEND || recv.kind != EventKind::RECEIVE {
        return Err(GraphError::KindMismatch {
            send: r.send,
            recv: r.recv,
        });
    }
    Ok(())
}

fn build_graph(
    process_count: u32,
    timelines: Vec<Vec<Event>>,
    relations: Vec<Relation>,
) -> Result<EventGraph, GraphError> {
    let mut violations = Vec::new();
    for (p, timeline) in timelines.iter().enumerate() {
        for (pos, e) in timeline.iter().enumerate() {
            let expected = pos as u64 + 1;
            if e.process.0 as usize != p {
                violations.push(GraphError::UnknownProcess(e.process));
            } else if e.index.0 != expected {
                violations.push(GraphError::IndexGap {
                    process: e.process,
                    expected,
                    got: e.index.0,
                });
                break;
            }
            if let Err(err) = e.validate() {
                violations.push(err);
            }
        }
    }
    let mut send_to_recv = HashMap::with_capacity(relations.len());
    let mut recv_to_send = HashMap::with_capacity(relations.len());
    let mut unique = Vec::with_capacity(relations.len());
    for r in relations {
        if unique.contains(&r) {
            continue;
        }
        if let Err(err) = check_relation(&timelines, &r) {
            violations.push(err);
            continue;
        }
        if send_to_recv.insert(r.send, r.recv).is_some() {
            violations.push(GraphError::EndpointReused(r.send));
            continue;
        }
        if recv_to_send.insert(r.recv, r.send).is_some() {
            violations.push(GraphError::EndpointReused(r.recv));
            continue;
        }
        unique.push(r);
    }
    if !violations.is_empty() {
        return Err(GraphError::ValidationFailed(violations));
    }
    Ok(EventGraph {
        process_count,
        timelines,
        relations: unique,
        send_to_recv,
        recv_to_send,
        clocks: None,
    })
}

/// Fidge vector clock; one counter per process.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VectorClock(pub Vec<u64>);

impl VectorClock {
    pub fn zero(width: usize) -> Self {
        VectorClock(vec![0; width])
    }

    pub fn merge(&mut self, other: &VectorClock) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }
}

/// Componentwise partial order: `a < b` iff every counter of `a` is <= the
/// matching counter of `b` and the clocks differ.
impl PartialOrd for VectorClock {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        if self.0.len() != other.0.len() {
            return None;
        }
        let mut less = false;
        let mut greater = false;
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.cmp(b) {
                Ordering::Less => less = true,
                Ordering::Greater => greater = true,
                Ordering::Equal => {}
            }
        }
        match (less, greater) {
            (false, false) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (true, true) => None,
        }
    }
}

/// A validated, immutable event graph.
#[derive(Debug, Clone)]
pub struct EventGraph {
    process_count: u32,
    timelines: Vec<Vec<Event>>,
    relations: Vec<Relation>,
    send_to_recv: HashMap<EventId, EventId>,
    recv_to_send: HashMap<EventId, EventId>,
    clocks: Option<Vec<Vec<VectorClock>>>,
}

impl EventGraph {
    pub fn process_count(&self) -> u32 {
        self.process_count
    }

    pub fn timeline(&self, process: ProcessId) -> &[Event] {
        self.timelines
            .get(process.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn timelines(&self) -> &[Vec<Event>] {
        &self.timelines
    }

    /// All events, process by process in index order.
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.timelines.iter().flatten()
    }

    pub fn event_count(&self) -> usize {
        self.timelines.iter().map(Vec::len).sum()
    }

    /// Relations in insertion order.
    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    /// Relations sorted by send coordinate.
    pub fn sorted_relations(&self) -> Vec<Relation> {
        let mut rs = self.relations.clone();
        rs.sort();
        rs
    }

    pub fn event(&self, id: EventId) -> Option<&Event> {
        lookup(&self.timelines, id)
    }

    pub fn matched_receive(&self, send: EventId) -> Option<EventId> {
        self.send_to_recv.get(&send).copied()
    }

    pub fn matched_send(&self, recv: EventId) -> Option<EventId> {
        self.recv_to_send.get(&recv).copied()
    }

    pub fn has_relation(&self, send: EventId, recv: EventId) -> bool {
        self.send_to_recv.get(&send) == Some(&recv)
    }

    /// Send and receive events that take part in no relation, in coordinate
    /// order.
    pub fn unmatched(&self) -> (Vec<EventId>, Vec<EventId>) {
        let mut sends = Vec::new();
        let mut recvs = Vec::new();
        for e in self.events() {
            let id = e.id();
            if e.kind == EventKind::SEND && !self.send_to_recv.contains_key(&id) {
                sends.push(id);
            } else if e.kind == EventKind::RECEIVE && !self.recv_to_send.contains_key(&id) {
                recvs.push(id);
            }
        }
        (sends, recvs)
    }

    pub fn has_clocks(&self) -> bool {
        self.clocks.is_some()
    }

    /// Computes a vector clock for every event: the clock of `e_p^i` is the
    /// elementwise max of its predecessor on `p` and, for a matched receive,
    /// the clock of its send, with component `p` then incremented.
    pub fn with_vector_clocks(mut self) -> Result<Self, GraphError> {
        let width = self.process_count as usize;
        let mut clocks: Vec<Vec<VectorClock>> = self
            .timelines
            .iter()
            .map(|t| Vec::with_capacity(t.len()))
            .collect();
        let total = self.event_count();
        let mut done = 0usize;
        let mut ready: VecDeque<usize> = (0..width).collect();
        // processes blocked on a receive whose send is not yet clocked, keyed by that send
        let mut waiting: HashMap<EventId, usize> = HashMap::new();

        while let Some(p) = ready.pop_front() {
            loop {
                let pos = clocks[p].len();
                let Some(event) = self.timelines[p].get(pos) else {
                    break;
                };
                let mut clock = match clocks[p].last() {
                    Some(c) => c.clone(),
                    None => VectorClock::zero(width),
                };
                if let Some(send) = self.recv_to_send.get(&event.id()) {
                    let sp = send.process.0 as usize;
                    match clocks[sp].get(send.index.0 as usize - 1) {
                        Some(sc) => clock.merge(sc),
                        None => {
                            waiting.insert(*send, p);
                            break;
                        }
                    }
                }
                clock.0[p] += 1;
                clocks[p].push(clock);
                done += 1;
                if let Some(q) = waiting.remove(&event.id()) {
                    ready.push_back(q);
                }
            }
        }
        if done != total {
            return Err(GraphError::CausalCycle);
        }
        self.clocks = Some(clocks);
        Ok(self)
    }

    pub fn clock(&self, id: EventId) -> Result<&VectorClock, GraphError> {
        let clocks = self.clocks.as_ref().ok_or(GraphError::ClocksMissing)?;
        if self.event(id).is_none() {
            return Err(GraphError::UnknownEvent(id));
        }
        Ok(&clocks[id.process.0 as usize][id.index.0 as usize - 1])
    }

    /// `a -> b` under the transitive, irreflexive closure of sequential and
    /// message order.
    pub fn happened_before(&self, a: EventId, b: EventId) -> Result<bool, GraphError> {
        let ca = self.clock(a)?;
        let cb = self.clock(b)?;
        Ok(a != b && ca < cb)
    }

    pub fn concurrent(&self, a: EventId, b: EventId) -> Result<bool, GraphError> {
        let ca = self.clock(a)?;
        let cb = self.clock(b)?;
        Ok(a != b && ca.partial_cmp(cb).is_none())
    }
}
