//! Line-oriented JSON traces and FIFO send/receive matching.
//!
//! A trace starts with a header line `{"dewiz_trace":1,"processes":N}`
//! followed by one event object per line. Blank lines are ignored.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::model::{AttrValue, Attrs, Event, EventId, EventKind, ProcessId, Relation, SeqIndex};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub process_count: u32,
    pub format_version: u32,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad trace header: {0}")]
    BadHeader(String),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: unknown event kind `{kind}`")]
    UnknownKind { line: usize, kind: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceError {
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::MalformedRecord { line, .. } | TraceError::UnknownKind { line, .. } => Some(*line),
            TraceError::BadHeader(_) => Some(1),
            TraceError::Io(_) => None,
        }
    }
}

fn parse_header(line: &str) -> Result<TraceHeader, TraceError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| TraceError::BadHeader(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| TraceError::BadHeader("header is not an object".into()))?;
    if obj.len() != 2 {
        return Err(TraceError::BadHeader(
            "header must hold exactly `dewiz_trace` and `processes`".into(),
        ));
    }
    match obj.get("dewiz_trace").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(TraceError::BadHeader(format!("unsupported format version {v}"))),
        None => return Err(TraceError::BadHeader("missing `dewiz_trace`".into())),
    }
    let processes = obj
        .get("processes")
        .and_then(Value::as_u64)
        .filter(|&n| n >= 1 && n <= u32::MAX as u64)
        .ok_or_else(|| TraceError::BadHeader("`processes` must be a positive 32-bit integer".into()))?;
    Ok(TraceHeader {
        process_count: processes as u32,
        format_version: FORMAT_VERSION as u32,
    })
}

fn attr_from_json(line: usize, key: &str, v: &Value) -> Result<AttrValue, TraceError> {
    let malformed = |reason: String| TraceError::MalformedRecord { line, reason };
    match v {
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                Ok(AttrValue::U64(u))
            } else if let Some(i) = n.as_i64() {
                Ok(AttrValue::I64(i))
            } else {
                n.as_f64()
                    .map(AttrValue::F64)
                    .ok_or_else(|| malformed(format!("attribute `{key}` is not representable")))
            }
        }
        Value::String(s) => Ok(AttrValue::Str(s.clone())),
        _ => Err(malformed(format!("attribute `{key}` must be a number or string"))),
    }
}

/// Parses one event record; `line` is the 1-based line number for errors.
pub fn parse_record(line: usize, text: &str) -> Result<Event, TraceError> {
    let malformed = |reason: String| TraceError::MalformedRecord { line, reason };
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not an object".into()))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "p" | "i" | "kind" | "kind_code" | "attrs") {
            return Err(malformed(format!("unexpected field `{key}`")));
        }
    }
    let p = obj
        .get("p")
        .and_then(Value::as_u64)
        .filter(|&p| p <= u32::MAX as u64)
        .ok_or_else(|| malformed("`p` must be a 32-bit unsigned integer".into()))?;
    let i = obj
        .get("i")
        .and_then(Value::as_u64)
        .filter(|&i| i >= 1)
        .ok_or_else(|| malformed("`i` must be a positive integer".into()))?;
    let kind = match (obj.get("kind"), obj.get("kind_code")) {
        (Some(Value::String(name)), None) => EventKind::from_name(name).ok_or_else(|| TraceError::UnknownKind {
            line,
            kind: name.clone(),
        })?,
        (None, Some(code)) => {
            let c = code
                .as_u64()
                .ok_or_else(|| malformed("`kind_code` must be an integer".into()))?;
            if c < EventKind::FIRST_USER_CODE as u64 || c > u16::MAX as u64 {
                return Err(TraceError::UnknownKind {
                    line,
                    kind: c.to_string(),
                });
            }
            EventKind::from_code(c as u16).map_err(|e| malformed(e.to_string()))?
        }
        (Some(_), None) => return Err(malformed("`kind` must be a string".into())),
        (Some(_), Some(_)) => return Err(malformed("give either `kind` or `kind_code`, not both".into())),
        (None, None) => return Err(malformed("missing `kind`".into())),
    };
    let mut attrs = Attrs::new();
    match obj.get("attrs") {
        None => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                attrs.insert(k.clone(), attr_from_json(line, k, v)?);
            }
        }
        Some(_) => return Err(malformed("`attrs` must be an object".into())),
    }
    Ok(Event {
        process: ProcessId(p as u32),
        index: SeqIndex(i),
        kind,
        attrs,
    })
}

/// Streaming trace reader: the header is parsed on construction, events are
/// yielded lazily in file order.
pub struct TraceReader<R: BufRead> {
    lines: io::Lines<R>,
    header: TraceHeader,
    line_no: usize,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(source: R) -> Result<Self, TraceError> {
        let mut lines = source.lines();
        let mut line_no = 0;
        let header = loop {
            match lines.next() {
                Some(line) => {
                    line_no += 1;
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break parse_header(&line)?;
                }
                None => return Err(TraceError::BadHeader("empty trace".into())),
            }
        };
        Ok(TraceReader {
            lines,
            header,
            line_no,
        })
    }

    pub fn header(&self) -> TraceHeader {
        self.header
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<Event, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_record(self.line_no, &line));
        }
    }
}

/// Reads a whole trace into memory.
pub fn read_trace<R: BufRead>(source: R) -> Result<(TraceHeader, Vec<Event>), TraceError> {
    let reader = TraceReader::new(source)?;
    let header = reader.header();
    let events = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, events))
}

pub fn read_trace_str(text: &str) -> Result<(TraceHeader, Vec<Event>), TraceError> {
    read_trace(text.as_bytes())
}

fn attr_to_json(v: &AttrValue) -> Value {
    match v {
        AttrValue::U64(u) => Value::Number((*u).into()),
        AttrValue::I64(i) => Value::Number((*i).into()),
        AttrValue::F64(f) => Number::from_f64(*f).map(Value::Number).unwrap_or(Value::Null),
        AttrValue::Str(s) => Value::String(s.clone()),
    }
}

/// One trace line for `event`, without the trailing newline.
pub fn format_record(event: &Event) -> String {
    let mut obj = Map::new();
    obj.insert("p".into(), event.process.0.into());
    obj.insert("i".into(), event.index.0.into());
    match event.kind.name() {
        Some(name) => obj.insert("kind".into(), name.into()),
        None => obj.insert("kind_code".into(), event.kind.code().into()),
    };
    let attrs: Map<String, Value> = event
        .attrs
        .iter()
        .map(|(k, v)| (k.clone(), attr_to_json(v)))
        .collect();
    obj.insert("attrs".into(), Value::Object(attrs));
    // serde_json's default map is ordered by key, so "attrs" < "i" < "kind" < "p"
    Value::Object(obj).to_string()
}

pub fn format_header(process_count: u32) -> String {
    format!("{{\"dewiz_trace\":{FORMAT_VERSION},\"processes\":{process_count}}}")
}

pub fn write_trace<'a, W, I>(mut out: W, process_count: u32, events: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Event>,
{
    writeln!(out, "{}", format_header(process_count))?;
    for e in events {
        writeln!(out, "{}", format_record(e))?;
    }
    Ok(())
}

/// FIFO matching key: `(sender, receiver, tag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelKey {
    pub src: u64,
    pub dst: u64,
    pub tag: u64,
}

impl ChannelKey {
    /// Key of a send or receive event; `None` for other kinds, for events
    /// lacking the addressing attribute, and for self-addressed messages.
    pub fn of(event: &Event) -> Option<ChannelKey> {
        let me = event.process.0 as u64;
        let key = match event.kind {
            EventKind::SEND => ChannelKey {
                src: me,
                dst: event.attr_u64("dst")?,
                tag: event.tag(),
            },
            EventKind::RECEIVE => ChannelKey {
                src: event.attr_u64("src")?,
                dst: me,
                tag: event.tag(),
            },
            _ => return None,
        };
        (key.src != key.dst).then_some(key)
    }
}

/// Send and receive events left without a counterpart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendingReport {
    pub sends: Vec<EventId>,
    pub receives: Vec<EventId>,
}

impl PendingReport {
    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.receives.is_empty()
    }
}

#[derive(Default)]
struct Queues {
    sends: VecDeque<EventId>,
    recvs: VecDeque<EventId>,
}

/// Incremental matcher. Each key pairs its k-th send with its k-th receive;
/// a relation is produced as soon as the later of the two is pushed.
#[derive(Default)]
pub struct Matcher {
    channels: HashMap<ChannelKey, Queues>,
    unkeyed_sends: Vec<EventId>,
    unkeyed_recvs: Vec<EventId>,
}

impl Matcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: &Event) -> Option<Relation> {
        let id = event.id();
        let Some(key) = ChannelKey::of(event) else {
            match event.kind {
                EventKind::SEND => self.unkeyed_sends.push(id),
                EventKind::RECEIVE => self.unkeyed_recvs.push(id),
                _ => {}
            }
            return None;
        };
        let q = self.channels.entry(key).or_default();
        if event.kind == EventKind::SEND {
            match q.recvs.pop_front() {
                Some(recv) => Some(Relation { send: id, recv }),
                None => {
                    q.sends.push_back(id);
                    None
                }
            }
        } else {
            match q.sends.pop_front() {
                Some(send) => Some(Relation { send, recv: id }),
                None => {
                    q.recvs.push_back(id);
                    None
                }
            }
        }
    }

    pub fn finish(self) -> PendingReport {
        let mut sends = self.unkeyed_sends;
        let mut receives = self.unkeyed_recvs;
        for q in self.channels.into_values() {
            sends.extend(q.sends);
            receives.extend(q.recvs);
        }
        sends.sort();
        receives.sort();
        PendingReport { sends, receives }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// Relations in the order they were completed.
    pub relations: Vec<Relation>,
    pub pending: PendingReport,
}

pub fn match_messages<'a, I>(events: I) -> MatchResult
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut matcher = Matcher::new();
    let relations = events.into_iter().filter_map(|e| matcher.push(e)).collect();
    MatchResult {
        relations,
        pending: matcher.finish(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "{\"dewiz_trace\":1,\"processes\":2}";

    #[test]
    fn reads_one_event() {
        let text = format!("{HEADER}\n{{\"p\":0,\"i\":1,\"kind\":\"send\",\"attrs\":{{\"dst\":1,\"len\":8}}}}\n");
        let (h, events) = read_trace_str(&text).unwrap();
        assert_eq!(h.process_count, 2);
        assert_eq!(events, vec![Event::send(0, 1, 1, 8)]);
    }

    #[test]
    fn missing_header() {
        let text = "{\"p\":0,\"i\":1,\"kind\":\"send\",\"attrs\":{\"dst\":1,\"len\":8}}\n";
        assert!(matches!(read_trace_str(text), Err(TraceError::BadHeader(_))));
        assert!(matches!(read_trace_str(""), Err(TraceError::BadHeader(_))));
    }

    #[test]
    fn unknown_kind_reports_line() {
        let text = format!("{HEADER}\n\n{{\"p\":0,\"i\":1,\"kind\":\"sendd\"}}\n");
        match read_trace_str(&text) {
            Err(TraceError::UnknownKind { line, kind }) => {
                assert_eq!(line, 3);
                assert_eq!(kind, "sendd");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{HEADER}\n{{\"p\":0,\"i\":1,\"kind_code\":12}}\n");
        assert!(matches!(read_trace_str(&text), Err(TraceError::UnknownKind { line: 2, .. })));
    }

    #[test]
    fn malformed_records() {
        for bad in [
            "{\"p\":0,\"kind\":\"send\"}",
            "{\"p\":-1,\"i\":1,\"kind\":\"send\"}",
            "{\"p\":0,\"i\":0,\"kind\":\"send\"}",
            "{\"p\":0,\"i\":1,\"kind\":\"send\",\"extra\":1}",
            "{\"p\":0,\"i\":1,\"kind\":\"send\",\"attrs\":{\"x\":[1]}}",
            "not json",
        ] {
            let text = format!("{HEADER}\n{bad}\n");
            assert!(
                matches!(read_trace_str(&text), Err(TraceError::MalformedRecord { line: 2, .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn user_kind_round_trip() {
        let e = Event::new(1, 4, EventKind::from_code(1234).unwrap())
            .with_attr("note", AttrValue::Str("hi".into()))
            .with_attr("delta", AttrValue::I64(-3))
            .with_attr("ts", AttrValue::F64(1.5));
        let line = format_record(&e);
        assert_eq!(parse_record(1, &line).unwrap(), e);
    }

    #[test]
    fn single_pair_matches() {
        let events = [
            Event::send(0, 1, 1, 8).with_attr("tag", AttrValue::U64(0)),
            Event::receive(1, 1, 0, 8).with_attr("tag", AttrValue::U64(0)),
        ];
        let m = match_messages(&events);
        assert_eq!(m.relations, vec![Relation::new(0, 1, 1, 1)]);
        assert!(m.pending.is_empty());
    }

    #[test]
    fn fifo_per_channel() {
        let events = [
            Event::send(0, 1, 1, 8),
            Event::send(0, 2, 1, 16),
            Event::receive(1, 1, 0, 8),
            Event::receive(1, 2, 0, 16),
        ];
        let m = match_messages(&events);
        assert_eq!(
            m.relations,
            vec![Relation::new(0, 1, 1, 1), Relation::new(0, 2, 1, 2)]
        );
    }

    #[test]
    fn receive_before_send_in_file_order() {
        let events = [Event::receive(1, 1, 0, 8), Event::send(0, 1, 1, 8)];
        let m = match_messages(&events);
        assert_eq!(m.relations, vec![Relation::new(0, 1, 1, 1)]);
    }

    #[test]
    fn wrong_destination_leaves_both_pending() {
        let events = [Event::send(0, 1, 2, 8), Event::receive(1, 1, 0, 8)];
        let m = match_messages(&events);
        assert!(m.relations.is_empty());
        assert_eq!(m.pending.sends, vec![EventId::new(0, 1)]);
        assert_eq!(m.pending.receives, vec![EventId::new(1, 1)]);
    }

    #[test]
    fn tags_separate_channels() {
        let events = [
            Event::send(0, 1, 1, 8).with_attr("tag", AttrValue::U64(5)),
            Event::receive(1, 1, 0, 8),
        ];
        let m = match_messages(&events);
        assert!(m.relations.is_empty());
        assert_eq!(m.pending.sends.len(), 1);
        assert_eq!(m.pending.receives.len(), 1);
    }
}
