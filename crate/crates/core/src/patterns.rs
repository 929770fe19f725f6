//! Event-graph pattern templates, occurrence matching, and loop detection.
//!
//! A template places events on placeholder processes at offsets relative to
//! a per-process base index and links them with sequential (`S`) and message
//! (`C`) edges. Message edges must be realized by actual relations in the
//! graph. Occurrences that cover the same set of events (for instance the
//! two bindings `p,q` and `q,p` of the symmetric simple exchange) are
//! reported once, under the lexicographically smallest binding.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::failures::Anomaly;
use crate::model::{EventGraph, EventId, EventKind, ProcessId};

pub const SIMPLE_EXCHANGE: &str = "simple-exchange";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeOrder {
    S,
    C,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateEvent {
    pub placeholder: u32,
    pub offset: u64,
    pub kind: EventKind,
}

/// Edge between two template events, referenced by position in `events`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateEdge {
    pub from: usize,
    pub to: usize,
    pub order: EdgeOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternTemplate {
    pub name: String,
    pub placeholders: u32,
    pub events: Vec<TemplateEvent>,
    pub relations: Vec<TemplateEdge>,
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("template `{name}` is invalid: {reason}")]
    TemplateInvalid { name: String, reason: String },
    #[error("cannot read pattern database: {0}")]
    Io(#[from] std::io::Error),
    #[error("template file {file}: {source}")]
    Parse {
        file: String,
        source: serde_json::Error,
    },
}

/// The simple exchange: `p` and `q` each send to the other and then receive
/// the other's message.
pub fn builtin_simple_exchange() -> PatternTemplate {
    let ev = |placeholder, offset, kind| TemplateEvent {
        placeholder,
        offset,
        kind,
    };
    let edge = |from, to, order| TemplateEdge { from, to, order };
    PatternTemplate {
        name: SIMPLE_EXCHANGE.to_owned(),
        placeholders: 2,
        events: vec![
            ev(0, 0, EventKind::SEND),
            ev(0, 1, EventKind::RECEIVE),
            ev(1, 0, EventKind::SEND),
            ev(1, 1, EventKind::RECEIVE),
        ],
        relations: vec![
            edge(0, 1, EdgeOrder::S),
            edge(2, 3, EdgeOrder::S),
            edge(0, 3, EdgeOrder::C),
            edge(2, 1, EdgeOrder::C),
        ],
    }
}

impl PatternTemplate {
    pub fn validate(&self) -> Result<(), PatternError> {
        let invalid = |reason: String| {
            Err(PatternError::TemplateInvalid {
                name: self.name.clone(),
                reason,
            })
        };
        if self.placeholders == 0 {
            return invalid("needs at least one placeholder".into());
        }
        if self.events.is_empty() {
            return invalid("has no events".into());
        }
        let mut slots = HashSet::new();
        for e in &self.events {
            if e.placeholder >= self.placeholders {
                return invalid(format!("event on undeclared placeholder {}", e.placeholder));
            }
            if !slots.insert((e.placeholder, e.offset)) {
                return invalid(format!(
                    "two events at placeholder {} offset {}",
                    e.placeholder, e.offset
                ));
            }
        }
        for p in 0..self.placeholders {
            if !self.events.iter().any(|e| e.placeholder == p) {
                return invalid(format!("placeholder {p} has no events"));
            }
        }
        for r in &self.relations {
            let (Some(a), Some(b)) = (self.events.get(r.from), self.events.get(r.to)) else {
                return invalid(format!("edge {}->{} references an undeclared event", r.from, r.to));
            };
            match r.order {
                EdgeOrder::S => {
                    if a.placeholder != b.placeholder || a.offset >= b.offset {
                        return invalid(format!(
                            "S edge {}->{} must go forward on one placeholder",
                            r.from, r.to
                        ));
                    }
                }
                EdgeOrder::C => {
                    if a.placeholder == b.placeholder {
                        return invalid(format!("C edge {}->{} must cross placeholders", r.from, r.to));
                    }
                    if a.kind != EventKind::SEND || b.kind != EventKind::RECEIVE {
                        return invalid(format!("C edge {}->{} must link a send to a receive", r.from, r.to));
                    }
                }
            }
        }
        Ok(())
    }

    fn c_edges(&self) -> impl Iterator<Item = (&TemplateEvent, &TemplateEvent)> {
        self.relations
            .iter()
            .filter(|r| r.order == EdgeOrder::C)
            .map(|r| (&self.events[r.from], &self.events[r.to]))
    }

    fn max_offset(&self, placeholder: u32) -> u64 {
        self.events
            .iter()
            .filter(|e| e.placeholder == placeholder)
            .map(|e| e.offset)
            .max()
            .unwrap_or(0)
    }
}

/// Loads every `*.json` template in `dir`, in file-name order.
pub fn load_pattern_database(dir: &Path) -> Result<Vec<PatternTemplate>, PatternError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let t: PatternTemplate = serde_json::from_str(&text).map_err(|source| PatternError::Parse {
            file: path.display().to_string(),
            source,
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternOccurrence {
    pub template: String,
    /// Process bound to each placeholder.
    pub binding: Vec<ProcessId>,
    /// Base index on each bound process.
    pub base: Vec<u64>,
}

impl PatternOccurrence {
    pub fn events(&self, template: &PatternTemplate) -> Vec<EventId> {
        let mut ids: Vec<EventId> = template
            .events
            .iter()
            .map(|e| {
                let h = e.placeholder as usize;
                EventId::new(self.binding[h].0, self.base[h] + e.offset)
            })
            .collect();
        ids.sort();
        ids
    }
}

struct Matcher<'a> {
    graph: &'a EventGraph,
    template: &'a PatternTemplate,
    /// ordered process pairs that share at least one relation
    linked: HashSet<(u32, u32)>,
    seen: HashSet<Vec<EventId>>,
    out: Vec<PatternOccurrence>,
}

impl Matcher<'_> {
    fn bind(&mut self, binding: &mut Vec<u32>) {
        let k = self.template.placeholders as usize;
        if binding.len() == k {
            let mut base = vec![0u64; k];
            self.assign_bases(binding, &mut base);
            return;
        }
        let h = binding.len() as u32;
        for proc in 0..self.graph.process_count() {
            if binding.contains(&proc) {
                continue;
            }
            let ok = self.template.c_edges().all(|(a, b)| {
                let pa = if a.placeholder == h { Some(proc) } else { binding.get(a.placeholder as usize).copied() };
                let pb = if b.placeholder == h { Some(proc) } else { binding.get(b.placeholder as usize).copied() };
                match (pa, pb) {
                    (Some(x), Some(y)) => self.linked.contains(&(x, y)),
                    _ => true,
                }
            });
            if ok {
                binding.push(proc);
                self.bind(binding);
                binding.pop();
            }
        }
    }

    /// Bases are 1-based; 0 marks an unassigned placeholder.
    fn assign_bases(&mut self, binding: &[u32], base: &mut Vec<u64>) {
        let Some(h) = base.iter().position(|&b| b == 0) else {
            self.check(binding, base);
            return;
        };
        let len = self.graph.timeline(ProcessId(binding[h])).len() as u64;
        let span = self.template.max_offset(h as u32);
        if len <= span {
            return;
        }
        for b in 1..=len - span {
            let mut trial = base.clone();
            trial[h] = b;
            if self.propagate(binding, &mut trial) {
                self.assign_bases(binding, &mut trial);
            }
        }
    }

    /// Derives further bases through message edges; false on a contradiction
    /// or a missing relation.
    fn propagate(&self, binding: &[u32], base: &mut [u64]) -> bool {
        let mut changed = true;
        while changed {
            changed = false;
            for (a, b) in self.template.c_edges() {
                let (ha, hb) = (a.placeholder as usize, b.placeholder as usize);
                if base[ha] != 0 {
                    let send = EventId::new(binding[ha], base[ha] + a.offset);
                    let Some(recv) = self.graph.matched_receive(send) else {
                        return false;
                    };
                    if recv.process.0 != binding[hb] || recv.index.0 < b.offset + 1 {
                        return false;
                    }
                    let derived = recv.index.0 - b.offset;
                    if base[hb] == 0 {
                        base[hb] = derived;
                        changed = true;
                    } else if base[hb] != derived {
                        return false;
                    }
                } else if base[hb] != 0 {
                    let recv = EventId::new(binding[hb], base[hb] + b.offset);
                    let Some(send) = self.graph.matched_send(recv) else {
                        return false;
                    };
                    if send.process.0 != binding[ha] || send.index.0 < a.offset + 1 {
                        return false;
                    }
                    base[ha] = send.index.0 - a.offset;
                    changed = true;
                }
            }
        }
        true
    }

    fn check(&mut self, binding: &[u32], base: &[u64]) {
        let at = |e: &TemplateEvent| {
            let h = e.placeholder as usize;
            EventId::new(binding[h], base[h] + e.offset)
        };
        for e in &self.template.events {
            match self.graph.event(at(e)) {
                Some(ev) if ev.kind == e.kind => {}
                _ => return,
            }
        }
        for (a, b) in self.template.c_edges() {
            if !self.graph.has_relation(at(a), at(b)) {
                return;
            }
        }
        let occurrence = PatternOccurrence {
            template: self.template.name.clone(),
            binding: binding.iter().map(|&p| ProcessId(p)).collect(),
            base: base.to_vec(),
        };
        if self.seen.insert(occurrence.events(self.template)) {
            self.out.push(occurrence);
        }
    }
}

/// All occurrences of `template`, ordered by binding and then base index.
pub fn match_template(graph: &EventGraph, template: &PatternTemplate) -> Result<Vec<PatternOccurrence>, PatternError> {
    template.validate()?;
    let linked = graph
        .relations()
        .iter()
        .map(|r| (r.send.process.0, r.recv.process.0))
        .collect();
    let mut m = Matcher {
        graph,
        template,
        linked,
        seen: HashSet::new(),
        out: Vec::new(),
    };
    m.bind(&mut Vec::with_capacity(template.placeholders as usize));
    let mut out = m.out;
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IrregularityReason {
    Missing,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Irregularity {
    /// Expected base index on each bound process.
    pub expected: Vec<u64>,
    pub reason: IrregularityReason,
    /// Position of the linked anomaly in the report's anomaly list.
    pub anomaly: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternRun {
    pub template: String,
    pub binding: Vec<ProcessId>,
    /// Base indices of each occurrence, ascending.
    pub occurrences: Vec<Vec<u64>>,
    pub stride: u64,
    pub irregularities: Vec<Irregularity>,
}

impl PatternRun {
    /// Iterations the run spans, present or not.
    pub fn span(&self) -> usize {
        self.occurrences.len() + self.irregularities.len()
    }
}

/// Most frequent value, ties going to the smaller one.
fn modal(values: &[u64]) -> Option<u64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(v, _)| v)
}

/// Groups occurrences by template and binding and finds repeated runs.
///
/// Within a group the stride is the modal step between consecutive base
/// indices of the first placeholder. A run extends across gaps that are a
/// whole multiple of the stride, recording each skipped iteration as a
/// missing irregularity; any other step ends it. Runs need two occurrences.
pub fn detect_runs(occurrences: &[PatternOccurrence]) -> Vec<PatternRun> {
    let mut groups: BTreeMap<(&str, &[ProcessId]), Vec<&[u64]>> = BTreeMap::new();
    for o in occurrences {
        groups
            .entry((o.template.as_str(), o.binding.as_slice()))
            .or_default()
            .push(o.base.as_slice());
    }
    let mut runs = Vec::new();
    for ((template, binding), mut bases) in groups {
        bases.sort();
        bases.dedup_by_key(|b| b[0]);
        let steps: Vec<u64> = bases.windows(2).map(|w| w[1][0] - w[0][0]).collect();
        let Some(stride) = modal(&steps) else {
            continue;
        };
        let mut current: Option<PatternRun> = None;
        for base in bases {
            let extend = match &current {
                Some(run) => {
                    let last = run.occurrences.last().unwrap();
                    let step = base[0] - last[0];
                    step % stride == 0
                }
                None => false,
            };
            if extend {
                let run = current.as_mut().unwrap();
                let last = run.occurrences.last().unwrap().clone();
                let skipped = (base[0] - last[0]) / stride - 1;
                for m in 1..=skipped {
                    run.irregularities.push(Irregularity {
                        expected: last.iter().map(|b| b + m * stride).collect(),
                        reason: IrregularityReason::Missing,
                        anomaly: None,
                    });
                }
                run.occurrences.push(base.to_vec());
            } else {
                runs.extend(current.take().filter(|r| r.occurrences.len() >= 2));
                current = Some(PatternRun {
                    template: template.to_owned(),
                    binding: binding.to_vec(),
                    occurrences: vec![base.to_vec()],
                    stride,
                    irregularities: Vec::new(),
                });
            }
        }
        runs.extend(current.filter(|r| r.occurrences.len() >= 2));
    }
    runs
}

/// Reclassifies missing iterations that contain a failure anomaly as
/// perturbed and links them to the first such anomaly.
pub fn find_irregularities(mut runs: Vec<PatternRun>, anomalies: &[Anomaly]) -> Vec<PatternRun> {
    for run in &mut runs {
        for irr in &mut run.irregularities {
            let within = |e: &EventId| {
                run.binding.iter().zip(&irr.expected).any(|(p, &start)| {
                    e.process == *p && e.index.0 >= start && e.index.0 < start + run.stride
                })
            };
            if let Some(pos) = anomalies.iter().position(|a| a.events.iter().any(within)) {
                irr.reason = IrregularityReason::Perturbed;
                irr.anomaly = Some(pos);
            }
        }
    }
    runs
}
