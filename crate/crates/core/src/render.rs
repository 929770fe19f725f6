//! Space-time diagram layout, SVG output with anomaly highlighting and run
//! collapsing, and the JSON view document.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::failures::{Anomaly, AnomalyKind};
use crate::model::{Attrs, EventGraph, EventId, EventKind, Relation};
use crate::patterns::PatternRun;

pub const LANE_TOP: f64 = 40.0;
pub const LANE_GAP: f64 = 60.0;
pub const LEFT: f64 = 80.0;
pub const STEP: f64 = 40.0;
const RIGHT_PAD: f64 = 40.0;
const EVENT_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeAxis {
    /// `x` is affine in the `ts` attribute.
    Timestamp,
    /// `x` is affine in the longest-path depth over sequential and message edges.
    LogicalRank,
    /// `x` is affine in the per-process index; used when the edges form a cycle.
    Index,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub lane_y: Vec<f64>,
    /// `event_x[p][i - 1]`.
    pub event_x: Vec<Vec<f64>>,
    pub axis: TimeAxis,
    pub width: f64,
    pub height: f64,
}

impl Layout {
    pub fn x(&self, id: EventId) -> f64 {
        self.event_x[id.process.0 as usize][id.index.0 as usize - 1]
    }

    pub fn y(&self, id: EventId) -> f64 {
        self.lane_y[id.process.0 as usize]
    }
}

fn timestamps(graph: &EventGraph) -> Option<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graph.process_count() as usize);
    for timeline in graph.timelines() {
        let ts: Vec<f64> = timeline
            .iter()
            .map(|e| e.attrs.get("ts").and_then(|v| v.as_f64()).filter(|t| t.is_finite()))
            .collect::<Option<_>>()?;
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        out.push(ts);
    }
    Some(out)
}

/// Longest-path depth of every event, or `None` if the edges form a cycle.
fn logical_ranks(graph: &EventGraph) -> Option<Vec<Vec<u64>>> {
    let timelines = graph.timelines();
    let mut rank: Vec<Vec<u64>> = timelines.iter().map(|t| Vec::with_capacity(t.len())).collect();
    let mut remaining = graph.event_count();
    while remaining > 0 {
        let mut progressed = false;
        for (p, timeline) in timelines.iter().enumerate() {
            while let Some(e) = timeline.get(rank[p].len()) {
                let mut r = rank[p].last().map_or(0, |r| r + 1);
                if let Some(send) = graph.matched_send(e.id()) {
                    let sp = send.process.0 as usize;
                    match rank[sp].get(send.index.0 as usize - 1) {
                        Some(&sr) => r = r.max(sr + 1),
                        None => break,
                    }
                }
                rank[p].push(r);
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return None;
        }
    }
    Some(rank)
}

pub fn layout(graph: &EventGraph) -> Layout {
    let lane_y: Vec<f64> = (0..graph.process_count()).map(|p| LANE_TOP + LANE_GAP * p as f64).collect();
    let height = LANE_TOP * 2.0 + LANE_GAP * graph.process_count().saturating_sub(1) as f64;
    let (axis, coords): (TimeAxis, Vec<Vec<f64>>) = match timestamps(graph) {
        Some(ts) if graph.event_count() > 0 => (TimeAxis::Timestamp, ts),
        _ => match logical_ranks(graph) {
            Some(r) => (TimeAxis::LogicalRank, r.into_iter().map(|t| t.into_iter().map(|v| v as f64).collect()).collect()),
            None => (
                TimeAxis::Index,
                graph.timelines().iter().map(|t| (0..t.len()).map(|i| i as f64).collect()).collect(),
            ),
        },
    };
    let all = coords.iter().flatten().copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let scale = match axis {
        TimeAxis::Timestamp if hi > lo => {
            let distinct: BTreeSet<u64> = coords.iter().flatten().map(|v| v.to_bits()).collect();
            STEP * (distinct.len() - 1) as f64 / (hi - lo)
        }
        _ => STEP,
    };
    let event_x: Vec<Vec<f64>> = coords
        .iter()
        .map(|t| t.iter().map(|v| LEFT + (v - lo) * scale).collect())
        .collect();
    let right = event_x.iter().flatten().copied().fold(LEFT, f64::max);
    Layout {
        lane_y,
        event_x,
        axis,
        width: right + RIGHT_PAD,
        height,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub collapse: bool,
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn num(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == r.trunc() {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn coord(id: EventId) -> String {
    format!("{}:{}", id.process.0, id.index.0)
}

fn kind_class(kind: EventKind) -> String {
    match kind.name() {
        Some(n) => n.to_owned(),
        None => format!("user-{}", kind.code()),
    }
}

/// Events of one run iteration: `[base, base + stride)` on each bound process.
fn iteration_events<'a>(run: &'a PatternRun, base: &'a [u64]) -> impl Iterator<Item = EventId> + 'a {
    let stride = run.stride;
    run.binding
        .iter()
        .zip(base)
        .flat_map(move |(p, &b)| (b..b + stride).map(move |i| EventId::new(p.0, i)))
}

const STYLE: &str = ".lane{stroke:#888;stroke-width:1}\
.lane-label{font:12px sans-serif;fill:#333}\
.arrow{stroke:#000;stroke-width:1.2;fill:none}\
.arrow.length-mismatch{stroke:#d00;stroke-width:2}\
.event{fill:#fff;stroke:#000}\
.event.isolated-send{fill:#f80;stroke:#f80}\
.event.isolated-receive{fill:#80c;stroke:#80c}\
.collapse-block rect{fill:#cde;stroke:#468}\
.collapse-block text{font:11px sans-serif;fill:#234}";

/// Renders the diagram. Without collapsing, the element counts are exact:
/// one `lane` per process, one `arrow` per relation, one `event` per event.
/// With collapsing, each run's present occurrences after the first are
/// hidden behind a single `collapse-block`; events named by an anomaly stay
/// visible, as does any arrow with a visible endpoint.
pub fn emit_svg(
    graph: &EventGraph,
    layout: &Layout,
    anomalies: &[Anomaly],
    runs: &[PatternRun],
    options: RenderOptions,
) -> String {
    let mut mismatched: HashSet<Relation> = HashSet::new();
    let mut event_class: HashMap<EventId, &'static str> = HashMap::new();
    for a in anomalies {
        match a.kind {
            AnomalyKind::LengthMismatch => {
                if let [s, r] = a.events[..] {
                    mismatched.insert(Relation { send: s, recv: r });
                }
            }
            AnomalyKind::IsolatedSend | AnomalyKind::IsolatedReceive => {
                for e in &a.events {
                    event_class.insert(*e, a.kind.css_class());
                }
            }
        }
    }
    let pinned: HashSet<EventId> = anomalies.iter().flat_map(|a| a.events.iter().copied()).collect();

    let mut hidden: HashSet<EventId> = HashSet::new();
    let mut blocks = String::new();
    if options.collapse {
        for run in runs {
            if run.occurrences.len() < 2 {
                continue;
            }
            let collapsed = &run.occurrences[1..];
            hidden.extend(
                collapsed
                    .iter()
                    .flat_map(|b| iteration_events(run, b))
                    .filter(|e| !pinned.contains(e)),
            );
            write_block(&mut blocks, graph, layout, run, collapsed);
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = num(layout.width),
        h = num(layout.height)
    );
    let _ = writeln!(out, "<style>{STYLE}</style>");
    let _ = writeln!(
        out,
        "<defs><marker id=\"head\" viewBox=\"0 0 8 8\" refX=\"8\" refY=\"4\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L8,4 L0,8 z\"/></marker></defs>"
    );

    let _ = writeln!(out, "<g class=\"lanes\">");
    for (p, y) in layout.lane_y.iter().enumerate() {
        let _ = writeln!(
            out,
            "<line class=\"lane\" data-process=\"{p}\" x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\"/>",
            num(LEFT - 20.0),
            num(layout.width - RIGHT_PAD / 2.0),
            y = num(*y)
        );
        let _ = writeln!(
            out,
            "<text class=\"lane-label\" x=\"8\" y=\"{}\">P{p}</text>",
            num(y + 4.0)
        );
    }
    let _ = writeln!(out, "</g>");

    out.push_str(&blocks);

    let _ = writeln!(out, "<g class=\"arrows\">");
    for r in graph.sorted_relations() {
        if hidden.contains(&r.send) && hidden.contains(&r.recv) {
            continue;
        }
        let class = if mismatched.contains(&r) { "arrow length-mismatch" } else { "arrow" };
        let _ = writeln!(
            out,
            "<line class=\"{class}\" data-send=\"{}\" data-recv=\"{}\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" marker-end=\"url(#head)\"/>",
            coord(r.send),
            coord(r.recv),
            num(layout.x(r.send)),
            num(layout.y(r.send)),
            num(layout.x(r.recv)),
            num(layout.y(r.recv))
        );
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, "<g class=\"events\">");
    for e in graph.events() {
        let id = e.id();
        if hidden.contains(&id) {
            continue;
        }
        let mut class = format!("event {}", kind_class(e.kind));
        if let Some(extra) = event_class.get(&id) {
            class.push(' ');
            class.push_str(extra);
        }
        let _ = writeln!(
            out,
            "<circle class=\"{class}\" data-event=\"{}\" cx=\"{}\" cy=\"{}\" r=\"{}\"/>",
            coord(id),
            num(layout.x(id)),
            num(layout.y(id)),
            num(EVENT_RADIUS)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, "</svg>");
    out
}

/// One block per run, with one rectangle per contiguous stretch of
/// collapsed iterations so that irregular iterations stay uncovered.
fn write_block(out: &mut String, graph: &EventGraph, layout: &Layout, run: &PatternRun, collapsed: &[Vec<u64>]) {
    let mut stretches: Vec<Vec<&Vec<u64>>> = Vec::new();
    for base in collapsed {
        let adjacent = stretches
            .last()
            .and_then(|s| s.last())
            .is_some_and(|prev| base[0] == prev[0] + run.stride);
        if adjacent {
            stretches.last_mut().unwrap().push(base);
        } else {
            stretches.push(vec![base]);
        }
    }
    let lanes: Vec<f64> = run.binding.iter().map(|p| layout.lane_y[p.0 as usize]).collect();
    let top = lanes.iter().copied().fold(f64::INFINITY, f64::min) - 12.0;
    let bottom = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0;
    let binding: Vec<String> = run.binding.iter().map(|p| p.0.to_string()).collect();
    let _ = writeln!(
        out,
        "<g class=\"collapse-block\" data-template=\"{}\" data-binding=\"{}\" data-iterations=\"{}\">",
        escape(&run.template),
        binding.join(","),
        collapsed.len()
    );
    for stretch in stretches {
        let xs: Vec<f64> = stretch
            .iter()
            .flat_map(|b| iteration_events(run, b))
            .filter(|e| graph.event(*e).is_some())
            .map(|e| layout.x(e))
            .collect();
        let left = xs.iter().copied().fold(f64::INFINITY, f64::min) - 8.0;
        let right = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 8.0;
        if !left.is_finite() || !right.is_finite() {
            continue;
        }
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" rx=\"4\"/>",
            num(left),
            num(top),
            num(right - left),
            num(bottom - top)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\">{} \u{d7}{}</text>",
            num(left + 4.0),
            num(top - 3.0),
            escape(&run.template),
            stretch.len()
        );
    }
    let _ = writeln!(out, "</g>");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEvent {
    pub p: u32,
    pub i: u64,
    pub kind: EventKind,
    pub attrs: Attrs,
}

/// The document served to viewers: the graph plus analysis results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewDocument {
    pub processes: u32,
    pub events: Vec<ViewEvent>,
    pub relations: Vec<Relation>,
    pub anomalies: Vec<Anomaly>,
    pub runs: Vec<PatternRun>,
}

impl ViewDocument {
    pub fn new(graph: &EventGraph, anomalies: &[Anomaly], runs: &[PatternRun]) -> Self {
        ViewDocument {
            processes: graph.process_count(),
            events: graph
                .events()
                .map(|e| ViewEvent {
                    p: e.process.0,
                    i: e.index.0,
                    kind: e.kind,
                    attrs: e.attrs.clone(),
                })
                .collect(),
            relations: graph.sorted_relations(),
            anomalies: anomalies.to_vec(),
            runs: runs.to_vec(),
        }
    }
}

/// Compact JSON; events in process then index order, relations sorted.
pub fn emit_json(graph: &EventGraph, anomalies: &[Anomaly], runs: &[PatternRun]) -> String {
    serde_json::to_string(&ViewDocument::new(graph, anomalies, runs)).expect("view serializes")
}
