//! Random graph generation and brute-force oracles shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use evgraph_core::model::{Event, EventGraph, EventId, EventKind, GraphBuilder, ProcessId, Relation};
use evgraph_core::patterns::{EdgeOrder, PatternOccurrence, PatternTemplate, TemplateEdge, TemplateEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A valid random graph with up to `max_procs` processes and up to
/// `max_events` events per process. Messages are matched FIFO per
/// sender/receiver pair; some sends stay unmatched and some receives have
/// no sender.
pub fn random_graph(seed: u64, max_procs: u32, max_events: usize) -> EventGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let procs = rng.gen_range(1..=max_procs) as usize;
    let caps: Vec<usize> = (0..procs).map(|_| rng.gen_range(0..=max_events)).collect();
    let mut timelines: Vec<Vec<Event>> = vec![Vec::new(); procs];
    let mut in_flight: HashMap<(usize, usize), VecDeque<(EventId, u64)>> = HashMap::new();
    let mut relations = Vec::new();

    fn next(t: &[Event]) -> u64 {
        t.len() as u64 + 1
    }

    for _ in 0..procs * max_events * 3 {
        let open: Vec<usize> = (0..procs).filter(|&x| timelines[x].len() < caps[x]).collect();
        if open.is_empty() {
            break;
        }
        let x = open[rng.gen_range(0..open.len())];
        let roll: f64 = rng.gen();
        let peer = |rng: &mut ChaCha8Rng| {
            let mut y = rng.gen_range(0..procs - 1);
            if y >= x {
                y += 1;
            }
            y
        };
        if procs >= 3 && roll < 0.08 {
            let y = peer(&mut rng);
            let z = (0..procs).find(|&z| z != x && z != y).unwrap();
            let ring = [x, y, z];
            if ring.iter().all(|&p| timelines[p].len() + 2 <= caps[p]) {
                let starts: Vec<u64> = ring.iter().map(|&p| next(&timelines[p])).collect();
                for (k, &p) in ring.iter().enumerate() {
                    let to = ring[(k + 1) % 3];
                    timelines[p].push(Event::send(p as u32, starts[k], to as u64, 16));
                }
                for (k, &p) in ring.iter().enumerate() {
                    let from = ring[(k + 2) % 3];
                    timelines[p].push(Event::receive(p as u32, starts[k] + 1, from as u64, 16));
                    relations.push(Relation::new(from as u32, starts[(k + 2) % 3], p as u32, starts[k] + 1));
                }
                continue;
            }
        }
        if procs >= 2 && roll < 0.25 {
            let y = peer(&mut rng);
            if timelines[x].len() + 2 <= caps[x] && timelines[y].len() + 2 <= caps[y] {
                // simple exchange between x and y
                let len = rng.gen_range(1..64);
                let (sx, sy) = (next(&timelines[x]), next(&timelines[y]));
                timelines[x].push(Event::send(x as u32, sx, y as u64, len));
                timelines[y].push(Event::send(y as u32, sy, x as u64, len));
                timelines[x].push(Event::receive(x as u32, sx + 1, y as u64, len));
                timelines[y].push(Event::receive(y as u32, sy + 1, x as u64, len));
                relations.push(Relation::new(x as u32, sx, y as u32, sy + 1));
                relations.push(Relation::new(y as u32, sy, x as u32, sx + 1));
                continue;
            }
        }
        if procs >= 2 && roll < 0.55 {
            let y = peer(&mut rng);
            let len = rng.gen_range(1..64);
            let id = EventId::new(x as u32, next(&timelines[x]));
            timelines[x].push(Event::send(x as u32, id.index.0, y as u64, len));
            in_flight.entry((x, y)).or_default().push_back((id, len));
        } else if procs >= 2 && roll < 0.85 {
            let sources: Vec<usize> = (0..procs)
                .filter(|&s| in_flight.get(&(s, x)).is_some_and(|q| !q.is_empty()))
                .collect();
            let i = next(&timelines[x]);
            if sources.is_empty() {
                if rng.gen_bool(0.2) {
                    let y = peer(&mut rng);
                    timelines[x].push(Event::receive(x as u32, i, y as u64, 8));
                } else {
                    timelines[x].push(Event::new(x as u32, i, EventKind::WRITE));
                }
            } else {
                let s = sources[rng.gen_range(0..sources.len())];
                let (send, len) = in_flight.get_mut(&(s, x)).unwrap().pop_front().unwrap();
                timelines[x].push(Event::receive(x as u32, i, s as u64, len));
                relations.push(Relation {
                    send,
                    recv: EventId::new(x as u32, i),
                });
            }
        } else {
            let kind = [EventKind::LOCK, EventKind::UNLOCK, EventKind::READ, EventKind::WRITE][rng.gen_range(0..4)];
            let i = next(&timelines[x]);
            timelines[x].push(Event::new(x as u32, i, kind));
        }
    }
    GraphBuilder::from_parts(procs as u32, timelines.into_iter().flatten().collect(), relations)
        .unwrap()
        .build()
        .unwrap()
}

/// Every event's strict successors over sequential and message edges, by
/// breadth-first search.
pub fn reachability(graph: &EventGraph) -> HashMap<EventId, HashSet<EventId>> {
    let successors = |id: EventId| {
        let mut out = Vec::new();
        let next = EventId::new(id.process.0, id.index.0 + 1);
        if graph.event(next).is_some() {
            out.push(next);
        }
        if let Some(r) = graph.matched_receive(id) {
            out.push(r);
        }
        out
    };
    let mut reach = HashMap::new();
    for e in graph.events() {
        let start = e.id();
        let mut seen = HashSet::new();
        let mut queue: VecDeque<EventId> = successors(start).into();
        while let Some(v) = queue.pop_front() {
            if seen.insert(v) {
                queue.extend(successors(v));
            }
        }
        reach.insert(start, seen);
    }
    reach
}

/// Occurrences found by assigning template events to graph events one at a
/// time and checking every constraint directly.
pub fn brute_force_occurrences(graph: &EventGraph, template: &PatternTemplate) -> Vec<PatternOccurrence> {
    let events: Vec<&Event> = graph.events().collect();
    let mut found: BTreeMap<Vec<EventId>, (Vec<u32>, Vec<u64>)> = BTreeMap::new();
    let mut chosen: Vec<EventId> = Vec::new();
    search(graph, template, &events, &mut chosen, &mut found);
    let mut out: Vec<PatternOccurrence> = found
        .into_values()
        .map(|(binding, base)| PatternOccurrence {
            template: template.name.clone(),
            binding: binding.into_iter().map(ProcessId).collect(),
            base,
        })
        .collect();
    out.sort();
    out
}

fn search(
    graph: &EventGraph,
    template: &PatternTemplate,
    events: &[&Event],
    chosen: &mut Vec<EventId>,
    found: &mut BTreeMap<Vec<EventId>, (Vec<u32>, Vec<u64>)>,
) {
    let n = chosen.len();
    if n == template.events.len() {
        let k = template.placeholders as usize;
        let mut binding = vec![0u32; k];
        let mut base = vec![0u64; k];
        for (t, id) in template.events.iter().zip(chosen.iter()) {
            binding[t.placeholder as usize] = id.process.0;
            base[t.placeholder as usize] = id.index.0 - t.offset;
        }
        for edge in &template.relations {
            let (a, b) = (chosen[edge.from], chosen[edge.to]);
            let ok = match edge.order {
                EdgeOrder::S => a.process == b.process && a.index < b.index,
                EdgeOrder::C => graph.has_relation(a, b),
            };
            if !ok {
                return;
            }
        }
        let mut key = chosen.clone();
        key.sort();
        let candidate = (binding, base);
        match found.get(&key) {
            Some(existing) if *existing <= candidate => {}
            _ => {
                found.insert(key, candidate);
            }
        }
        return;
    }
    let t = &template.events[n];
    for e in events {
        if e.kind != t.kind || e.index.0 < t.offset + 1 {
            continue;
        }
        let id = e.id();
        let consistent = template.events[..n].iter().zip(chosen.iter()).all(|(u, prev)| {
            if u.placeholder == t.placeholder {
                prev.process == id.process && prev.index.0 as i128 - u.offset as i128 == id.index.0 as i128 - t.offset as i128
            } else {
                prev.process != id.process
            }
        });
        if consistent {
            chosen.push(id);
            search(graph, template, events, chosen, found);
            chosen.pop();
        }
    }
}

/// Three processes passing a message around a ring, each sending and then
/// receiving.
pub fn ring_template() -> PatternTemplate {
    let ev = |placeholder, offset, kind| TemplateEvent { placeholder, offset, kind };
    PatternTemplate {
        name: "ring-3".into(),
        placeholders: 3,
        events: vec![
            ev(0, 0, EventKind::SEND),
            ev(0, 1, EventKind::RECEIVE),
            ev(1, 0, EventKind::SEND),
            ev(1, 1, EventKind::RECEIVE),
            ev(2, 0, EventKind::SEND),
            ev(2, 1, EventKind::RECEIVE),
        ],
        relations: vec![
            TemplateEdge { from: 0, to: 3, order: EdgeOrder::C },
            TemplateEdge { from: 2, to: 5, order: EdgeOrder::C },
            TemplateEdge { from: 4, to: 1, order: EdgeOrder::C },
        ],
    }
}

/// A single message.
pub fn ping_template() -> PatternTemplate {
    PatternTemplate {
        name: "ping".into(),
        placeholders: 2,
        events: vec![
            TemplateEvent { placeholder: 0, offset: 0, kind: EventKind::SEND },
            TemplateEvent { placeholder: 1, offset: 0, kind: EventKind::RECEIVE },
        ],
        relations: vec![TemplateEdge { from: 0, to: 1, order: EdgeOrder::C }],
    }
}
