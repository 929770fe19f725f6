//! Seeded synthetic trace generator with fault injection.
//!
//! Iterations are numbered from 1. In the structured scenarios every process
//! performs one send and one receive per iteration, so iteration `k` occupies
//! indices `2k-1` (send) and `2k` (receive) and uses tag `k`. Distinct tags per
//! iteration keep a redirected message from shifting the FIFO matching of
//! later iterations.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttrValue, Event, EventId, EventKind};
use crate::trace;

/// Kind code of the local "compute" events that stand in for a dropped
/// exchange.
pub const COMPUTE_KIND: u16 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Ring,
    SimpleExchangeLoop,
    Random,
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Scenario::Ring),
            "simple-exchange-loop" => Ok(Scenario::SimpleExchangeLoop),
            "random" => Ok(Scenario::Random),
            other => Err(format!(
                "unknown scenario `{other}` (expected ring, simple-exchange-loop or random)"
            )),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Ring => "ring",
            Scenario::SimpleExchangeLoop => "simple-exchange-loop",
            Scenario::Random => "random",
        })
    }
}

/// An injected fault. `pair` counts exchange pairs `(2j, 2j+1)` in the
/// exchange loop and senders `j -> j+1` in the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fault {
    /// The receive of the pair's first message reports half the sent length.
    LengthMismatch { iteration: u64, pair: u32 },
    /// `process` sends its message of that iteration to a process that does
    /// not expect it.
    WrongDestination { iteration: u64, process: u32 },
    /// The pair (or every pair when `None`) skips its exchange in that
    /// iteration and records local compute events instead.
    DropIteration { iteration: u64, pair: Option<u32> },
}

impl Fault {
    pub fn iteration(&self) -> u64 {
        match *self {
            Fault::LengthMismatch { iteration, .. }
            | Fault::WrongDestination { iteration, .. }
            | Fault::DropIteration { iteration, .. } => iteration,
        }
    }
}

/// `length-mismatch@K[:PAIR]`, `wrong-dest@K[:PROCESS]`, `drop@K[:PAIR]`.
impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, pos) = s
            .split_once(['@', '='])
            .ok_or_else(|| format!("fault `{s}` must look like KIND@ITERATION[:TARGET]"))?;
        let (iter, target) = match pos.split_once(':') {
            Some((i, t)) => (i, Some(t)),
            None => (pos, None),
        };
        let iteration: u64 = iter
            .parse()
            .map_err(|_| format!("bad iteration `{iter}` in fault `{s}`"))?;
        let target: Option<u32> = target
            .map(|t| t.parse().map_err(|_| format!("bad target `{t}` in fault `{s}`")))
            .transpose()?;
        match kind {
            "length-mismatch" => Ok(Fault::LengthMismatch {
                iteration,
                pair: target.unwrap_or(0),
            }),
            "wrong-dest" => Ok(Fault::WrongDestination {
                iteration,
                process: target.unwrap_or(0),
            }),
            "drop" => Ok(Fault::DropIteration {
                iteration,
                pair: target,
            }),
            other => Err(format!(
                "unknown fault kind `{other}` (expected length-mismatch, wrong-dest or drop)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub process_count: u32,
    /// Loop iterations; for `random`, the number of scheduling steps.
    pub iterations: u64,
    pub faults: Vec<Fault>,
}

impl SyntheticSpec {
    pub fn new(scenario: Scenario, process_count: u32, iterations: u64) -> Self {
        SyntheticSpec {
            scenario,
            process_count,
            iterations,
            faults: Vec::new(),
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.faults.push(fault);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid synthetic spec: {0}")]
pub struct InvalidSpec(pub String);

/// What the generator injected, expressed in event coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    /// `(send, receive)` pairs whose lengths differ.
    pub length_mismatches: BTreeSet<(EventId, EventId)>,
    pub isolated_sends: BTreeSet<EventId>,
    pub isolated_receives: BTreeSet<EventId>,
    /// `(bound processes, first index of the dropped iteration)`.
    pub dropped: BTreeSet<(Vec<u32>, u64)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTrace {
    pub process_count: u32,
    pub events: Vec<Event>,
    pub truth: GroundTruth,
}

impl SyntheticTrace {
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        trace::write_trace(&mut out, self.process_count, &self.events)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("trace text is UTF-8")
    }
}

/// Trace text for `spec`; identical for identical `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<String, InvalidSpec> {
    Ok(generate(spec, seed)?.to_text())
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticTrace, InvalidSpec> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match spec.scenario {
        Scenario::SimpleExchangeLoop | Scenario::Ring => structured(spec, &mut rng),
        Scenario::Random => random(spec, &mut rng),
    })
}

fn validate(spec: &SyntheticSpec) -> Result<(), InvalidSpec> {
    let p = spec.process_count;
    let err = |m: String| Err(InvalidSpec(m));
    if spec.iterations == 0 {
        return err("iterations must be at least 1".into());
    }
    match spec.scenario {
        Scenario::SimpleExchangeLoop if p < 2 || p % 2 != 0 => {
            return err(format!(
                "simple-exchange-loop pairs processes and needs an even count >= 2, got {p}"
            ))
        }
        Scenario::Ring | Scenario::Random if p < 2 => {
            return err(format!("{} needs at least 2 processes, got {p}", spec.scenario))
        }
        Scenario::Random if !spec.faults.is_empty() => {
            return err("faults can only be injected into ring and simple-exchange-loop".into())
        }
        _ => {}
    }
    let pairs = match spec.scenario {
        Scenario::SimpleExchangeLoop => p / 2,
        _ => p,
    };
    // (iteration, sender) of every message touched, to reject overlapping faults
    let mut touched: HashSet<(u64, u32)> = HashSet::new();
    let mut claim = |iteration: u64, senders: Vec<u32>| -> Result<(), InvalidSpec> {
        for s in senders {
            if !touched.insert((iteration, s)) {
                return Err(InvalidSpec(format!(
                    "more than one fault targets the message of process {s} in iteration {iteration}"
                )));
            }
        }
        Ok(())
    };
    for f in &spec.faults {
        let k = f.iteration();
        if k == 0 || k > spec.iterations {
            return err(format!("fault {f:?} lies outside iterations 1..={}", spec.iterations));
        }
        match *f {
            Fault::LengthMismatch { pair, .. } => {
                if pair >= pairs {
                    return err(format!("fault {f:?}: pair {pair} out of range"));
                }
                let sender = match spec.scenario {
                    Scenario::SimpleExchangeLoop => 2 * pair,
                    _ => pair,
                };
                claim(k, vec![sender])?;
            }
            Fault::WrongDestination { process, .. } => {
                if process >= p {
                    return err(format!("fault {f:?}: process {process} out of range"));
                }
                claim(k, vec![process])?;
            }
            Fault::DropIteration { pair, .. } => match (spec.scenario, pair) {
                (Scenario::Ring, Some(_)) => {
                    return err("ring drops apply to every process; omit the pair".into())
                }
                (_, Some(j)) if j >= pairs => {
                    return err(format!("fault {f:?}: pair {j} out of range"))
                }
                (_, Some(j)) => claim(k, vec![2 * j, 2 * j + 1])?,
                (_, None) => claim(k, (0..p).collect())?,
            },
        }
    }
    Ok(())
}

fn message_len(rng: &mut ChaCha8Rng) -> u64 {
    8 * rng.gen_range(1..=128u64)
}

/// A process that is neither `sender` nor `intended`; `p` (an address with
/// no process behind it) when there is none.
fn wrong_target(p: u32, sender: u32, intended: u32) -> u32 {
    (1..p)
        .map(|d| (intended + d) % p)
        .find(|&r| r != sender && r != intended)
        .unwrap_or(p)
}

fn structured(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticTrace {
    let p = spec.process_count;
    let exchange = spec.scenario == Scenario::SimpleExchangeLoop;
    let partner_of = |x: u32| -> (u32, u32) {
        // (destination of x's send, source of x's receive)
        if exchange {
            (x ^ 1, x ^ 1)
        } else {
            ((x + 1) % p, (x + p - 1) % p)
        }
    };
    let mut truth = GroundTruth::default();
    let mut events = Vec::with_capacity((p as u64 * spec.iterations * 2) as usize);

    for k in 1..=spec.iterations {
        let send_idx = 2 * k - 1;
        let recv_idx = 2 * k;
        let dropped = |x: u32| {
            spec.faults.iter().any(|f| match *f {
                Fault::DropIteration { iteration, pair } if iteration == k => match pair {
                    None => true,
                    Some(j) => x / 2 == j,
                },
                _ => false,
            })
        };
        for f in &spec.faults {
            if let Fault::DropIteration { iteration, pair } = *f {
                if iteration == k {
                    let groups: Vec<Vec<u32>> = match (exchange, pair) {
                        (true, Some(j)) => vec![vec![2 * j, 2 * j + 1]],
                        (true, None) => (0..p / 2).map(|j| vec![2 * j, 2 * j + 1]).collect(),
                        (false, _) => vec![(0..p).collect()],
                    };
                    for g in groups {
                        truth.dropped.insert((g, send_idx));
                    }
                }
            }
        }

        let lens: Vec<u64> = (0..p).map(|_| message_len(rng)).collect();
        let mut sends = Vec::new();
        let mut recvs = Vec::new();
        for x in 0..p {
            if dropped(x) {
                for idx in [send_idx, recv_idx] {
                    sends.push(
                        Event::new(x, idx, EventKind::from_code(COMPUTE_KIND).unwrap())
                            .with_attr("iteration", AttrValue::U64(k)),
                    );
                }
                continue;
            }
            let (dst, src) = partner_of(x);
            let mut actual_dst = dst;
            if spec
                .faults
                .iter()
                .any(|f| *f == Fault::WrongDestination { iteration: k, process: x })
            {
                actual_dst = wrong_target(p, x, dst);
                truth.isolated_sends.insert(EventId::new(x, send_idx));
                truth.isolated_receives.insert(EventId::new(dst, recv_idx));
            }
            sends.push(
                Event::send(x, send_idx, actual_dst as u64, lens[x as usize])
                    .with_attr("tag", AttrValue::U64(k)),
            );
            let mut recv_len = lens[src as usize];
            let pair_of_src = if exchange { src / 2 } else { src };
            let first_message_of_pair = !exchange || src % 2 == 0;
            if first_message_of_pair
                && spec.faults.iter().any(|f| {
                    *f == Fault::LengthMismatch {
                        iteration: k,
                        pair: pair_of_src,
                    }
                })
            {
                recv_len /= 2;
                truth
                    .length_mismatches
                    .insert((EventId::new(src, send_idx), EventId::new(x, recv_idx)));
            }
            recvs.push(
                Event::receive(x, recv_idx, src as u64, recv_len).with_attr("tag", AttrValue::U64(k)),
            );
        }
        events.extend(sends);
        events.extend(recvs);
    }
    SyntheticTrace {
        process_count: p,
        events,
        truth,
    }
}

/// Random message-passing run: each step one process either sends to a
/// random peer, receives the oldest in-flight message from some peer, or
/// records a local event. Outstanding messages are received at the end, so a
/// random trace never has unmatched events.
fn random(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticTrace {
    let p = spec.process_count as usize;
    let mut next_index = vec![1u64; p];
    // in_flight[dst][src] = lengths, oldest first
    let mut in_flight: Vec<Vec<VecDeque<u64>>> = vec![vec![VecDeque::new(); p]; p];
    let mut events = Vec::new();
    fn push(events: &mut Vec<Event>, next_index: &mut [u64], x: usize, make: impl FnOnce(u64) -> Event) {
        events.push(make(next_index[x]));
        next_index[x] += 1;
    }
    for _ in 0..spec.iterations {
        let x = rng.gen_range(0..p);
        let sources: Vec<usize> = (0..p).filter(|&s| !in_flight[x][s].is_empty()).collect();
        let roll: f64 = rng.gen();
        if !sources.is_empty() && roll < 0.45 {
            let s = sources[rng.gen_range(0..sources.len())];
            let len = in_flight[x][s].pop_front().unwrap();
            push(&mut events, &mut next_index, x, |i| Event::receive(x as u32, i, s as u64, len));
        } else if roll < 0.9 {
            let mut d = rng.gen_range(0..p - 1);
            if d >= x {
                d += 1;
            }
            let len = message_len(rng);
            in_flight[d][x].push_back(len);
            push(&mut events, &mut next_index, x, |i| Event::send(x as u32, i, d as u64, len));
        } else {
            push(&mut events, &mut next_index, x, |i| Event::new(x as u32, i, EventKind::WRITE));
        }
    }
    for (x, row) in in_flight.iter_mut().enumerate() {
        for (s, queue) in row.iter_mut().enumerate() {
            while let Some(len) = queue.pop_front() {
                push(&mut events, &mut next_index, x, |i| Event::receive(x as u32, i, s as u64, len));
            }
        }
    }
    SyntheticTrace {
        process_count: spec.process_count,
        events,
        truth: GroundTruth::default(),
    }
}
