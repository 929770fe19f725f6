use std::collections::{BTreeMap, HashSet};

use evgraph_core::model::{Event, EventId, EventKind};
use evgraph_core::trace::{match_messages, ChannelKey};
use proptest::prelude::*;

/// Random sends and receives on up to three processes with two tags.
fn events() -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec((0u32..3, 0u8..3, 0u64..3, 0u64..2), 0..24).prop_map(|ops| {
        let mut next = [1u64; 3];
        ops.into_iter()
            .map(|(p, op, peer, tag)| {
                let i = next[p as usize];
                next[p as usize] += 1;
                let e = match op {
                    0 => Event::send(p, i, peer, 4),
                    1 => Event::receive(p, i, peer, 4),
                    _ => Event::new(p, i, EventKind::READ),
                };
                e.with_attr("tag", evgraph_core::model::AttrValue::U64(tag))
            })
            .collect()
    })
}

/// Order-preserving matchings between `s` sends and `r` receives of one
/// channel, by exhaustive search over subsets: the largest, and among those
/// the one whose matched positions are lexicographically smallest.
fn oracle_pairs(s: usize, r: usize) -> Vec<(usize, usize)> {
    let mut best: Option<Vec<(usize, usize)>> = None;
    for smask in 0u32..(1 << s) {
        for rmask in 0u32..(1 << r) {
            if smask.count_ones() != rmask.count_ones() {
                continue;
            }
            let ss: Vec<usize> = (0..s).filter(|k| smask & (1 << k) != 0).collect();
            let rs: Vec<usize> = (0..r).filter(|k| rmask & (1 << k) != 0).collect();
            let pairs: Vec<(usize, usize)> = ss.into_iter().zip(rs).collect();
            let better = match &best {
                None => true,
                Some(b) => pairs.len() > b.len() || (pairs.len() == b.len() && pairs < *b),
            };
            if better {
                best = Some(pairs);
            }
        }
    }
    best.unwrap_or_default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matched_and_pending_partition_messages(evs in events()) {
        let m = match_messages(&evs);
        let messages: HashSet<EventId> = evs
            .iter()
            .filter(|e| e.kind == EventKind::SEND || e.kind == EventKind::RECEIVE)
            .map(Event::id)
            .collect();
        let mut covered = Vec::new();
        for r in &m.relations {
            covered.push(r.send);
            covered.push(r.recv);
        }
        covered.extend(&m.pending.sends);
        covered.extend(&m.pending.receives);
        let unique: HashSet<EventId> = covered.iter().copied().collect();
        prop_assert_eq!(unique.len(), covered.len());
        prop_assert_eq!(unique, messages);
    }

    #[test]
    fn fifo_per_channel_matches_oracle(evs in events()) {
        let m = match_messages(&evs);
        let mut channels: BTreeMap<ChannelKey, (Vec<EventId>, Vec<EventId>)> = BTreeMap::new();
        for e in &evs {
            if let Some(k) = ChannelKey::of(e) {
                let entry = channels.entry(k).or_default();
                if e.kind == EventKind::SEND { entry.0.push(e.id()) } else { entry.1.push(e.id()) }
            }
        }
        let mut expected: Vec<(EventId, EventId)> = Vec::new();
        for (sends, recvs) in channels.values() {
            prop_assume!(sends.len() <= 10 && recvs.len() <= 10);
            for (a, b) in oracle_pairs(sends.len(), recvs.len()) {
                expected.push((sends[a], recvs[b]));
            }
        }
        let mut got: Vec<(EventId, EventId)> = m.relations.iter().map(|r| (r.send, r.recv)).collect();
        expected.sort();
        got.sort();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn self_addressed_message_never_matches() {
    let evs = vec![Event::send(0, 1, 0, 4), Event::receive(0, 2, 0, 4)];
    let m = match_messages(&evs);
    assert!(m.relations.is_empty());
    assert_eq!(m.pending.sends.len() + m.pending.receives.len(), 2);
}
