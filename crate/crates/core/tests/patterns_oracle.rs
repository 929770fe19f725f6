mod support;

use evgraph_core::patterns::{builtin_simple_exchange, detect_runs, match_template, PatternTemplate};
use evgraph_core::synth::{self, Scenario, SyntheticSpec};
use evgraph_core::trace::match_messages;
use evgraph_core::GraphBuilder;
use proptest::prelude::*;
use support::{brute_force_occurrences, ping_template, random_graph, ring_template};

fn templates() -> Vec<PatternTemplate> {
    vec![builtin_simple_exchange(), ring_template(), ping_template()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matcher_equals_brute_force(seed in any::<u64>()) {
        let g = random_graph(seed, 4, 20);
        for t in templates() {
            prop_assert_eq!(match_template(&g, &t).unwrap(), brute_force_occurrences(&g, &t), "{}", t.name);
        }
    }

    #[test]
    fn occurrences_hold_in_the_graph(seed in any::<u64>()) {
        let g = random_graph(seed, 5, 30);
        for t in templates() {
            for o in match_template(&g, &t).unwrap() {
                let ids: Vec<_> = t.events.iter().map(|e| {
                    let h = e.placeholder as usize;
                    evgraph_core::EventId::new(o.binding[h].0, o.base[h] + e.offset)
                }).collect();
                for (e, id) in t.events.iter().zip(&ids) {
                    prop_assert_eq!(g.event(*id).map(|x| x.kind), Some(e.kind));
                }
                for r in &t.relations {
                    if r.order == evgraph_core::patterns::EdgeOrder::C {
                        prop_assert!(g.has_relation(ids[r.from], ids[r.to]));
                    }
                }
            }
        }
    }

    #[test]
    fn clean_exchange_loops_are_regular(pairs in 1u32..5, iterations in 1u64..12, seed in any::<u64>()) {
        let t = synth::generate(&SyntheticSpec::new(Scenario::SimpleExchangeLoop, 2 * pairs, iterations), seed).unwrap();
        let m = match_messages(&t.events);
        let g = GraphBuilder::from_parts(t.process_count, t.events, m.relations).unwrap().build().unwrap();
        let occ = match_template(&g, &builtin_simple_exchange()).unwrap();
        prop_assert_eq!(occ.len() as u64, iterations * pairs as u64);
        let runs = detect_runs(&occ);
        prop_assert!(runs.iter().all(|r| r.irregularities.is_empty()));
        let again = match_template(&g, &builtin_simple_exchange()).unwrap();
        prop_assert_eq!(occ, again);
    }
}

#[test]
fn random_graphs_contain_patterns() {
    let mut totals = [0usize; 3];
    for seed in 0..100 {
        let g = random_graph(seed, 4, 20);
        for (n, t) in templates().iter().enumerate() {
            totals[n] += brute_force_occurrences(&g, t).len();
        }
    }
    assert!(totals.iter().all(|&n| n > 0), "{totals:?}");
}
