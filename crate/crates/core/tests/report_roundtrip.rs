use std::collections::BTreeMap;

use evgraph_core::failures::{Anomaly, AnomalyKind, Severity};
use evgraph_core::patterns::{Irregularity, IrregularityReason, PatternRun};
use evgraph_core::report::{parse_report, serialize_report, AnalysisReport, TraceSummary, SCHEMA_VERSION};
use evgraph_core::trace::PendingReport;
use evgraph_core::{EventId, ProcessId};
use proptest::prelude::*;

fn id() -> impl Strategy<Value = EventId> {
    (0u32..16, 1u64..500).prop_map(|(p, i)| EventId::new(p, i))
}

fn anomaly() -> impl Strategy<Value = Anomaly> {
    prop_oneof![
        (id(), id(), any::<u64>(), any::<u64>()).prop_map(|(s, r, a, b)| Anomaly::length_mismatch(s, r, a, b)),
        id().prop_map(|e| Anomaly::isolated(AnomalyKind::IsolatedSend, e)),
        id().prop_map(|e| Anomaly::isolated(AnomalyKind::IsolatedReceive, e)),
    ]
}

fn run(anomalies: usize) -> impl Strategy<Value = PatternRun> {
    let irregularity = (prop::collection::vec(1u64..100, 2), any::<bool>(), prop::option::of(0..anomalies.max(1)))
        .prop_map(move |(expected, perturbed, anomaly)| Irregularity {
            expected,
            reason: if perturbed { IrregularityReason::Perturbed } else { IrregularityReason::Missing },
            anomaly: anomaly.filter(|_| anomalies > 0),
        });
    (
        "[a-z-]{1,12}",
        prop::collection::vec(0u32..16, 2),
        prop::collection::vec(prop::collection::vec(1u64..100, 2), 2..6),
        1u64..5,
        prop::collection::vec(irregularity, 0..3),
    )
        .prop_map(|(template, binding, occurrences, stride, irregularities)| PatternRun {
            template,
            binding: binding.into_iter().map(ProcessId).collect(),
            occurrences,
            stride,
            irregularities,
        })
}

fn report() -> impl Strategy<Value = AnalysisReport> {
    prop::collection::vec(anomaly(), 0..6).prop_flat_map(|anomalies| {
        let n = anomalies.len();
        (
            Just(anomalies),
            prop::collection::vec(run(n), 0..4),
            any::<(u32, u64, u64)>(),
            prop::collection::vec(id(), 0..4),
            prop::collection::vec(id(), 0..4),
        )
            .prop_map(|(anomalies, runs, (p, e, r), sends, receives)| AnalysisReport {
                schema_version: SCHEMA_VERSION,
                trace: TraceSummary { process_count: p, event_count: e, relation_count: r },
                anomalies,
                runs,
                pendings: PendingReport { sends, receives },
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn parse_inverts_serialize(r in report()) {
        let text = serialize_report(&r);
        let back = parse_report(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(serialize_report(&back), text);
    }
}

#[test]
fn severity_and_details_are_stable() {
    let a = Anomaly::length_mismatch(EventId::new(0, 1), EventId::new(1, 1), 8, 4);
    assert_eq!(a.severity, Severity::Warning);
    assert_eq!(a.details, BTreeMap::from([("recv_len".to_owned(), 4), ("send_len".to_owned(), 8)]));
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(
        json,
        "{\"kind\":\"LengthMismatch\",\"severity\":\"warning\",\"events\":[[0,1],[1,1]],\"details\":{\"recv_len\":4,\"send_len\":8}}"
    );
}
