//! The memoized search against brute force on small random histories.

use bodega_lincheck::exhaustive::check_key_exhaustive;
use bodega_lincheck::{check_key, OpKind, Outcome, Record};
use proptest::prelude::*;

fn arb_record() -> impl Strategy<Value = (bool, u8, u64, u64, u8)> {
    // (is_write, value 0..3, invoke, duration, outcome selector)
    (any::<bool>(), 0u8..4, 0u64..40, 0u64..25, 0u8..10)
}

fn build(raw: Vec<(bool, u8, u64, u64, u8)>) -> Vec<Record> {
    raw.into_iter()
        .enumerate()
        .map(|(i, (w, v, a, d, o))| {
            let outcome = match o {
                0 => Outcome::Timeout,
                1 => Outcome::Redirected,
                _ => Outcome::Ok,
            };
            let value = if w || v > 0 { Some(format!("v{v}")) } else { None };
            Record {
                client: i as u64,
                request_id: 1,
                op: if w { OpKind::Put } else { OpKind::Get },
                key: "k".into(),
                value,
                invoke: a,
                response: (outcome != Outcome::Timeout).then_some(a + d),
                outcome,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn agrees_with_brute_force(raw in prop::collection::vec(arb_record(), 0..=10)) {
        let h = build(raw);
        prop_assert_eq!(check_key(&h), check_key_exhaustive(&h), "{:#?}", h);
    }
}

/// Histories generated from a real sequential register with random real-time
/// stretching are always accepted.
#[test]
fn sequential_executions_are_accepted() {
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::default();
    let strat = prop::collection::vec((any::<bool>(), 0u64..5, 0u64..5), 1..60);
    runner
        .run(&strat, |steps| {
            let mut t = 0;
            let mut reg: Option<String> = None;
            let mut recs = Vec::new();
            for (i, (w, pre, post)) in steps.into_iter().enumerate() {
                let invoke = t;
                let at = invoke + pre;
                let value = if w {
                    reg = Some(format!("w{i}"));
                    reg.clone()
                } else {
                    reg.clone()
                };
                let response = at + post;
                recs.push(Record {
                    client: (i % 4) as u64,
                    request_id: i as u64,
                    op: if w { OpKind::Put } else { OpKind::Get },
                    key: "k".into(),
                    value,
                    invoke,
                    response: Some(response),
                    outcome: Outcome::Ok,
                });
                // Next op may start before this one returns but after it took effect.
                t = at + 1;
            }
            prop_assert!(check_key(&recs));
            Ok(())
        })
        .unwrap();
}
