//! Properties over generated scenarios.

use std::sync::Arc;

use proptest::prelude::*;
use tzsim_core::harness::fuzz::{fuzz_one, generate, Profile};
use tzsim_core::harness::Severity;
use tzsim_core::monitor::Faults;
use tzsim_core::platform::{run, RunOptions};
use tzsim_core::scenario::{emit, parse};
use tzsim_core::trace::{from_jsonl, to_jsonl, EventKind};

fn profile() -> impl Strategy<Value = Profile> {
    prop_oneof![
        Just(Profile::GicHeavy),
        Just(Profile::HandoverHeavy),
        Just(Profile::MemoryProbing),
        Just(Profile::Spatial),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_scenarios_survive_emit_and_parse(p in profile(), seed in any::<u64>()) {
        let s = generate(p, seed);
        prop_assert_eq!(parse(&emit(&s)).expect("parses"), s);
    }

    #[test]
    fn unfaulted_runs_keep_every_guarantee(p in profile(), seed in any::<u64>()) {
        let (_, _, vs) = fuzz_one(p, seed, Faults::none()).expect("valid scenario");
        let errors: Vec<_> = vs.iter().filter(|v| v.severity == Severity::Error).collect();
        prop_assert!(errors.is_empty(), "{:?}", errors);
    }

    #[test]
    fn traces_round_trip_through_jsonl(p in profile(), seed in any::<u64>()) {
        let (_, events, _) = fuzz_one(p, seed, Faults::none()).expect("valid scenario");
        prop_assert_eq!(from_jsonl(&to_jsonl(&events)).expect("reads back"), events);
    }

    #[test]
    fn runs_are_deterministic(p in profile(), seed in any::<u64>(), fire_seed in any::<u64>()) {
        let s = Arc::new(generate(p, seed));
        let opts = || RunOptions { seed: fire_seed, faults: Faults::none(), max_steps: None };
        prop_assert_eq!(run(s.clone(), opts()).expect("boots"), run(s, opts()).expect("boots"));
    }

    #[test]
    fn steps_never_go_back_and_the_run_ends_once(p in profile(), seed in any::<u64>()) {
        let (_, events, _) = fuzz_one(p, seed, Faults::none()).expect("valid scenario");
        prop_assert!(events.windows(2).all(|w| w[0].step <= w[1].step));
        let ends = events.iter().filter(|e| matches!(e.kind, EventKind::RunEnd { .. })).count();
        prop_assert_eq!(ends, 1);
        let last_is_end = matches!(events.last().map(|e| &e.kind), Some(EventKind::RunEnd { .. }));
        prop_assert!(last_is_end);
    }

    #[test]
    fn live_domains_never_share_private_memory(p in profile(), seed in any::<u64>()) {
        let (_, events, _) = fuzz_one(p, seed, Faults::none()).expect("valid scenario");
        for e in &events {
            let records = match &e.kind {
                EventKind::Boot { ownership, .. } => ownership,
                EventKind::OwnershipSnapshot { domains } => domains,
                _ => continue,
            };
            for (i, a) in records.iter().enumerate() {
                for b in &records[i + 1..] {
                    for ra in &a.memory {
                        for rb in &b.memory {
                            prop_assert!(!ra.overlaps(rb), "step {}: {} and {} share {:?}/{:?}", e.step, a.name, b.name, ra, rb);
                        }
                    }
                }
            }
        }
    }
}
