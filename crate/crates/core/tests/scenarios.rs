//! The bundled scenarios, run under the normal test harness.

mod common;

use std::collections::BTreeSet;

use common::{load, run, CASE_STUDIES};
use tzsim_core::asc::DenyReason;
use tzsim_core::harness::{check, Class, Severity};
use tzsim_core::ids::{AccessKind, DomainId};
use tzsim_core::monitor::{Fault, Faults};
use tzsim_core::trace::{self, EventKind};

const FAULTS: [(&str, Fault, Class); 7] = [
    ("faults/g1.toml", Fault::SkipAccessMask, Class::G1),
    ("faults/g2.toml", Fault::SkipStateMask, Class::G2),
    ("faults/g3.toml", Fault::SkipAffinityPin, Class::G3),
    ("faults/g4.toml", Fault::SuppressDelivery, Class::G4),
    ("faults/mem.toml", Fault::SkipAscOnSwitch, Class::Mem),
    (
        "faults/partition.toml",
        Fault::DoubleAssign,
        Class::Partition,
    ),
    ("faults/hygiene.toml", Fault::SkipZeroing, Class::Hygiene),
];

fn classes(rel: &str, faults: Faults) -> BTreeSet<Class> {
    let s = load(rel);
    check(&s, &run(&s, 0, faults))
        .expect("trace checks")
        .iter()
        .filter(|v| v.severity == Severity::Error)
        .map(|v| v.class)
        .collect()
}

#[test]
fn temporal_trace_matches_golden() {
    let s = load("temporal.toml");
    assert_eq!(
        common::project(&run(&s, 0, Faults::none())),
        common::golden("temporal.golden")
    );
}

#[test]
fn case_studies_run_clean() {
    for case in CASE_STUDIES {
        let rel = format!("case/{case}.toml");
        let s = load(&rel);
        let vs = check(&s, &run(&s, 0, Faults::none())).expect("trace checks");
        assert!(vs.is_empty(), "{rel}: {:?}", vs);
    }
}

#[test]
fn proxy_case_studies_complete_round_trips() {
    for case in ["vault", "auth", "vpn", "browser", "messenger"] {
        let s = load(&format!("case/{case}.toml"));
        assert!(
            trace::proxy_round_trips(&run(&s, 0, Faults::none())) > 0,
            "{case}"
        );
    }
}

#[test]
fn each_fault_trips_only_its_class() {
    for (rel, fault, class) in FAULTS {
        assert_eq!(
            classes(rel, Faults::none()),
            BTreeSet::new(),
            "{rel} unfaulted"
        );
        assert_eq!(
            classes(rel, Faults::none().with(fault)),
            BTreeSet::from([class]),
            "{rel}"
        );
    }
}

#[test]
fn spatial_app_cannot_steer_or_probe() {
    let s = load("spatial.toml");
    let events = run(&s, 0, Faults::none());
    let app = DomainId(1);
    let router_writes = events
        .iter()
        .filter(|e| {
            e.domain == Some(app)
                && matches!(&e.kind, EventKind::GicAccess { register, access: AccessKind::Write, .. }
                    if register == "IROUTER[39]")
        })
        .count();
    assert!(router_writes >= 2);
    let steered = events.iter().any(|e| {
        matches!(&e.kind, EventKind::IntConfig { intid, field: tzsim_core::gic::ConfigField::Affinity, .. }
            if intid.value() == 39)
            && e.domain == Some(app)
    });
    assert!(!steered, "app moved its interrupt off its core");
    let probe = events.iter().any(|e| {
        e.domain == Some(app)
            && matches!(
                &e.kind,
                EventKind::Bus {
                    denied: Some(DenyReason::CoreFilter),
                    ..
                }
            )
    });
    assert!(probe, "uart probe by the app was not denied");
}

#[test]
fn torn_down_memory_reads_zero() {
    let s = load("lifecycle.toml");
    let events = run(&s, 0, Faults::none());
    let freed: Vec<_> = events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Teardown { freed, .. } => Some(freed.clone()),
            _ => None,
        })
        .flatten()
        .collect();
    assert!(!freed.is_empty());
    let mut seen = 0;
    let mut after = false;
    for e in &events {
        match &e.kind {
            EventKind::Teardown { .. } => after = true,
            EventKind::Bus {
                addr,
                access: AccessKind::Read,
                value,
                denied: None,
                ..
            } if after && freed.iter().any(|r| r.contains(*addr, 1)) => {
                assert_eq!(*value, 0, "step {}: {addr:#x}", e.step);
                seen += 1;
            }
            _ => {}
        }
    }
    assert!(seen > 0);
}
