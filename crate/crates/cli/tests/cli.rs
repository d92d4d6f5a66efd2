use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::Arc;

use tzsim_cli::RunReport;
use tzsim_core::monitor::{Fault, Faults};
use tzsim_core::platform::{run, RunOptions};
use tzsim_core::scenario::parse;
use tzsim_core::trace::{from_jsonl, to_jsonl, EventKind};

fn scenario(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(rel)
}

fn tzsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tzsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn clean_run_exits_zero() {
    let out = tzsim(&[
        "run",
        scenario("case/vault.toml").to_str().unwrap(),
        "--check",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("violations 0"));
}

#[test]
fn vault_report_counts_round_trips() {
    let out = tzsim(&[
        "run",
        scenario("case/vault.toml").to_str().unwrap(),
        "--check",
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r: RunReport = serde_json::from_slice(&out.stdout).expect("json report");
    assert!(r.proxy_round_trips > 0);
    assert_eq!(r.violations, Some(0));
}

#[test]
fn report_counters_match_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let report = dir.path().join("r.json");
    let out = tzsim(&[
        "run",
        scenario("case/messenger.toml").to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let events = from_jsonl(&std::fs::read_to_string(&trace).unwrap()).expect("trace reads");
    let r: RunReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.events, events.len() as u64);
    assert_eq!(r.seed, 5);
    let calls = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::MonitorCall { .. }))
        .count() as u64;
    assert_eq!(
        r.domains.values().map(|c| c.monitor_calls).sum::<u64>(),
        calls
    );
    let delivered = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::InterruptDelivered { .. }))
        .count() as u64;
    assert_eq!(
        r.domains.values().map(|c| c.deliveries).sum::<u64>(),
        delivered
    );
    let switches = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::ContextSwitch { to: Some(_), .. }))
        .count() as u64;
    assert_eq!(
        r.domains.values().map(|c| c.context_switches).sum::<u64>(),
        switches
    );
    match events.last().map(|e| &e.kind) {
        Some(EventKind::RunEnd { steps, .. }) => assert_eq!(r.steps, *steps),
        other => panic!("trace ends with {other:?}"),
    }
}

#[test]
fn same_seed_same_report() {
    let path = scenario("case/browser.toml");
    let a = tzsim(&[
        "run",
        path.to_str().unwrap(),
        "--seed",
        "9",
        "--format",
        "json",
    ]);
    let b = tzsim(&[
        "run",
        path.to_str().unwrap(),
        "--seed",
        "9",
        "--format",
        "json",
    ]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn malformed_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\n[platform]\ncores = \"two\"\n").unwrap();
    let out = tzsim(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        text(&out.stderr).contains("bad.toml:"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn missing_file_and_bad_flags_are_usage_errors() {
    assert_eq!(tzsim(&["run", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(tzsim(&["fuzz", "--profile", "nope"]).status.code(), Some(2));
    assert_eq!(tzsim(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn check_names_the_class_of_a_faulted_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("faults/g2.toml");
    let s = Arc::new(parse(&std::fs::read_to_string(&path).unwrap()).unwrap());
    let opts = RunOptions {
        faults: Faults::none().with(Fault::SkipStateMask),
        ..RunOptions::default()
    };
    let trace = dir.path().join("g2.jsonl");
    std::fs::write(&trace, to_jsonl(&run(s, opts).unwrap())).unwrap();
    let out = tzsim(&["check", trace.to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("G2"), "{}", text(&out.stdout));
}

#[test]
fn check_of_a_clean_trace_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let path = scenario("temporal.toml");
    let run = tzsim(&[
        "run",
        path.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(0));
    let out = tzsim(&["check", trace.to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
}

#[test]
fn fuzz_hundred_runs_clean() {
    let out = tzsim(&["fuzz", "--count", "100", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("100 runs"));
    assert!(text(&out.stdout).contains(" 0 violations"));
}
