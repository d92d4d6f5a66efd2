#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use tzsim_core::gic::IntId;
use tzsim_core::ids::{CoreId, DomainId};
use tzsim_core::monitor::Faults;
use tzsim_core::platform::{self, RunOptions};
use tzsim_core::scenario::{self, Scenario};
use tzsim_core::trace::{Actor, EventKind, TraceEvent};

pub const CASE_STUDIES: [&str; 6] = ["vault", "auth", "firmware", "browser", "vpn", "messenger"];

pub fn scenario_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(rel)
}

pub fn load(rel: &str) -> Arc<Scenario> {
    let path = scenario_path(rel);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Arc::new(scenario::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
}

pub fn run(s: &Arc<Scenario>, seed: u64, faults: Faults) -> Vec<TraceEvent> {
    platform::run(
        s.clone(),
        RunOptions {
            seed,
            faults,
            max_steps: None,
        },
    )
    .expect("scenario boots")
}

fn who(x: Option<impl std::fmt::Display>) -> String {
    x.map_or("-".into(), |v| v.to_string())
}

/// The scheduling-relevant events of a trace, one line each, in the format
/// of the golden files.
pub fn project(events: &[TraceEvent]) -> Vec<String> {
    events
        .iter()
        .filter_map(|e| {
            let detail = match &e.kind {
                EventKind::ContextSwitch {
                    from, to, reason, ..
                } => format!(
                    "context_switch {}->{} {}",
                    who(from.map(|d| d.0)),
                    who(to.map(|d| d.0)),
                    serde_json::to_value(reason).ok()?.as_str()?
                ),
                EventKind::Yield {} => "yield".into(),
                EventKind::InterruptFired { intid, .. } => format!("interrupt_fired {intid}"),
                EventKind::IntState {
                    intid,
                    from,
                    to,
                    by: Actor::Peripheral(_),
                    ..
                } if intid.is_spi() => format!(
                    "int_state {intid} {}->{}",
                    serde_json::to_value(from).ok()?.as_str()?,
                    serde_json::to_value(to).ok()?.as_str()?
                ),
                EventKind::InterruptDelivered { intid } => format!("interrupt_delivered {intid}"),
                EventKind::InterruptAcknowledged { intid } => {
                    format!("interrupt_acknowledged {intid}")
                }
                EventKind::InterruptEoi { intid } => format!("interrupt_eoi {intid}"),
                EventKind::HandlerReturn {} => "handler_return".into(),
                EventKind::CoreHalted {} => "core_halted".into(),
                EventKind::RunEnd { steps, reason } => format!("run_end {steps} {reason}"),
                _ => return None,
            };
            Some(format!(
                "{} {} {} {detail}",
                e.step,
                who(e.core.map(|c| c.0)),
                who(e.domain.map(|d| d.0))
            ))
        })
        .collect()
}

pub fn golden(rel: &str) -> Vec<String> {
    std::fs::read_to_string(scenario_path(rel))
        .expect("golden file")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Who owns what and who runs where, rebuilt from snapshots and switches
/// without consulting the checker.
#[derive(Default)]
pub struct World {
    pub owners: BTreeMap<IntId, BTreeSet<DomainId>>,
    pub cores: BTreeMap<DomainId, BTreeSet<CoreId>>,
    pub occupant: BTreeMap<CoreId, DomainId>,
    pub affinity: BTreeMap<IntId, Option<CoreId>>,
}

impl World {
    pub fn apply(&mut self, e: &TraceEvent) {
        match &e.kind {
            EventKind::Boot {
                ownership,
                interrupts,
                ..
            } => {
                self.snapshot(ownership);
                for r in ownership {
                    for c in &r.cores {
                        self.occupant.insert(*c, r.id);
                    }
                }
                for i in interrupts.iter().filter(|i| i.bank.is_none()) {
                    self.affinity.insert(i.intid, i.affinity);
                }
            }
            EventKind::OwnershipSnapshot { domains } => self.snapshot(domains),
            EventKind::ContextSwitch { to, cores, .. } => {
                for c in cores {
                    match to {
                        Some(d) => self.occupant.insert(c.core, *d),
                        None => self.occupant.remove(&c.core),
                    };
                }
            }
            EventKind::IntConfig {
                intid,
                bank: None,
                field: tzsim_core::gic::ConfigField::Affinity,
                new,
                ..
            } => {
                self.affinity
                    .insert(*intid, tzsim_core::gic::decode_affinity(*new));
            }
            _ => {}
        }
    }

    fn snapshot(&mut self, records: &[tzsim_core::trace::OwnershipRecord]) {
        self.owners.clear();
        self.cores.clear();
        for r in records {
            for i in &r.intids {
                self.owners.entry(*i).or_default().insert(r.id);
            }
            self.cores.insert(r.id, r.cores.iter().copied().collect());
        }
    }

    pub fn sole_owner(&self, intid: IntId) -> Option<DomainId> {
        let o = self.owners.get(&intid)?;
        (o.len() == 1).then(|| *o.iter().next().expect("one owner"))
    }
}
