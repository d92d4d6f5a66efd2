//! Offline trace checker. Rebuilds interrupt, ownership, core and address
//! map state purely from trace events and the scenario, then tests every
//! event against the isolation guarantees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asc::Asc;
use crate::gic::{decode_affinity, Activation, ConfigField, Group, IntId, DEFAULT_PRIORITY};
use crate::ids::{AccessKind, CoreId, DomainId, MemRange, Security};
use crate::scenario::Scenario;
use crate::trace::{Actor, DomainState, EventKind, OwnershipRecord, TraceEvent};

use crate::monitor::TIMER_SOURCE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    G1,
    G2,
    G3,
    G4,
    #[serde(rename = "MEM")]
    Mem,
    #[serde(rename = "PARTITION")]
    Partition,
    #[serde(rename = "HYGIENE")]
    Hygiene,
}

impl Class {
    pub const ALL: [Class; 7] = [
        Class::G1,
        Class::G2,
        Class::G3,
        Class::G4,
        Class::Mem,
        Class::Partition,
        Class::Hygiene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Class::G1 => "G1",
            Class::G2 => "G2",
            Class::G3 => "G3",
            Class::G4 => "G4",
            Class::Mem => "MEM",
            Class::Partition => "PARTITION",
            Class::Hygiene => "HYGIENE",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    /// Reported but does not fail the run.
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub class: Class,
    pub severity: Severity,
    pub step: u64,
    /// Index of the offending event in the trace.
    pub event: usize,
    pub explanation: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "",
            Severity::Warning => " (warning)",
        };
        write!(
            f,
            "{}{sev} at step {} (event {}): {}",
            self.class, self.step, self.event, self.explanation
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("trace does not start with a boot event")]
    NoBoot,
    #[error("trace belongs to a different scenario (digest {found}, expected {expected})")]
    DigestMismatch { found: String, expected: String },
    #[error("event {index}: {message}")]
    Malformed { index: usize, message: String },
}

#[derive(Clone, Copy, Debug)]
struct Irq {
    group: Group,
    enabled: bool,
    priority: u8,
    affinity: Option<CoreId>,
    activation: Activation,
}

impl Default for Irq {
    fn default() -> Self {
        Irq {
            group: Group::NonSecure,
            enabled: false,
            priority: DEFAULT_PRIORITY,
            affinity: None,
            activation: Activation::Inactive,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct CoreRec {
    occupant: Option<DomainId>,
    in_handler: bool,
    active: Option<IntId>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Starvation {
    steps: u64,
    reported: bool,
    since: usize,
}

struct Checker<'s> {
    scenario: &'s Scenario,
    bound: u64,
    irq: BTreeMap<(IntId, Option<CoreId>), Irq>,
    records: Vec<OwnershipRecord>,
    owners: BTreeMap<IntId, Vec<DomainId>>,
    cores: Vec<CoreRec>,
    asc: Asc,
    tainted: Vec<MemRange>,
    /// Per interrupt: owner and whether it last asked for it enabled.
    intent: BTreeMap<IntId, (DomainId, bool)>,
    starving: BTreeMap<IntId, Starvation>,
    delivered_now: BTreeSet<CoreId>,
    out: Vec<Violation>,
    index: usize,
    step: u64,
}

/// Check `events` against `scenario` with the scenario's liveness bound.
pub fn check(scenario: &Scenario, events: &[TraceEvent]) -> Result<Vec<Violation>, CheckError> {
    check_with_bound(scenario, events, scenario.liveness_bound)
}

pub fn check_with_bound(
    scenario: &Scenario,
    events: &[TraceEvent],
    bound: u64,
) -> Result<Vec<Violation>, CheckError> {
    let Some(first) = events.first() else {
        return Err(CheckError::NoBoot);
    };
    let EventKind::Boot {
        scenario_digest,
        cores,
        asc,
        ownership,
        interrupts,
        ..
    } = &first.kind
    else {
        return Err(CheckError::NoBoot);
    };
    let expected = scenario.digest();
    if *scenario_digest != expected {
        return Err(CheckError::DigestMismatch {
            found: scenario_digest.clone(),
            expected,
        });
    }
    let mut irq = BTreeMap::new();
    for c in 0..*cores {
        for p in IntId::ppis() {
            irq.insert((p, Some(CoreId(c))), Irq::default());
        }
    }
    for s in IntId::spis() {
        irq.insert((s, None), Irq::default());
    }
    for i in interrupts {
        irq.insert(
            (i.intid, i.bank),
            Irq {
                group: i.group,
                enabled: i.enabled,
                priority: i.priority,
                affinity: i.affinity,
                activation: Activation::Inactive,
            },
        );
    }
    let mut table = Asc::new(scenario.platform.granule);
    table
        .configure(asc.clone(), Security::Secure)
        .map_err(|e| CheckError::Malformed {
            index: 0,
            message: e.to_string(),
        })?;
    let mut ck = Checker {
        scenario,
        bound,
        irq,
        records: Vec::new(),
        owners: BTreeMap::new(),
        cores: vec![CoreRec::default(); *cores as usize],
        asc: table,
        tainted: Vec::new(),
        intent: BTreeMap::new(),
        starving: BTreeMap::new(),
        delivered_now: BTreeSet::new(),
        out: Vec::new(),
        index: 0,
        step: first.step,
    };
    ck.snapshot(ownership, true);
    for (index, e) in events.iter().enumerate().skip(1) {
        ck.index = index;
        if e.step < ck.step {
            return Err(CheckError::Malformed {
                index,
                message: format!("step {} after step {}", e.step, ck.step),
            });
        }
        if e.step > ck.step {
            ck.tick(1);
            ck.delivered_now.clear();
            ck.tick(e.step - ck.step - 1);
            ck.step = e.step;
        }
        if matches!(e.kind, EventKind::RunEnd { .. }) {
            break;
        }
        ck.event(e)?;
    }
    Ok(ck.out)
}

fn range_contains(r: &MemRange, addr: u64, len: u64) -> bool {
    r.contains(addr, len)
}

impl Checker<'_> {
    fn flag(&mut self, class: Class, explanation: String) {
        self.flag_at(class, Severity::Error, self.index, explanation);
    }

    fn flag_at(&mut self, class: Class, severity: Severity, event: usize, explanation: String) {
        self.out.push(Violation {
            class,
            severity,
            step: self.step,
            event,
            explanation,
        });
    }

    fn bank_of(intid: IntId, bank: Option<CoreId>) -> Option<CoreId> {
        if intid.is_ppi() {
            bank
        } else {
            None
        }
    }

    fn irq_mut(&mut self, intid: IntId, bank: Option<CoreId>) -> Result<&mut Irq, CheckError> {
        let index = self.index;
        self.irq
            .get_mut(&(intid, Self::bank_of(intid, bank)))
            .ok_or(CheckError::Malformed {
                index,
                message: format!("interrupt {intid} bank {bank:?} is not modeled"),
            })
    }

    fn owners_of(&self, intid: IntId) -> &[DomainId] {
        self.owners.get(&intid).map_or(&[], |v| v.as_slice())
    }

    fn record(&self, d: DomainId) -> Option<&OwnershipRecord> {
        self.records.get(d.0 as usize)
    }

    fn cores_of(&self, d: DomainId) -> Vec<CoreId> {
        (0..self.cores.len() as u8)
            .map(CoreId)
            .filter(|c| self.cores[c.index()].occupant == Some(d))
            .collect()
    }

    fn resident(&self) -> BTreeSet<DomainId> {
        self.cores.iter().filter_map(|c| c.occupant).collect()
    }

    /// Routing of `intid` is confined to `owner`'s cores.
    fn routed_to_owner(&self, intid: IntId, owner: DomainId) -> Result<(), String> {
        let affinity = self.irq.get(&(intid, None)).and_then(|i| i.affinity);
        let cores = self.cores_of(owner);
        match affinity {
            None if cores.len() == self.cores.len() => Ok(()),
            None => Err(format!(
                "{intid} routes to any core while {owner} holds only {cores:?}"
            )),
            Some(c) if cores.contains(&c) => Ok(()),
            Some(c) => Err(format!(
                "{intid} routes to {c}, outside {owner}'s cores {cores:?}"
            )),
        }
    }

    fn snapshot(&mut self, records: &[OwnershipRecord], boot: bool) {
        self.records = records.to_vec();
        self.owners.clear();
        for r in records {
            for i in &r.intids {
                self.owners.entry(*i).or_default().push(r.id);
            }
        }
        if boot {
            for r in records {
                for c in &r.cores {
                    if let Some(rec) = self.cores.get_mut(c.index()) {
                        rec.occupant = Some(r.id);
                    }
                }
            }
        }
        let owners = self.owners.clone();
        self.intent
            .retain(|i, (o, _)| owners.get(i).is_some_and(|v| v == &[*o]));
        self.partition();
        for (intid, claimants) in &owners {
            let [owner] = claimants[..] else { continue };
            if self.cores_of(owner).is_empty() {
                continue;
            }
            if let Err(e) = self.routed_to_owner(*intid, owner) {
                self.flag(Class::G3, e);
            }
        }
    }

    fn partition(&mut self) {
        let p = &self.scenario.platform;
        let mut problems = Vec::new();
        for (intid, claimants) in &self.owners {
            if claimants.len() > 1 {
                problems.push(format!("{intid} is held by {claimants:?}"));
            }
        }
        let mut holders: BTreeMap<&str, Vec<DomainId>> = BTreeMap::new();
        for r in &self.records {
            let mut expected: BTreeSet<IntId> = BTreeSet::new();
            for h in &r.peripherals {
                if h.mode.is_owning() {
                    holders.entry(h.name.as_str()).or_default().push(r.id);
                }
                if let Some(x) = p.peripheral(&h.name) {
                    expected.extend(p.peripherals[x].intids.iter().copied());
                }
            }
            let actual: BTreeSet<IntId> = r.intids.iter().copied().collect();
            if actual != expected {
                problems.push(format!(
                    "{} holds interrupts {actual:?} but its peripherals carry {expected:?}",
                    r.id
                ));
            }
        }
        for (name, ds) in holders {
            if ds.len() > 1 {
                problems.push(format!("peripheral {name} is held by {ds:?}"));
            }
        }
        for msg in problems {
            self.flag(Class::Partition, msg);
        }
    }

    /// Advance `n` steps in which no further delivery happened.
    fn tick(&mut self, n: u64) {
        if n == 0 {
            return;
        }
        let mut live = BTreeSet::new();
        for (&(intid, bank), irq) in &self.irq {
            if bank.is_some() || irq.activation != Activation::Pending {
                continue;
            }
            let Some(&(owner, true)) = self.intent.get(&intid) else {
                continue;
            };
            let ready = (0..self.cores.len() as u8).map(CoreId).any(|c| {
                let rec = &self.cores[c.index()];
                rec.occupant == Some(owner)
                    && !rec.in_handler
                    && rec.active.is_none()
                    && irq.affinity.is_none_or(|a| a == c)
                    && !self.delivered_now.contains(&c)
            });
            if ready {
                live.insert(intid);
            }
        }
        self.starving.retain(|i, _| live.contains(i));
        let mut late = Vec::new();
        for intid in live {
            let s = self.starving.entry(intid).or_insert(Starvation {
                steps: 0,
                reported: false,
                since: self.index,
            });
            s.steps += n;
            if s.steps >= self.bound && !s.reported {
                s.reported = true;
                late.push((intid, s.since, s.steps));
            }
        }
        for (intid, since, steps) in late {
            self.flag_at(
                Class::G4,
                Severity::Error,
                since,
                format!("{intid} pending and enabled by its running owner for {steps} steps without delivery"),
            );
        }
    }

    fn consented(&self, d: &OwnershipRecord, region: usize) -> bool {
        let s = self.scenario;
        let Some(decl) = s.domain(&d.name) else {
            return false;
        };
        let Some(req) = s.domains[decl].shared.iter().find(|r| r.region == region) else {
            return false;
        };
        self.records.iter().any(|p| {
            p.id != d.id
                && p.state != DomainState::TornDown
                && s.domain(&p.name).is_some_and(|pd| {
                    req.peers.contains(&pd)
                        && s.domains[pd]
                            .shared
                            .iter()
                            .any(|r| r.region == region && r.peers.contains(&decl))
                })
        })
    }

    /// Whether `d` may touch `[addr, addr + len)` in the current state.
    fn entitled(&self, d: DomainId, addr: u64, len: u64, kind: AccessKind) -> bool {
        let Some(r) = self.record(d) else {
            return false;
        };
        if r.state == DomainState::TornDown {
            return false;
        }
        let p = &self.scenario.platform;
        if r.memory.iter().any(|m| range_contains(m, addr, len)) {
            return true;
        }
        for h in &r.peripherals {
            let Some(x) = p.peripheral(&h.name) else {
                continue;
            };
            if h.mode.is_owning() && range_contains(&p.peripherals[x].mmio, addr, len) {
                return true;
            }
        }
        if kind == AccessKind::Read {
            for name in &r.readable {
                let Some(x) = p.peripheral(name) else {
                    continue;
                };
                if range_contains(&p.peripherals[x].data_window(), addr, len) {
                    return true;
                }
            }
        }
        for (i, s) in p.shared_regions.iter().enumerate() {
            if range_contains(&s.range, addr, len) && self.consented(r, i) {
                return true;
            }
        }
        let w = p.gic.window();
        if addr >= w.start && addr + len <= w.end {
            let resident = self.resident();
            return resident.len() == 1
                && resident.contains(&d)
                && self.cores.iter().all(|c| c.occupant.is_some());
        }
        false
    }

    fn taint(&mut self, r: MemRange) {
        self.tainted.push(r);
    }

    fn untaint(&mut self, w: MemRange) {
        let mut out = Vec::new();
        for t in &self.tainted {
            if !t.overlaps(&w) {
                out.push(*t);
                continue;
            }
            if t.base < w.base {
                out.push(MemRange::new(t.base, w.base - t.base));
            }
            if w.end() < t.end() {
                out.push(MemRange::new(w.end(), t.end() - w.end()));
            }
        }
        self.tainted = out;
    }

    #[allow(clippy::too_many_arguments)]
    fn bus(
        &mut self,
        e: &TraceEvent,
        addr: u64,
        width: u8,
        access: AccessKind,
        value: u64,
        security: Security,
        denied: Option<crate::asc::DenyReason>,
    ) {
        let Some(core) = e.core else {
            self.flag(Class::Mem, "bus transaction without an issuing core".into());
            return;
        };
        let replay = self
            .asc
            .check(core, security, addr, width as u64, access)
            .err();
        if replay != denied {
            self.flag(
                Class::Mem,
                format!(
                    "{access:?} of {addr:#x} was {} but the configured map says {}",
                    denied.map_or("allowed".to_string(), |d| format!("denied ({d})")),
                    replay.map_or("allowed".to_string(), |d| format!("denied ({d})")),
                ),
            );
        }
        if denied.is_some() {
            return;
        }
        if security == Security::NonSecure {
            let ok = match e.domain {
                Some(d) => {
                    self.cores.get(core.index()).and_then(|c| c.occupant) == Some(d)
                        && self.entitled(d, addr, width as u64, access)
                }
                None => false,
            };
            if !ok {
                self.flag(
                    Class::Mem,
                    format!(
                        "{:?} on {core} reached {addr:#x} ({access:?}) outside its entitlement",
                        e.domain
                    ),
                );
            }
        }
        let span = MemRange::new(addr, width as u64);
        match access {
            AccessKind::Write => self.untaint(span),
            AccessKind::Read => {
                let leaked = (0..width as u64).any(|k| {
                    (value >> (8 * k)) & 0xFF != 0
                        && self.tainted.iter().any(|t| t.contains(addr + k, 1))
                });
                if leaked {
                    self.flag(
                        Class::Hygiene,
                        format!("read of {addr:#x} returned {value:#x} from memory freed without clearing"),
                    );
                }
            }
        }
    }

    fn event(&mut self, e: &TraceEvent) -> Result<(), CheckError> {
        match &e.kind {
            EventKind::IntConfig {
                intid,
                bank,
                field,
                new,
                by,
                ..
            } => {
                if let Actor::Domain(d) = by {
                    if !self.owners_of(*intid).contains(d) {
                        self.flag(
                            Class::G1,
                            format!(
                                "{d} changed {field:?} of {intid}, owned by {:?}",
                                self.owners_of(*intid)
                            ),
                        );
                    }
                    if *field == ConfigField::Enabled && self.owners_of(*intid) == [*d] {
                        self.intent.insert(*intid, (*d, *new != 0));
                    }
                } else if let Actor::Peripheral(p) = by {
                    self.flag(
                        Class::G1,
                        format!("peripheral {p} changed configuration of {intid}"),
                    );
                }
                let irq = self.irq_mut(*intid, *bank)?;
                match field {
                    ConfigField::Group => {
                        irq.group = if new & 1 == 1 {
                            Group::NonSecure
                        } else {
                            Group::Secure
                        }
                    }
                    ConfigField::Enabled => irq.enabled = *new != 0,
                    ConfigField::Priority => irq.priority = *new as u8,
                    ConfigField::Affinity => irq.affinity = decode_affinity(*new),
                    ConfigField::Trigger => {}
                }
            }
            EventKind::IntState {
                intid,
                bank,
                to,
                by,
                ..
            } => {
                match by {
                    Actor::Domain(d) => {
                        if intid.is_ppi() || !self.owners_of(*intid).contains(d) {
                            self.flag(
                                Class::G2,
                                format!(
                                    "{d} changed the state of {intid}, owned by {:?}",
                                    self.owners_of(*intid)
                                ),
                            );
                        }
                    }
                    Actor::Peripheral(src) => {
                        let legit = if intid.is_ppi() {
                            *intid == crate::gic::SECURE_TIMER_INTID && src == TIMER_SOURCE
                        } else {
                            self.scenario
                                .platform
                                .peripheral_of(*intid)
                                .is_some_and(|p| self.scenario.platform.peripherals[p].name == *src)
                        };
                        if !legit {
                            self.flag(
                                Class::G2,
                                format!("{src} asserted {intid}, which it does not drive"),
                            );
                        }
                    }
                    Actor::Monitor => {}
                }
                self.irq_mut(*intid, *bank)?.activation = *to;
                if !to.is_active() {
                    for c in &mut self.cores {
                        if c.active == Some(*intid) {
                            c.active = None;
                        }
                    }
                }
            }
            EventKind::InterruptDelivered { intid } | EventKind::InterruptEoi { intid }
                if e.core.is_none() =>
            {
                return Err(CheckError::Malformed {
                    index: self.index,
                    message: format!("{intid} event without a core"),
                });
            }
            EventKind::InterruptDelivered { intid } => {
                let core = e.core.expect("checked above");
                self.delivery_target(core, *intid, "delivered");
                self.delivered_now.insert(core);
                if let Some(c) = self.cores.get_mut(core.index()) {
                    c.in_handler = true;
                }
            }
            EventKind::InterruptAcknowledged { intid } => {
                let Some(core) = e.core else { return Ok(()) };
                if let Ok(i) = IntId::new(*intid) {
                    self.delivery_target(core, i, "acknowledged");
                    if let Some(c) = self.cores.get_mut(core.index()) {
                        c.active = Some(i);
                    }
                }
            }
            EventKind::InterruptEoi { .. } => {
                let core = e.core.expect("checked above");
                if let Some(c) = self.cores.get_mut(core.index()) {
                    c.active = None;
                }
            }
            EventKind::HandlerReturn {} => {
                if let Some(c) = e.core.and_then(|c| self.cores.get_mut(c.index())) {
                    c.in_handler = false;
                }
            }
            EventKind::ContextSwitch { to, cores, .. } => {
                for r in cores {
                    let Some(c) = self.cores.get_mut(r.core.index()) else {
                        return Err(CheckError::Malformed {
                            index: self.index,
                            message: format!("{} does not exist", r.core),
                        });
                    };
                    *c = CoreRec {
                        occupant: *to,
                        in_handler: r.in_handler,
                        active: r.active,
                    };
                }
            }
            EventKind::AscConfigured { regions } => {
                self.asc
                    .configure(regions.clone(), Security::Secure)
                    .map_err(|err| CheckError::Malformed {
                        index: self.index,
                        message: err.to_string(),
                    })?;
            }
            EventKind::OwnershipSnapshot { domains } => self.snapshot(domains, false),
            EventKind::Bus {
                addr,
                width,
                access,
                value,
                security,
                denied,
                ..
            } => self.bus(e, *addr, *width, *access, *value, *security, *denied),
            EventKind::Teardown { freed, .. } => {
                for r in freed {
                    self.taint(*r);
                }
            }
            EventKind::ResidualStateWarning { peripheral } => self.flag_at(
                Class::Hygiene,
                Severity::Warning,
                self.index,
                format!("{peripheral} changed hands with domain data still in it"),
            ),
            _ => {}
        }
        Ok(())
    }

    fn delivery_target(&mut self, core: CoreId, intid: IntId, what: &str) {
        let running = self.cores.get(core.index()).and_then(|c| c.occupant);
        let owners = self.owners_of(intid).to_vec();
        match running {
            Some(d) if owners.contains(&d) => {
                if owners.len() == 1 {
                    if let Err(e) = self.routed_to_owner(intid, d) {
                        self.flag(Class::G3, format!("{intid} {what} on {core}: {e}"));
                    }
                }
            }
            _ => self.flag(
                Class::G3,
                format!("{intid} {what} on {core} running {running:?}, owner {owners:?}"),
            ),
        }
    }
}

/// Number of error-severity violations.
pub fn errors(v: &[Violation]) -> usize {
    v.iter().filter(|v| v.severity == Severity::Error).count()
}
