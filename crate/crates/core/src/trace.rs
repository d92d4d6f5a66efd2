//! Trace events: the record every run produces and the checker consumes.
//! Serialized as one JSON object per line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::asc::{DenyReason, Region};
use crate::gic::{Activation, ConfigField, Group, IntId, StateCause};
use crate::ids::{AccessKind, CoreId, DomainId, MemRange, Security};
use crate::scenario::AccessMode;

pub const SCHEMA_VERSION: u32 = 1;

/// Who caused a change.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Monitor,
    Domain(DomainId),
    Peripheral(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainState {
    Ready,
    Running,
    Suspended,
    TornDown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldPeripheral {
    pub name: String,
    pub mode: AccessMode,
}

/// One domain's row of the ownership table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipRecord {
    pub id: DomainId,
    pub name: String,
    pub state: DomainState,
    pub scheduler: bool,
    pub cores: Vec<CoreId>,
    pub memory: Vec<MemRange>,
    pub peripherals: Vec<HeldPeripheral>,
    pub intids: Vec<IntId>,
    /// Peripherals whose data window this domain may read.
    pub readable: Vec<String>,
}

/// Configuration of one interrupt that differs from reset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrqConfig {
    pub intid: IntId,
    pub bank: Option<CoreId>,
    pub group: Group,
    pub enabled: bool,
    pub priority: u8,
    pub affinity: Option<CoreId>,
}

/// State a core resumes with after a switch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreResume {
    pub core: CoreId,
    pub in_handler: bool,
    pub active: Option<IntId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    Run,
    Timer,
    Yield,
    Launch,
    Suspend,
    Teardown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GicPath {
    Direct,
    Smc,
    Shim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoverTrigger {
    OwnerCede,
    UserAction,
    Release,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event_kind", rename_all = "snake_case")]
pub enum EventKind {
    Boot {
        schema: u32,
        scenario: String,
        scenario_digest: String,
        seed: u64,
        cores: u8,
        asc: Vec<Region>,
        ownership: Vec<OwnershipRecord>,
        interrupts: Vec<IrqConfig>,
    },
    DomainSetup {
        id: DomainId,
        bundle: String,
        measurement: String,
        memory: Vec<MemRange>,
    },
    SetupRefused {
        bundle: String,
        cause: String,
    },
    ContextSwitch {
        from: Option<DomainId>,
        to: Option<DomainId>,
        reason: SwitchReason,
        cores: Vec<CoreResume>,
    },
    TimerArmed {
        deadline: u64,
    },
    TimerExpiry {},
    MonitorCall {
        function: String,
        args: Vec<u64>,
        ret: u64,
        error: Option<String>,
    },
    AscConfigured {
        regions: Vec<Region>,
    },
    IntConfig {
        intid: IntId,
        bank: Option<CoreId>,
        field: ConfigField,
        old: u64,
        new: u64,
        by: Actor,
    },
    IntState {
        intid: IntId,
        bank: Option<CoreId>,
        from: Activation,
        to: Activation,
        cause: StateCause,
        by: Actor,
    },
    InterruptFired {
        intid: IntId,
        source: String,
    },
    InterruptDelivered {
        intid: IntId,
    },
    /// `intid` is 1023 for a spurious acknowledge.
    InterruptAcknowledged {
        intid: u16,
    },
    InterruptEoi {
        intid: IntId,
    },
    HandlerReturn {},
    ProtocolError {
        detail: String,
    },
    Bus {
        addr: u64,
        width: u8,
        access: AccessKind,
        value: u64,
        security: Security,
        denied: Option<DenyReason>,
        target: String,
    },
    GicAccess {
        path: GicPath,
        register: String,
        bank: Option<CoreId>,
        access: AccessKind,
        value: u64,
        result: u64,
    },
    ShimForwarded {
        addr: u64,
    },
    OwnershipSnapshot {
        domains: Vec<OwnershipRecord>,
    },
    Handover {
        peripheral: String,
        from: Option<DomainId>,
        to: Option<DomainId>,
        trigger: HandoverTrigger,
    },
    LedIndicator {
        peripheral: String,
        owner: Option<DomainId>,
    },
    ResidualStateWarning {
        peripheral: String,
    },
    Teardown {
        id: DomainId,
        freed: Vec<MemRange>,
    },
    MemoryZeroed {
        range: MemRange,
    },
    KeyDerived {
        id: DomainId,
        key: String,
    },
    Attested {
        subject: DomainId,
        measurement: String,
        peripherals: Vec<String>,
    },
    ProxySend {
        channel: String,
        len: u64,
    },
    ProxyRecv {
        channel: String,
        len: u64,
        from: DomainId,
    },
    ProxyError {
        channel: String,
        detail: String,
    },
    LockAcquire {
        register: String,
    },
    LockRelease {
        register: String,
    },
    CoreHalted {},
    Wfi {},
    Yield {},
    UserAction {
        action: String,
    },
    RunEnd {
        steps: u64,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub core: Option<CoreId>,
    pub domain: Option<DomainId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl TraceEvent {
    pub fn kind_name(&self) -> &'static str {
        kind_name(&self.kind)
    }
}

pub fn kind_name(kind: &EventKind) -> &'static str {
    use EventKind::*;
    match kind {
        Boot { .. } => "boot",
        DomainSetup { .. } => "domain_setup",
        SetupRefused { .. } => "setup_refused",
        ContextSwitch { .. } => "context_switch",
        TimerArmed { .. } => "timer_armed",
        TimerExpiry {} => "timer_expiry",
        MonitorCall { .. } => "monitor_call",
        AscConfigured { .. } => "asc_configured",
        IntConfig { .. } => "int_config",
        IntState { .. } => "int_state",
        InterruptFired { .. } => "interrupt_fired",
        InterruptDelivered { .. } => "interrupt_delivered",
        InterruptAcknowledged { .. } => "interrupt_acknowledged",
        InterruptEoi { .. } => "interrupt_eoi",
        HandlerReturn {} => "handler_return",
        ProtocolError { .. } => "protocol_error",
        Bus { .. } => "bus",
        GicAccess { .. } => "gic_access",
        ShimForwarded { .. } => "shim_forwarded",
        OwnershipSnapshot { .. } => "ownership_snapshot",
        Handover { .. } => "handover",
        LedIndicator { .. } => "led_indicator",
        ResidualStateWarning { .. } => "residual_state_warning",
        Teardown { .. } => "teardown",
        MemoryZeroed { .. } => "memory_zeroed",
        KeyDerived { .. } => "key_derived",
        Attested { .. } => "attested",
        ProxySend { .. } => "proxy_send",
        ProxyRecv { .. } => "proxy_recv",
        ProxyError { .. } => "proxy_error",
        LockAcquire { .. } => "lock_acquire",
        LockRelease { .. } => "lock_release",
        CoreHalted {} => "core_halted",
        Wfi {} => "wfi",
        Yield {} => "yield",
        UserAction { .. } => "user_action",
        RunEnd { .. } => "run_end",
    }
}

/// Append-only event log of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
    step: u64,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn emit(&mut self, core: Option<CoreId>, domain: Option<DomainId>, kind: EventKind) {
        self.events.push(TraceEvent {
            step: self.step,
            core,
            domain,
            kind,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Parse a JSON-lines trace. Errors carry the 1-based line number.
pub fn from_jsonl(text: &str) -> Result<Vec<TraceEvent>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

/// Requests answered over a shared-region mailbox: a receive by `a` of a
/// message from `b` on a channel where `b` earlier received from `a`.
pub fn proxy_round_trips(events: &[TraceEvent]) -> u64 {
    let mut open: BTreeMap<(&str, DomainId, DomainId), u64> = BTreeMap::new();
    let mut trips = 0;
    for e in events {
        if let (EventKind::ProxyRecv { channel, from, .. }, Some(me)) = (&e.kind, e.domain) {
            match open.get_mut(&(channel.as_str(), me, *from)) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    trips += 1;
                }
                _ => *open.entry((channel.as_str(), *from, me)).or_default() += 1,
            }
        }
    }
    trips
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip_through_json() {
        let mut t = Trace::new();
        t.set_step(7);
        t.emit(
            Some(CoreId(1)),
            Some(DomainId(2)),
            EventKind::IntConfig {
                intid: IntId::new(34).unwrap(),
                bank: None,
                field: ConfigField::Enabled,
                old: 0,
                new: 1,
                by: Actor::Domain(DomainId(2)),
            },
        );
        t.emit(None, None, EventKind::CoreHalted {});
        t.emit(
            None,
            None,
            EventKind::Bus {
                addr: u64::MAX - 3,
                width: 4,
                access: AccessKind::Read,
                value: u64::MAX,
                security: Security::NonSecure,
                denied: Some(DenyReason::CoreFilter),
                target: "dram".into(),
            },
        );
        let text = to_jsonl(t.events());
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"event_kind\":\"int_config\""));
        assert_eq!(from_jsonl(&text).unwrap(), t.events());
    }

    fn recv(t: &mut Trace, me: u32, from: u32) {
        t.emit(
            None,
            Some(DomainId(me)),
            EventKind::ProxyRecv {
                channel: "shm".into(),
                len: 1,
                from: DomainId(from),
            },
        );
    }

    #[test]
    fn round_trip_needs_a_reply() {
        let mut t = Trace::new();
        recv(&mut t, 0, 1);
        assert_eq!(proxy_round_trips(t.events()), 0);
        recv(&mut t, 0, 1);
        assert_eq!(proxy_round_trips(t.events()), 0);
        recv(&mut t, 1, 0);
        recv(&mut t, 1, 0);
        recv(&mut t, 1, 0);
        assert_eq!(proxy_round_trips(t.events()), 2);
    }
}
