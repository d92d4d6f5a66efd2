//! The secure monitor: domain lifecycle, ownership of peripherals and
//! interrupts, world switches, and reprogramming of the interrupt and
//! address space controllers whenever the set of running domains changes.

mod filter;
mod measure;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::asc::{Permission, Region};
use crate::gic::{
    ConfigField, GicState, IntId, PendingSource, DEFAULT_PRIORITY, SECURE_TIMER_INTID,
};
use crate::ids::{AccessKind, CoreId, DomainId, MemRange, Security};
use crate::platform::{emit_changes, BusTxn, CpuContext, Hardware};
use crate::scenario::{AccessMode, PeripheralKind, Scenario, UserActionKind};
use crate::trace::{
    Actor, CoreResume, DomainState, EventKind, HandoverTrigger, HeldPeripheral, IrqConfig,
    OwnershipRecord, SwitchReason, Trace, SCHEMA_VERSION,
};

pub use filter::access_mask;
pub use measure::{binary_digest, canonical_manifest, derive_key, measure};

pub const SMC_SETUP: u32 = 0xC200_0001;
pub const SMC_RUN: u32 = 0xC200_0002;
pub const SMC_YIELD: u32 = 0xC200_0003;
pub const SMC_TEARDOWN: u32 = 0xC200_0004;
pub const SMC_GIC_ACCESS: u32 = 0xC200_0005;
pub const SMC_DERIVE_KEY: u32 = 0xC200_0006;
pub const SMC_ATTEST: u32 = 0xC200_0007;
pub const SMC_CEDE: u32 = 0xC200_0008;
pub const SMC_SHARE_RO: u32 = 0xC200_0009;

/// Argument meaning "no domain".
pub const NONE: u64 = u64::MAX;
pub const RET_OK: u64 = 0;
pub const RET_FAULT: u64 = u64::MAX;
pub const RUN_TEMPORAL: u64 = 0;
pub const RUN_SPATIAL: u64 = 1;

/// Source name recorded for secure timer assertions.
pub const TIMER_SOURCE: &str = "secure_timer";
const TIMER_PRIORITY: u64 = 0x00;

pub fn function_name(f: u32) -> String {
    match f {
        SMC_SETUP => "setup".into(),
        SMC_RUN => "run".into(),
        SMC_YIELD => "yield".into(),
        SMC_TEARDOWN => "teardown".into(),
        SMC_GIC_ACCESS => "gic_access".into(),
        SMC_DERIVE_KEY => "derive_key".into(),
        SMC_ATTEST => "attest".into(),
        SMC_CEDE => "cede".into(),
        SMC_SHARE_RO => "share_readonly".into(),
        other => format!("{other:#x}"),
    }
}

/// Deliberate monitor defects, one per checked guarantee, used to show
/// that the trace checker catches each class of bug.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Filtered configuration writes ignore ownership.
    SkipAccessMask,
    /// Filtered activation-state writes ignore ownership.
    SkipStateMask,
    /// Owned interrupts are not routed to the owner's cores.
    SkipAffinityPin,
    /// Pending non-secure interrupts never reach a core.
    SuppressDelivery,
    /// Regions of the outgoing domain stay mapped after a switch.
    SkipAscOnSwitch,
    /// Busy peripherals are assigned a second time.
    DoubleAssign,
    /// Torn-down memory is returned without being cleared.
    SkipZeroing,
}

impl Fault {
    pub const ALL: [Fault; 7] = [
        Fault::SkipAccessMask,
        Fault::SkipStateMask,
        Fault::SkipAffinityPin,
        Fault::SuppressDelivery,
        Fault::SkipAscOnSwitch,
        Fault::DoubleAssign,
        Fault::SkipZeroing,
    ];

    fn bit(self) -> u8 {
        1 << Fault::ALL.iter().position(|f| *f == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults(u8);

impl Faults {
    pub fn none() -> Self {
        Faults(0)
    }

    #[cfg(feature = "fault-injection")]
    pub fn with(self, f: Fault) -> Self {
        Faults(self.0 | f.bit())
    }

    pub fn has(self, f: Fault) -> bool {
        self.0 & f.bit() != 0
    }
}

/// Interrupt configuration parked while the owner is not running.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SavedIrq {
    pub enabled: bool,
    pub priority: u8,
    pub affinity: Option<CoreId>,
    pub pending: bool,
}

impl Default for SavedIrq {
    fn default() -> Self {
        SavedIrq {
            enabled: false,
            priority: DEFAULT_PRIORITY,
            affinity: None,
            pending: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Temporal,
    Spatial,
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub id: DomainId,
    /// Index of the declaration in the scenario.
    pub decl: usize,
    pub name: String,
    pub measurement: [u8; 32],
    pub state: DomainState,
    pub scheduler: bool,
    pub memory: Vec<MemRange>,
    pub peripherals: BTreeMap<usize, AccessMode>,
    pub intids: BTreeSet<IntId>,
    pub readable: BTreeSet<usize>,
    pub saved_ctx: Vec<CpuContext>,
    pub saved_irq: BTreeMap<IntId, SavedIrq>,
    pub run: Option<RunKind>,
}

impl Domain {
    pub fn live(&self) -> bool {
        self.state != DomainState::TornDown
    }
}

#[derive(Clone, Debug, Default)]
pub struct PeripheralState {
    pub owner: Option<DomainId>,
    pub mode: Option<AccessMode>,
    pub readers: BTreeSet<DomainId>,
    pub waiting: BTreeSet<DomainId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timer {
    pub deadline: u64,
    pub core: CoreId,
    pub domain: DomainId,
}

type Outcome = Result<u64, String>;

pub struct Monitor {
    scenario: Arc<Scenario>,
    domains: Vec<Domain>,
    periph: Vec<PeripheralState>,
    intid_owner: BTreeMap<IntId, DomainId>,
    free: Vec<MemRange>,
    resident_prev: BTreeSet<DomainId>,
    timer: Option<Timer>,
    faults: Faults,
}

fn fault<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

impl Monitor {
    pub fn new(scenario: Arc<Scenario>, faults: Faults) -> Self {
        let p = &scenario.platform;
        let mut free = vec![p.dram];
        for r in &p.shared_regions {
            free = carve(&free, r.range);
        }
        Monitor {
            periph: vec![PeripheralState::default(); p.peripherals.len()],
            domains: Vec::new(),
            intid_owner: BTreeMap::new(),
            free,
            resident_prev: BTreeSet::new(),
            timer: None,
            faults,
            scenario,
        }
    }

    pub fn faults(&self) -> Faults {
        self.faults
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain(&self, id: DomainId) -> Option<&Domain> {
        self.domains.get(id.0 as usize)
    }

    pub fn peripheral_state(&self, i: usize) -> &PeripheralState {
        &self.periph[i]
    }

    pub fn owner_of(&self, intid: IntId) -> Option<DomainId> {
        self.intid_owner.get(&intid).copied()
    }

    pub fn free_memory(&self) -> &[MemRange] {
        &self.free
    }

    pub fn timer(&self) -> Option<Timer> {
        self.timer
    }

    /// Latest live domain created from declaration `decl`.
    pub fn resolve(&self, decl: usize) -> Option<DomainId> {
        self.domains
            .iter()
            .rev()
            .find(|d| d.decl == decl && d.live())
            .map(|d| d.id)
    }

    fn live(&self, arg: u64) -> Result<DomainId, String> {
        match self.domains.get(arg as usize) {
            Some(d) if d.live() => Ok(d.id),
            Some(d) => fault(format!("{} is torn down", d.id)),
            None => fault(format!("no domain {arg}")),
        }
    }

    fn dom(&mut self, id: DomainId) -> &mut Domain {
        &mut self.domains[id.0 as usize]
    }

    /// Bring up the platform: monitor-owned interrupts, the scheduler
    /// domain on its cores, and the initial address map.
    pub fn boot(&mut self, hw: &mut Hardware, trace: &mut Trace, seed: u64) -> Result<(), String> {
        let scenario = self.scenario.clone();
        let decl = scenario.scheduler();
        let spec = &scenario.domains[decl];
        let gic = &mut hw.gic;
        for core in 0..hw.cores.len() as u8 {
            for ppi in IntId::ppis() {
                let bank = Some(CoreId(core));
                gic.set_config(ppi, bank, ConfigField::Group, 0)
                    .map_err(|e| e.to_string())?;
            }
            let bank = Some(CoreId(core));
            gic.set_config(
                SECURE_TIMER_INTID,
                bank,
                ConfigField::Priority,
                TIMER_PRIORITY,
            )
            .map_err(|e| e.to_string())?;
            gic.set_config(SECURE_TIMER_INTID, bank, ConfigField::Enabled, 1)
                .map_err(|e| e.to_string())?;
        }
        let memory = spec.memory.expect("scheduler placement is validated");
        self.free = carve(&self.free, memory);
        let id = self.new_domain(decl, vec![memory]);
        for r in &spec.peripherals {
            if r.mode.is_owning() {
                self.assign(id, r.peripheral, r.mode);
            }
        }
        let d = self.dom(id);
        d.state = DomainState::Running;
        d.run = Some(RunKind::Temporal);
        place(hw, id, &spec.cores, Vec::new(), &mut Vec::new());
        let mut quiet = Trace::new();
        self.reconcile(hw, &mut quiet);
        let interrupts = hw
            .gic
            .descriptors()
            .filter(|(_, d)| {
                d.group != crate::gic::Group::NonSecure
                    || d.enabled
                    || d.priority != DEFAULT_PRIORITY
                    || d.affinity.is_some()
            })
            .map(|(bank, d)| IrqConfig {
                intid: d.intid,
                bank,
                group: d.group,
                enabled: d.enabled,
                priority: d.priority,
                affinity: d.affinity,
            })
            .collect();
        trace.emit(
            None,
            None,
            EventKind::Boot {
                schema: SCHEMA_VERSION,
                scenario: scenario.name.clone(),
                scenario_digest: scenario.digest(),
                seed,
                cores: scenario.platform.cores,
                asc: hw.asc.regions().to_vec(),
                ownership: self.ownership_records(hw),
                interrupts,
            },
        );
        Ok(())
    }

    fn new_domain(&mut self, decl: usize, memory: Vec<MemRange>) -> DomainId {
        let scenario = self.scenario.clone();
        let spec = &scenario.domains[decl];
        let canonical = canonical_manifest(spec, &scenario.platform, &scenario);
        let id = DomainId(self.domains.len() as u32);
        self.domains.push(Domain {
            id,
            decl,
            name: spec.name.clone(),
            measurement: measure(&spec.bundle, &canonical),
            state: DomainState::Ready,
            scheduler: spec.scheduler,
            memory,
            peripherals: BTreeMap::new(),
            intids: BTreeSet::new(),
            readable: BTreeSet::new(),
            saved_ctx: Vec::new(),
            saved_irq: BTreeMap::new(),
            run: None,
        });
        id
    }

    /// Give `id` peripheral `p` and its interrupts.
    fn assign(&mut self, id: DomainId, p: usize, mode: AccessMode) {
        let intids = self.scenario.platform.peripherals[p].intids.clone();
        let st = &mut self.periph[p];
        st.owner = Some(id);
        st.mode = Some(mode);
        st.waiting.remove(&id);
        let d = self.dom(id);
        d.peripherals.insert(p, mode);
        for i in &intids {
            d.intids.insert(*i);
            d.saved_irq.insert(*i, SavedIrq::default());
        }
        for i in intids {
            self.intid_owner.insert(i, id);
        }
    }

    /// Take peripheral `p` away from whoever holds it and reset it.
    fn unassign(&mut self, hw: &mut Hardware, trace: &mut Trace, p: usize, at: Option<CoreId>) {
        let intids = self.scenario.platform.peripherals[p].intids.clone();
        let holder = self.periph[p].owner.take();
        self.periph[p].mode = None;
        for d in &mut self.domains {
            if d.peripherals.remove(&p).is_some() || Some(d.id) == holder {
                for i in &intids {
                    d.intids.remove(i);
                    d.saved_irq.remove(i);
                }
            }
        }
        for r in std::mem::take(&mut self.periph[p].readers) {
            self.dom(r).readable.remove(&p);
        }
        for i in intids {
            self.intid_owner.remove(&i);
            self.reset_interrupt(hw, trace, i, at);
        }
    }

    fn reset_interrupt(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        i: IntId,
        at: Option<CoreId>,
    ) {
        let changes = hw.gic.reset_interrupt(i, None).unwrap_or_default();
        emit_changes(trace, at, None, &changes, &Actor::Monitor);
        for d in &mut self.domains {
            for ctx in &mut d.saved_ctx {
                if ctx.gic_active == Some(i) {
                    ctx.gic_active = None;
                }
            }
        }
    }

    pub fn smc(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        function: u32,
        args: [u64; 4],
    ) -> u64 {
        let caller = hw
            .occupant(core)
            .expect("monitor calls come from a running domain");
        let result = match function {
            SMC_SETUP => self.setup(hw, trace, core, caller, args),
            SMC_RUN => self.run(hw, trace, core, caller, args),
            SMC_YIELD => self.yield_core(hw, trace, core, caller),
            SMC_TEARDOWN => self.live(args[0]).and_then(|target| {
                if target != caller {
                    return fault(
                        "teardown can only be requested by the domain itself or the user",
                    );
                }
                self.teardown(hw, trace, Some(core), target).map(|_| RET_OK)
            }),
            SMC_GIC_ACCESS => {
                let kind = if args[1] == 0 {
                    AccessKind::Read
                } else {
                    AccessKind::Write
                };
                self.gic_access(
                    hw,
                    trace,
                    core,
                    args[0],
                    kind,
                    args[2],
                    crate::trace::GicPath::Smc,
                )
            }
            SMC_DERIVE_KEY => self.key(trace, core, caller, args[0]),
            SMC_ATTEST => self.attest(trace, core, caller, args[0]),
            SMC_CEDE => self.cede(hw, trace, core, caller, args[0], args[1]),
            SMC_SHARE_RO => self.share_readonly(hw, trace, core, caller, args[0], args[1]),
            other => fault(format!("unknown function {other:#x}")),
        };
        let (ret, error) = match result {
            Ok(v) => (v, None),
            Err(e) => (RET_FAULT, Some(e)),
        };
        trace.emit(
            Some(core),
            Some(caller),
            EventKind::MonitorCall {
                function: function_name(function),
                args: args.to_vec(),
                ret,
                error,
            },
        );
        ret
    }

    fn setup(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        caller: DomainId,
        args: [u64; 4],
    ) -> Outcome {
        if !self.domains[caller.0 as usize].scheduler {
            return fault("only the scheduler may set up domains");
        }
        let scenario = self.scenario.clone();
        let Some(spec) = scenario.domains.get(args[0] as usize) else {
            return fault(format!("no bundle {}", args[0]));
        };
        if spec.scheduler {
            return fault("the scheduler bundle cannot be set up again");
        }
        let refuse = |trace: &mut Trace, cause: String| {
            trace.emit(
                Some(core),
                Some(caller),
                EventKind::SetupRefused {
                    bundle: spec.name.clone(),
                    cause: cause.clone(),
                },
            );
            Err(cause)
        };
        if let Some(expected) = spec.binary_digest {
            if binary_digest(&spec.bundle) != expected {
                return refuse(trace, "binary digest mismatch".into());
            }
        }
        for r in &spec.peripherals {
            let st = &self.periph[r.peripheral];
            let busy = matches!(r.mode, AccessMode::Exclusive | AccessMode::Multiplexing)
                && st.owner.is_some();
            if busy && !self.faults.has(Fault::DoubleAssign) {
                let name = &scenario.platform.peripherals[r.peripheral].name;
                return refuse(trace, format!("peripheral busy: {name}"));
            }
        }
        let granule = scenario.platform.granule;
        let memory = if args[2] != 0 {
            let m = MemRange::new(args[1], args[2]);
            let fits = self.free.iter().any(|f| f.contains(m.base, m.size));
            if !m.base.is_multiple_of(granule)
                || !m.size.is_multiple_of(granule)
                || !fits
                || m.size < spec.memory_demand
            {
                return refuse(trace, format!("placement {m} unavailable"));
            }
            m
        } else {
            let size = spec.memory_demand.div_ceil(granule) * granule;
            match self.free.iter().find(|f| f.size >= size) {
                Some(f) => MemRange::new(f.base, size),
                None => return refuse(trace, "out of memory".into()),
            }
        };
        self.free = carve(&self.free, memory);
        let id = self.new_domain(args[0] as usize, vec![memory]);
        for r in &spec.peripherals {
            match r.mode {
                AccessMode::Exclusive | AccessMode::Multiplexing => {
                    if let Some(prev) = self.periph[r.peripheral].owner {
                        // Only reachable with the double-assignment defect: the
                        // earlier holder keeps its record.
                        let _ = prev;
                        let intids = scenario.platform.peripherals[r.peripheral].intids.clone();
                        let d = self.dom(id);
                        d.peripherals.insert(r.peripheral, r.mode);
                        d.intids.extend(intids.iter().copied());
                        for i in intids {
                            d.saved_irq.insert(i, SavedIrq::default());
                        }
                        continue;
                    }
                    self.assign(id, r.peripheral, r.mode)
                }
                AccessMode::Handover => {
                    if self.periph[r.peripheral].owner.is_none() {
                        self.assign(id, r.peripheral, r.mode);
                    } else {
                        self.periph[r.peripheral].waiting.insert(id);
                    }
                }
                AccessMode::ReadOnly | AccessMode::Proxy => {}
            }
        }
        let d = &self.domains[id.0 as usize];
        trace.emit(
            Some(core),
            Some(caller),
            EventKind::DomainSetup {
                id,
                bundle: d.name.clone(),
                measurement: hex::encode(d.measurement),
                memory: d.memory.clone(),
            },
        );
        self.reconcile(hw, trace);
        Ok(id.0 as u64)
    }

    fn run(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        caller: DomainId,
        args: [u64; 4],
    ) -> Outcome {
        if !self.domains[caller.0 as usize].scheduler {
            return fault("only the scheduler may run domains");
        }
        let target = self.live(args[0])?;
        if target == caller {
            return fault("the scheduler is already running");
        }
        if self.domains[target.0 as usize].state == DomainState::Running {
            return fault(format!("{target} is already running"));
        }
        let mode = self.scenario.mode;
        match args[1] {
            RUN_TEMPORAL => {
                if !mode.allows_temporal() {
                    return fault("temporal sharing is disabled in this scenario");
                }
                if args[2] == 0 {
                    return fault("budget must be positive");
                }
                let cores = hw.cores_of(caller);
                self.switch(
                    hw,
                    trace,
                    Some(core),
                    caller,
                    target,
                    &cores,
                    SwitchReason::Run,
                );
                let d = self.dom(target);
                d.run = Some(RunKind::Temporal);
                let timer = Timer {
                    deadline: trace.step() + args[2],
                    core: cores[0],
                    domain: target,
                };
                self.timer = Some(timer);
                trace.emit(
                    Some(core),
                    Some(caller),
                    EventKind::TimerArmed {
                        deadline: timer.deadline,
                    },
                );
            }
            RUN_SPATIAL => {
                if !mode.allows_spatial() {
                    return fault("spatial sharing is disabled in this scenario");
                }
                let mask = args[2];
                let n = hw.cores.len() as u32;
                if mask == 0 || (n < 64 && mask >> n != 0) {
                    return fault(format!("core mask {mask:#b} names no or missing cores"));
                }
                let cores: Vec<CoreId> = (0..n as u8)
                    .filter(|c| mask >> c & 1 == 1)
                    .map(CoreId)
                    .collect();
                if let Some(c) = cores.iter().find(|c| hw.occupant(**c).is_some()) {
                    return fault(format!("{c} is occupied"));
                }
                let saved = std::mem::take(&mut self.dom(target).saved_ctx);
                let mut dropped = Vec::new();
                let resume = place(hw, target, &cores, saved, &mut dropped);
                self.deactivate_dropped(hw, trace, Some(core), dropped);
                let d = self.dom(target);
                d.state = DomainState::Running;
                d.run = Some(RunKind::Spatial);
                trace.emit(
                    Some(core),
                    Some(caller),
                    EventKind::ContextSwitch {
                        from: None,
                        to: Some(target),
                        reason: SwitchReason::Launch,
                        cores: resume,
                    },
                );
                self.reconcile(hw, trace);
            }
            other => return fault(format!("unknown run mode {other}")),
        }
        Ok(RET_OK)
    }

    /// Replace `from` by `to` on `cores`, saving and restoring contexts.
    #[allow(clippy::too_many_arguments)]
    fn switch(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        from: DomainId,
        to: DomainId,
        cores: &[CoreId],
        reason: SwitchReason,
    ) {
        let saved = save_out(hw, cores);
        let f = self.dom(from);
        if f.live() {
            f.saved_ctx = saved;
            f.state = DomainState::Suspended;
        }
        let incoming = std::mem::take(&mut self.dom(to).saved_ctx);
        let mut dropped = Vec::new();
        let resume = place(hw, to, cores, incoming, &mut dropped);
        self.deactivate_dropped(hw, trace, at, dropped);
        self.dom(to).state = DomainState::Running;
        trace.emit(
            at,
            None,
            EventKind::ContextSwitch {
                from: Some(from),
                to: Some(to),
                reason,
                cores: resume,
            },
        );
        self.reconcile(hw, trace);
    }

    /// Contexts that found no core lose their in-service interrupt.
    fn deactivate_dropped(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        dropped: Vec<CpuContext>,
    ) {
        for ctx in dropped {
            let Some(i) = ctx.gic_active else { continue };
            let reg =
                crate::gic::GicRegisterId::containing(crate::gic::RegisterClass::Icactiver, i);
            let Some(field) = reg.field_of(i) else {
                continue;
            };
            let word = hw.gic.read_state(reg, None) & !reg.field_mask(field);
            let changes = hw.gic.store_state(reg, None, word);
            emit_changes(trace, at, None, &changes, &Actor::Monitor);
        }
    }

    fn scheduler_id(&self) -> DomainId {
        self.domains
            .iter()
            .find(|d| d.scheduler)
            .map(|d| d.id)
            .expect("booted")
    }

    fn yield_core(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        caller: DomainId,
    ) -> Outcome {
        let d = &self.domains[caller.0 as usize];
        if d.scheduler {
            return Ok(RET_OK);
        }
        let cores = hw.cores_of(caller);
        match d.run {
            Some(RunKind::Temporal) => {
                self.timer = None;
                let sched = self.scheduler_id();
                self.switch(
                    hw,
                    trace,
                    Some(core),
                    caller,
                    sched,
                    &cores,
                    SwitchReason::Yield,
                );
            }
            _ => self.suspend(hw, trace, Some(core), caller, &cores, SwitchReason::Suspend),
        }
        Ok(RET_OK)
    }

    fn suspend(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        id: DomainId,
        cores: &[CoreId],
        reason: SwitchReason,
    ) {
        let saved = save_out(hw, cores);
        let d = self.dom(id);
        if d.live() {
            d.saved_ctx = saved;
            d.state = DomainState::Suspended;
        }
        trace.emit(
            at,
            None,
            EventKind::ContextSwitch {
                from: Some(id),
                to: None,
                reason,
                cores: cores
                    .iter()
                    .map(|&core| CoreResume {
                        core,
                        in_handler: false,
                        active: None,
                    })
                    .collect(),
            },
        );
        self.reconcile(hw, trace);
    }

    /// Secure timer deadline reached: take the secure interrupt, then hand
    /// the cores back to the scheduler.
    pub fn on_timer(&mut self, hw: &mut Hardware, trace: &mut Trace) {
        let Some(t) = self.timer.take() else { return };
        let core = t.core;
        trace.emit(Some(core), Some(t.domain), EventKind::TimerExpiry {});
        let bank = Some(core);
        let mut changes = Vec::new();
        changes.extend(
            hw.gic
                .fire(SECURE_TIMER_INTID, bank, PendingSource::Peripheral)
                .ok()
                .flatten(),
        );
        emit_changes(
            trace,
            Some(core),
            None,
            &changes,
            &Actor::Peripheral(TIMER_SOURCE.into()),
        );
        let parked = hw.gic.cpu_mut(core).and_then(|c| c.active.take());
        let mut taken = Vec::new();
        if let Ok(c) = hw.gic.acknowledge(core, SECURE_TIMER_INTID) {
            taken.push(c);
        }
        if let Ok(c) = hw.gic.end_of_interrupt(core, SECURE_TIMER_INTID) {
            taken.push(c);
        }
        if let Some(cpu) = hw.gic.cpu_mut(core) {
            cpu.active = parked;
        }
        emit_changes(trace, Some(core), None, &taken, &Actor::Monitor);
        let d = &self.domains[t.domain.0 as usize];
        if d.live() && d.state == DomainState::Running && d.run == Some(RunKind::Temporal) {
            let cores = hw.cores_of(t.domain);
            let sched = self.scheduler_id();
            self.switch(
                hw,
                trace,
                Some(core),
                t.domain,
                sched,
                &cores,
                SwitchReason::Timer,
            );
        }
    }

    pub fn teardown(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        id: DomainId,
    ) -> Result<(), String> {
        let d = &self.domains[id.0 as usize];
        if d.scheduler {
            return fault("the scheduler cannot be torn down");
        }
        if !d.live() {
            return fault(format!("{id} is already torn down"));
        }
        let cores = hw.cores_of(id);
        let run = d.run;
        let temporal = run == Some(RunKind::Temporal) && !cores.is_empty();
        if temporal {
            self.timer = None;
        }
        self.dom(id).state = DomainState::TornDown;
        if temporal {
            let sched = self.scheduler_id();
            let saved = save_out(hw, &cores);
            drop(saved);
            let incoming = std::mem::take(&mut self.dom(sched).saved_ctx);
            let mut dropped = Vec::new();
            let resume = place(hw, sched, &cores, incoming, &mut dropped);
            self.deactivate_dropped(hw, trace, at, dropped);
            self.dom(sched).state = DomainState::Running;
            trace.emit(
                at,
                None,
                EventKind::ContextSwitch {
                    from: Some(id),
                    to: Some(sched),
                    reason: SwitchReason::Teardown,
                    cores: resume,
                },
            );
        } else if !cores.is_empty() {
            drop(save_out(hw, &cores));
            trace.emit(
                at,
                None,
                EventKind::ContextSwitch {
                    from: Some(id),
                    to: None,
                    reason: SwitchReason::Teardown,
                    cores: cores
                        .iter()
                        .map(|&core| CoreResume {
                            core,
                            in_handler: false,
                            active: None,
                        })
                        .collect(),
                },
            );
        }
        let held: Vec<usize> = self.domains[id.0 as usize]
            .peripherals
            .keys()
            .copied()
            .collect();
        for p in held {
            if self.periph[p].owner == Some(id) {
                self.unassign(hw, trace, p, at);
            } else {
                // Second claimant under the double-assignment defect.
                let intids = self.scenario.platform.peripherals[p].intids.clone();
                let d = self.dom(id);
                d.peripherals.remove(&p);
                for i in intids {
                    d.intids.remove(&i);
                }
            }
        }
        for st in &mut self.periph {
            st.readers.remove(&id);
            st.waiting.remove(&id);
        }
        let d = self.dom(id);
        d.readable.clear();
        d.saved_ctx.clear();
        d.saved_irq.clear();
        let freed = std::mem::take(&mut d.memory);
        for m in &freed {
            if !self.faults.has(Fault::SkipZeroing) {
                hw.mem.zero(*m);
                trace.emit(at, None, EventKind::MemoryZeroed { range: *m });
            }
            self.free = release(&self.free, *m);
        }
        trace.emit(at, None, EventKind::Teardown { id, freed });
        self.reconcile(hw, trace);
        Ok(())
    }

    fn key(&mut self, trace: &mut Trace, core: CoreId, caller: DomainId, arg: u64) -> Outcome {
        let target = if arg == NONE { caller } else { self.live(arg)? };
        if target != caller {
            return fault("a domain may only derive its own key");
        }
        let d = &self.domains[caller.0 as usize];
        let key = derive_key(&self.scenario.platform.device_key, &d.measurement);
        trace.emit(
            Some(core),
            Some(caller),
            EventKind::KeyDerived {
                id: caller,
                key: hex::encode(key),
            },
        );
        Ok(measure::word(&key))
    }

    fn attest(&mut self, trace: &mut Trace, core: CoreId, caller: DomainId, arg: u64) -> Outcome {
        let subject = self.live(arg)?;
        let d = &self.domains[subject.0 as usize];
        let names = &self.scenario.platform.peripherals;
        trace.emit(
            Some(core),
            Some(caller),
            EventKind::Attested {
                subject,
                measurement: hex::encode(d.measurement),
                peripherals: d
                    .peripherals
                    .keys()
                    .filter(|p| self.periph[**p].owner == Some(subject))
                    .map(|p| names[*p].name.clone())
                    .collect(),
            },
        );
        Ok(measure::word(&d.measurement))
    }

    fn peripheral_arg(&self, arg: u64) -> Result<usize, String> {
        if (arg as usize) < self.periph.len() {
            Ok(arg as usize)
        } else {
            fault(format!("no peripheral {arg}"))
        }
    }

    fn cede(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        caller: DomainId,
        p: u64,
        to: u64,
    ) -> Outcome {
        let p = self.peripheral_arg(p)?;
        if self.periph[p].owner != Some(caller) {
            return fault("only the owner may cede a peripheral");
        }
        if to == NONE {
            self.transfer(hw, trace, Some(core), p, None, HandoverTrigger::Release);
            return Ok(RET_OK);
        }
        let to = self.live(to)?;
        self.check_handover(p, to)?;
        self.transfer(
            hw,
            trace,
            Some(core),
            p,
            Some(to),
            HandoverTrigger::OwnerCede,
        );
        Ok(RET_OK)
    }

    fn check_handover(&self, p: usize, to: DomainId) -> Result<(), String> {
        let spec = &self.scenario.platform.peripherals[p];
        if !spec.hot_plug {
            return fault(format!("{} is not hot-plug capable", spec.name));
        }
        if let Some(mode) = self.periph[p].mode {
            if mode != AccessMode::Handover {
                return fault(format!("{} is held in {mode} mode", spec.name));
            }
        }
        let decl = self.domains[to.0 as usize].decl;
        if self.scenario.domains[decl].request(p) != Some(AccessMode::Handover) {
            return fault(format!("{to} did not request {} for handover", spec.name));
        }
        if self.periph[p].owner == Some(to) {
            return fault(format!("{to} already owns {}", spec.name));
        }
        Ok(())
    }

    /// Software reset of peripheral `p` followed by a change of owner.
    fn transfer(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        p: usize,
        to: Option<DomainId>,
        trigger: HandoverTrigger,
    ) {
        let scenario = self.scenario.clone();
        let spec = &scenario.platform.peripherals[p];
        let from = self.periph[p].owner;
        let was_handover = self.periph[p].mode == Some(AccessMode::Handover);
        if hw.dirty[p] {
            trace.emit(
                at,
                None,
                EventKind::ResidualStateWarning {
                    peripheral: spec.name.clone(),
                },
            );
            hw.dirty[p] = false;
        }
        self.unassign(hw, trace, p, at);
        if let Some(to) = to {
            self.assign(to, p, AccessMode::Handover);
        }
        trace.emit(
            at,
            None,
            EventKind::Handover {
                peripheral: spec.name.clone(),
                from,
                to,
                trigger,
            },
        );
        if was_handover || to.is_some() {
            self.indicate(hw, trace, at, p, to);
        }
        self.reconcile(hw, trace);
    }

    /// Show the new owner on the monitor-controlled indicator.
    fn indicate(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        at: Option<CoreId>,
        p: usize,
        owner: Option<DomainId>,
    ) {
        let scenario = self.scenario.clone();
        if let Some(led) = scenario
            .platform
            .peripherals
            .iter()
            .find(|x| x.kind == PeripheralKind::Led)
        {
            let txn = BusTxn {
                core: at.unwrap_or(CoreId(0)),
                addr: led.mmio.base,
                width: 4,
                kind: AccessKind::Write,
                value: owner.map_or(0, |d| d.0 as u64 + 1),
                security: Security::Secure,
            };
            hw.transact(trace, txn, None, false);
        }
        trace.emit(
            at,
            None,
            EventKind::LedIndicator {
                peripheral: scenario.platform.peripherals[p].name.clone(),
                owner,
            },
        );
    }

    fn share_readonly(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        _core: CoreId,
        caller: DomainId,
        p: u64,
        reader: u64,
    ) -> Outcome {
        let p = self.peripheral_arg(p)?;
        let reader = self.live(reader)?;
        let spec = &self.scenario.platform.peripherals[p];
        if self.periph[p].owner != Some(caller) {
            return fault("only the owner may share a peripheral");
        }
        if !spec.supports(AccessMode::ReadOnly) {
            return fault(format!("{} cannot be shared read-only", spec.name));
        }
        if reader == caller {
            return fault("the owner already has access");
        }
        let decl = self.domains[reader.0 as usize].decl;
        if self.scenario.domains[decl].request(p) != Some(AccessMode::ReadOnly) {
            return fault(format!("{reader} did not request read-only access"));
        }
        self.periph[p].readers.insert(reader);
        self.dom(reader).readable.insert(p);
        self.reconcile(hw, trace);
        Ok(RET_OK)
    }

    pub fn user_action(&mut self, hw: &mut Hardware, trace: &mut Trace, action: &UserActionKind) {
        let scenario = self.scenario.clone();
        let names = &scenario.platform.peripherals;
        match action {
            UserActionKind::Press { peripheral } => {
                trace.emit(
                    None,
                    None,
                    EventKind::UserAction {
                        action: format!("press {}", names[*peripheral].name),
                    },
                );
                fire_peripheral(hw, trace, *peripheral);
            }
            UserActionKind::Handover { peripheral, to } => {
                let p = *peripheral;
                let target = self.resolve(*to);
                let verdict = match target {
                    None => Err(format!("{} is not running", scenario.domains[*to].name)),
                    Some(t) => self.check_handover(p, t).map(|_| t),
                };
                let text = format!(
                    "handover {} to {}",
                    names[p].name, scenario.domains[*to].name
                );
                match verdict {
                    Ok(t) => {
                        trace.emit(None, None, EventKind::UserAction { action: text });
                        self.transfer(hw, trace, None, p, Some(t), HandoverTrigger::UserAction);
                    }
                    Err(e) => trace.emit(
                        None,
                        None,
                        EventKind::UserAction {
                            action: format!("{text}: refused, {e}"),
                        },
                    ),
                }
            }
            UserActionKind::Teardown { domain } => {
                let text = format!("teardown {}", scenario.domains[*domain].name);
                match self.resolve(*domain) {
                    Some(id) => {
                        trace.emit(None, None, EventKind::UserAction { action: text });
                        if let Err(e) = self.teardown(hw, trace, None, id) {
                            trace.emit(None, None, EventKind::ProtocolError { detail: e });
                        }
                    }
                    None => trace.emit(
                        None,
                        None,
                        EventKind::UserAction {
                            action: format!("{text}: refused, not running"),
                        },
                    ),
                }
            }
        }
    }

    /// Domains currently holding at least one core.
    fn resident(&self, hw: &Hardware) -> BTreeSet<DomainId> {
        hw.cores.iter().filter_map(|c| c.domain).collect()
    }

    /// Direct controller access is only safe when one domain holds every core.
    pub fn direct_gic(&self, hw: &Hardware) -> bool {
        let r = self.resident(hw);
        r.len() == 1 && hw.cores.iter().all(|c| c.domain.is_some())
    }

    /// Bring interrupt grouping, masking and routing plus the address map
    /// in line with the current set of running domains.
    fn reconcile(&mut self, hw: &mut Hardware, trace: &mut Trace) {
        let resident = self.resident(hw);
        let n_cores = hw.cores.len();
        for id in self
            .resident_prev
            .difference(&resident)
            .copied()
            .collect::<Vec<_>>()
        {
            let d = &mut self.domains[id.0 as usize];
            if !d.live() {
                continue;
            }
            for i in d.intids.clone() {
                if let Some(desc) = hw.gic.descriptor(i, None) {
                    d.saved_irq.insert(
                        i,
                        SavedIrq {
                            enabled: desc.enabled,
                            priority: desc.priority,
                            affinity: desc.affinity,
                            pending: desc.activation.is_pending(),
                        },
                    );
                }
            }
        }
        let cores_of: BTreeMap<DomainId, Vec<CoreId>> =
            resident.iter().map(|&d| (d, hw.cores_of(d))).collect();
        let mut changes = Vec::new();
        let gic: &mut GicState = &mut hw.gic;
        for i in IntId::spis() {
            let mut set = |f: ConfigField, v: u64| {
                changes.extend(gic.set_config(i, None, f, v).ok().flatten());
            };
            match self.intid_owner.get(&i).filter(|o| resident.contains(o)) {
                Some(o) => {
                    if !self.resident_prev.contains(o) {
                        let saved = self.domains[o.0 as usize]
                            .saved_irq
                            .get(&i)
                            .copied()
                            .unwrap_or_default();
                        set(ConfigField::Priority, saved.priority as u64);
                        set(
                            ConfigField::Affinity,
                            crate::gic::encode_affinity(saved.affinity),
                        );
                        set(ConfigField::Enabled, saved.enabled as u64);
                    }
                    set(ConfigField::Group, 1);
                    let cores = &cores_of[o];
                    let affinity = gic.descriptor(i, None).and_then(|d| d.affinity);
                    let pin = match affinity {
                        None => cores.len() < n_cores,
                        Some(c) => !cores.contains(&c),
                    };
                    if pin && !self.faults.has(Fault::SkipAffinityPin) {
                        changes.extend(
                            gic.set_config(i, None, ConfigField::Affinity, cores[0].0 as u64)
                                .ok()
                                .flatten(),
                        );
                    }
                }
                None => {
                    set(ConfigField::Group, 0);
                    set(ConfigField::Enabled, 0);
                }
            }
        }
        emit_changes(trace, None, None, &changes, &Actor::Monitor);
        let left: Vec<DomainId> = self.resident_prev.difference(&resident).copied().collect();
        self.resident_prev = resident;
        let regions = self.asc_table(hw, &left);
        if regions != hw.asc.regions() {
            hw.asc
                .configure(regions, Security::Secure)
                .expect("monitor builds well-formed tables");
            trace.emit(
                None,
                None,
                EventKind::AscConfigured {
                    regions: hw.asc.regions().to_vec(),
                },
            );
        }
        trace.emit(
            None,
            None,
            EventKind::OwnershipSnapshot {
                domains: self.ownership_records(hw),
            },
        );
    }

    fn consented(&self, region: usize, d: &Domain) -> bool {
        let spec = &self.scenario.domains;
        let Some(req) = spec[d.decl].shared.iter().find(|s| s.region == region) else {
            return false;
        };
        self.domains.iter().any(|p| {
            p.live()
                && p.id != d.id
                && req.peers.contains(&p.decl)
                && spec[p.decl]
                    .shared
                    .iter()
                    .any(|s| s.region == region && s.peers.contains(&d.decl))
        })
    }

    fn asc_table(&self, hw: &Hardware, left: &[DomainId]) -> Vec<Region> {
        let p = &self.scenario.platform;
        let resident = self.resident(hw);
        let direct = self.direct_gic(hw);
        let filter = |r: Region, cores: Vec<CoreId>| {
            if direct {
                r
            } else {
                r.with_cores(cores)
            }
        };
        let mut regions = Vec::new();
        for &id in &resident {
            let d = &self.domains[id.0 as usize];
            for m in &d.memory {
                regions.push(filter(
                    Region::new(
                        m.base,
                        m.size,
                        Permission::ReadWrite,
                        format!("mem:{}", d.name),
                    ),
                    hw.cores_of(id),
                ));
            }
        }
        if self.faults.has(Fault::SkipAscOnSwitch) {
            for id in left {
                let d = &self.domains[id.0 as usize];
                if d.live() {
                    for m in &d.memory {
                        regions.push(Region::new(
                            m.base,
                            m.size,
                            Permission::ReadWrite,
                            format!("mem:{}", d.name),
                        ));
                    }
                }
            }
        }
        for (i, st) in self.periph.iter().enumerate() {
            let spec = &p.peripherals[i];
            let owner = st.owner.filter(|o| resident.contains(o));
            let readers: Vec<DomainId> = st
                .readers
                .iter()
                .copied()
                .filter(|r| resident.contains(r) && Some(*r) != st.owner)
                .collect();
            let label = |part: &str| format!("{}:{part}", spec.name);
            if readers.is_empty() {
                if let Some(o) = owner {
                    regions.push(filter(
                        Region::new(
                            spec.mmio.base,
                            spec.mmio.size,
                            Permission::ReadWrite,
                            label("mmio"),
                        ),
                        hw.cores_of(o),
                    ));
                }
                continue;
            }
            let win = spec.data_window();
            if let Some(o) = owner {
                for part in [
                    MemRange::new(spec.mmio.base, win.base - spec.mmio.base),
                    MemRange::new(win.end(), spec.mmio.end() - win.end()),
                ] {
                    if part.size > 0 {
                        regions.push(filter(
                            Region::new(
                                part.base,
                                part.size,
                                Permission::ReadWrite,
                                label("control"),
                            ),
                            hw.cores_of(o),
                        ));
                    }
                }
            }
            let mut cores: Vec<CoreId> = owner.map(|o| hw.cores_of(o)).unwrap_or_default();
            for r in &readers {
                cores.extend(hw.cores_of(*r));
            }
            regions.push(filter(
                Region::new(win.base, win.size, Permission::ReadOnly, label("data")),
                cores,
            ));
        }
        for (i, r) in p.shared_regions.iter().enumerate() {
            let parties: Vec<DomainId> = resident
                .iter()
                .copied()
                .filter(|id| self.consented(i, &self.domains[id.0 as usize]))
                .collect();
            if parties.is_empty() {
                continue;
            }
            let cores = parties.iter().flat_map(|d| hw.cores_of(*d)).collect();
            regions.push(filter(
                Region::new(
                    r.range.base,
                    r.range.size,
                    Permission::ReadWrite,
                    format!("shm:{}", r.name),
                ),
                cores,
            ));
        }
        let w = p.gic.window();
        let gic_perm = if direct {
            Permission::ReadWrite
        } else {
            Permission::None
        };
        regions.push(Region::new(w.start, w.end - w.start, gic_perm, "gic"));
        regions.sort_by_key(|r| r.base);
        regions
    }

    pub fn ownership_records(&self, hw: &Hardware) -> Vec<OwnershipRecord> {
        let names = &self.scenario.platform.peripherals;
        self.domains
            .iter()
            .map(|d| OwnershipRecord {
                id: d.id,
                name: d.name.clone(),
                state: d.state,
                scheduler: d.scheduler,
                cores: hw.cores_of(d.id),
                memory: d.memory.clone(),
                peripherals: d
                    .peripherals
                    .iter()
                    .map(|(p, m)| HeldPeripheral {
                        name: names[*p].name.clone(),
                        mode: *m,
                    })
                    .collect(),
                intids: d.intids.iter().copied().collect(),
                readable: d.readable.iter().map(|p| names[*p].name.clone()).collect(),
            })
            .collect()
    }
}

/// Assert every INTID of peripheral `p`.
pub fn fire_peripheral(hw: &mut Hardware, trace: &mut Trace, p: usize) {
    let spec = hw.scenario.clone();
    let x = &spec.platform.peripherals[p];
    for &i in &x.intids {
        trace.emit(
            None,
            None,
            EventKind::InterruptFired {
                intid: i,
                source: x.name.clone(),
            },
        );
        if let Ok(Some(c)) = hw.gic.fire(i, None, PendingSource::Peripheral) {
            emit_changes(trace, None, None, &[c], &Actor::Peripheral(x.name.clone()));
        }
    }
}

fn save_out(hw: &mut Hardware, cores: &[CoreId]) -> Vec<CpuContext> {
    cores
        .iter()
        .map(|&c| {
            let mut ctx = std::mem::take(&mut hw.cores[c.index()].ctx);
            ctx.gic_active = hw.gic.cpu_mut(c).and_then(|cpu| cpu.active.take());
            hw.cores[c.index()].domain = None;
            ctx
        })
        .collect()
}

/// Put domain `d` on `cores`. Saved contexts are restored in positional
/// order; a domain without any starts its script on the lowest core.
fn place(
    hw: &mut Hardware,
    d: DomainId,
    cores: &[CoreId],
    mut saved: Vec<CpuContext>,
    dropped: &mut Vec<CpuContext>,
) -> Vec<CoreResume> {
    if saved.is_empty() {
        saved.push(CpuContext::fresh_script());
    }
    // Keep the script context on the lowest core.
    saved.sort_by_key(|c| !c.script);
    if saved.len() > cores.len() {
        dropped.extend(saved.split_off(cores.len()));
    }
    let mut incoming = saved.into_iter();
    cores
        .iter()
        .map(|&c| {
            let mut ctx = incoming.next().unwrap_or_else(CpuContext::idle);
            let active = ctx.gic_active.take();
            if let Some(cpu) = hw.gic.cpu_mut(c) {
                cpu.active = active;
            }
            let resume = CoreResume {
                core: c,
                in_handler: ctx.handler.is_some(),
                active,
            };
            hw.cores[c.index()] = crate::platform::Core {
                domain: Some(d),
                ctx,
            };
            resume
        })
        .collect()
}

/// Free list minus `r`.
fn carve(free: &[MemRange], r: MemRange) -> Vec<MemRange> {
    let mut out = Vec::new();
    for f in free {
        if !f.overlaps(&r) {
            out.push(*f);
            continue;
        }
        if f.base < r.base {
            out.push(MemRange::new(f.base, r.base - f.base));
        }
        if r.end() < f.end() {
            out.push(MemRange::new(r.end(), f.end() - r.end()));
        }
    }
    out
}

/// Free list plus `r`, coalescing neighbours.
fn release(free: &[MemRange], r: MemRange) -> Vec<MemRange> {
    let mut all: Vec<MemRange> = free.to_vec();
    all.push(r);
    all.sort();
    let mut out: Vec<MemRange> = Vec::new();
    for m in all {
        match out.last_mut() {
            Some(l) if l.end() == m.base => l.size += m.size,
            _ => out.push(m),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_list_carve_and_release() {
        let dram = MemRange::new(0x8000_0000, 0x10_0000);
        let a = MemRange::new(0x8001_0000, 0x1_0000);
        let f = carve(&[dram], a);
        assert_eq!(
            f,
            vec![
                MemRange::new(0x8000_0000, 0x1_0000),
                MemRange::new(0x8002_0000, 0xE_0000)
            ]
        );
        assert_eq!(release(&f, a), vec![dram]);
    }

    #[test]
    fn fault_set_defaults_to_empty() {
        for f in Fault::ALL {
            assert!(!Faults::none().has(f));
        }
    }
}
