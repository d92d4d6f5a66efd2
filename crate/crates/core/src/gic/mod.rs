//! GICv3 interrupt routing model: per-INTID life cycle, packed register
//! views for secure and non-secure accesses, and priority/affinity based
//! selection of the next interrupt for a core.

mod regs;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use regs::{
    GicLayout, GicRegisterId, RegisterClass, WriteSemantics, DEFAULT_DIST_BASE,
    DEFAULT_REDIST_BASE, DIST_SIZE, IROUTER_IRM, REDIST_STRIDE, SGI_FRAME_OFFSET,
};

use crate::ids::{CoreId, Security};

pub const PPI_BASE: u16 = 16;
pub const SPI_BASE: u16 = 32;
/// One past the largest modeled INTID.
pub const INTID_LIMIT: u16 = 256;
pub const DEFAULT_PRIORITY: u8 = 0xA0;
/// Running priority of a core with nothing active.
pub const IDLE_PRIORITY: u8 = 0xFF;
/// INTID returned by an acknowledge with nothing to deliver.
pub const SPURIOUS_INTID: u16 = 1023;
/// Secure physical timer PPI; permanently Secure and owned by the monitor.
pub const SECURE_TIMER_INTID: IntId = IntId(29);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntId(u16);

impl IntId {
    /// Accepts PPIs (16..32) and SPIs (32..256).
    pub fn new(value: u16) -> Result<IntId, GicError> {
        if (PPI_BASE..INTID_LIMIT).contains(&value) {
            Ok(IntId(value))
        } else {
            Err(GicError::Unmodeled(value))
        }
    }

    pub fn value(self) -> u16 {
        self.0
    }

    pub fn is_ppi(self) -> bool {
        self.0 < SPI_BASE
    }

    pub fn is_spi(self) -> bool {
        self.0 >= SPI_BASE
    }

    pub fn spis() -> impl Iterator<Item = IntId> {
        (SPI_BASE..INTID_LIMIT).map(IntId)
    }

    pub fn ppis() -> impl Iterator<Item = IntId> {
        (PPI_BASE..SPI_BASE).map(IntId)
    }
}

impl fmt::Display for IntId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Secure,
    NonSecure,
}

impl Group {
    /// Group matching the interrupts a core in `security` state may take.
    pub fn deliverable_to(security: Security) -> Group {
        match security {
            Security::Secure => Group::Secure,
            Security::NonSecure => Group::NonSecure,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Inactive,
    Pending,
    Active,
    ActiveAndPending,
}

/// Events of the interrupt life cycle proper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    /// Peripheral assertion or software set-pending.
    Fire,
    Acknowledge,
    EndOfInterrupt,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Inactive,
        Activation::Pending,
        Activation::Active,
        Activation::ActiveAndPending,
    ];

    pub fn is_pending(self) -> bool {
        matches!(self, Activation::Pending | Activation::ActiveAndPending)
    }

    pub fn is_active(self) -> bool {
        matches!(self, Activation::Active | Activation::ActiveAndPending)
    }

    fn from_bits(pending: bool, active: bool) -> Activation {
        match (pending, active) {
            (false, false) => Activation::Inactive,
            (true, false) => Activation::Pending,
            (false, true) => Activation::Active,
            (true, true) => Activation::ActiveAndPending,
        }
    }

    /// The closed transition relation of the life cycle. `None` marks a
    /// transition the GIC rejects.
    pub fn next(self, event: LifecycleEvent) -> Option<Activation> {
        use Activation::*;
        use LifecycleEvent::*;
        match (self, event) {
            (Inactive, Fire) | (Pending, Fire) => Some(Pending),
            (Active, Fire) | (ActiveAndPending, Fire) => Some(ActiveAndPending),
            (Pending, Acknowledge) => Some(Active),
            (Active, EndOfInterrupt) => Some(Inactive),
            (ActiveAndPending, EndOfInterrupt) => Some(Pending),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingSource {
    None,
    Peripheral,
    Software,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterruptDescriptor {
    pub intid: IntId,
    pub group: Group,
    pub enabled: bool,
    /// Lower value is more urgent.
    pub priority: u8,
    /// `None` routes to any ready core.
    pub affinity: Option<CoreId>,
    /// Raw ICFGR field.
    pub trigger: u8,
    pub activation: Activation,
    pub pending_source: PendingSource,
}

impl InterruptDescriptor {
    fn reset(intid: IntId) -> Self {
        InterruptDescriptor {
            intid,
            group: Group::NonSecure,
            enabled: false,
            priority: DEFAULT_PRIORITY,
            affinity: None,
            trigger: 0,
            activation: Activation::Inactive,
            pending_source: PendingSource::None,
        }
    }

    /// IROUTER encoding of the affinity field.
    pub fn router_word(&self) -> u64 {
        encode_affinity(self.affinity)
    }
}

pub fn encode_affinity(affinity: Option<CoreId>) -> u64 {
    match affinity {
        None => IROUTER_IRM,
        Some(core) => core.0 as u64,
    }
}

pub fn decode_affinity(word: u64) -> Option<CoreId> {
    if word & IROUTER_IRM != 0 {
        None
    } else {
        Some(CoreId((word & 0xFF) as u8))
    }
}

/// Per-core CPU interface bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CpuInterface {
    /// INTID acknowledged on this core and not yet ended.
    pub active: Option<IntId>,
}

impl CpuInterface {
    pub fn running_priority(&self, gic: &GicState, core: CoreId) -> u8 {
        self.active
            .and_then(|i| gic.descriptor(i, Some(core)))
            .map_or(IDLE_PRIORITY, |d| d.priority)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigField {
    Group,
    Enabled,
    Priority,
    Affinity,
    Trigger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCause {
    Fire,
    SetPending,
    ClearPending,
    SetActive,
    ClearActive,
    Acknowledge,
    EndOfInterrupt,
    Reset,
}

/// One applied mutation of a descriptor, reported so callers can attribute
/// it to whoever issued the access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Change {
    Config {
        intid: IntId,
        bank: Option<CoreId>,
        field: ConfigField,
        old: u64,
        new: u64,
    },
    Activation {
        intid: IntId,
        bank: Option<CoreId>,
        from: Activation,
        to: Activation,
        cause: StateCause,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GicError {
    #[error("INTID {0} is not modeled")]
    Unmodeled(u16),
    #[error("INTID {0} is a PPI and cannot be assigned to a peripheral")]
    NotAssignable(IntId),
    #[error("INTID {intid} assigned to both {first} and {second}")]
    DuplicateAssignment {
        intid: IntId,
        first: String,
        second: String,
    },
    #[error("PPI {0} needs a target core")]
    MissingBank(IntId),
    #[error("{0} does not exist")]
    NoSuchCore(CoreId),
    #[error("cannot {event:?} INTID {intid} in state {state:?}")]
    Protocol {
        intid: IntId,
        state: Activation,
        event: LifecycleEvent,
    },
    #[error("{core} has INTID {active:?} active; {intid} is out of order")]
    OutOfOrder {
        core: CoreId,
        intid: IntId,
        active: Option<IntId>,
    },
}

/// Distributor, redistributors, and CPU interfaces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GicState {
    layout: GicLayout,
    spis: Vec<InterruptDescriptor>,
    ppis: Vec<Vec<InterruptDescriptor>>,
    cpu: Vec<CpuInterface>,
    sources: BTreeMap<IntId, String>,
    // Index of SPIs with the pending bit set; keeps selection cheap.
    pending_spis: BTreeSet<IntId>,
}

impl GicState {
    /// Build the reset state for `layout.cores` cores from the platform's
    /// INTID → peripheral map.
    pub fn reset(layout: GicLayout, map: &[(IntId, String)]) -> Result<GicState, GicError> {
        let mut sources = BTreeMap::new();
        for (intid, name) in map {
            if intid.is_ppi() {
                return Err(GicError::NotAssignable(*intid));
            }
            if let Some(first) = sources.insert(*intid, name.clone()) {
                return Err(GicError::DuplicateAssignment {
                    intid: *intid,
                    first,
                    second: name.clone(),
                });
            }
        }
        Ok(GicState {
            layout,
            spis: IntId::spis().map(InterruptDescriptor::reset).collect(),
            ppis: (0..layout.cores)
                .map(|_| IntId::ppis().map(InterruptDescriptor::reset).collect())
                .collect(),
            cpu: vec![CpuInterface::default(); layout.cores],
            sources,
            pending_spis: BTreeSet::new(),
        })
    }

    pub fn layout(&self) -> &GicLayout {
        &self.layout
    }

    pub fn cores(&self) -> usize {
        self.layout.cores
    }

    pub fn source_of(&self, intid: IntId) -> Option<&str> {
        self.sources.get(&intid).map(String::as_str)
    }

    pub fn cpu(&self, core: CoreId) -> Option<&CpuInterface> {
        self.cpu.get(core.index())
    }

    pub fn cpu_mut(&mut self, core: CoreId) -> Option<&mut CpuInterface> {
        self.cpu.get_mut(core.index())
    }

    pub fn descriptor(&self, intid: IntId, bank: Option<CoreId>) -> Option<&InterruptDescriptor> {
        if intid.is_spi() {
            self.spis.get((intid.0 - SPI_BASE) as usize)
        } else {
            self.ppis
                .get(bank?.index())?
                .get((intid.0 - PPI_BASE) as usize)
        }
    }

    fn descriptor_mut(
        &mut self,
        intid: IntId,
        bank: Option<CoreId>,
    ) -> Result<&mut InterruptDescriptor, GicError> {
        if intid.is_spi() {
            Ok(&mut self.spis[(intid.0 - SPI_BASE) as usize])
        } else {
            let core = bank.ok_or(GicError::MissingBank(intid))?;
            self.ppis
                .get_mut(core.index())
                .map(|v| &mut v[(intid.0 - PPI_BASE) as usize])
                .ok_or(GicError::NoSuchCore(core))
        }
    }

    /// Every descriptor, SPIs first, then each core's PPI bank.
    pub fn descriptors(&self) -> impl Iterator<Item = (Option<CoreId>, &InterruptDescriptor)> {
        self.spis.iter().map(|d| (None, d)).chain(
            self.ppis
                .iter()
                .enumerate()
                .flat_map(|(c, bank)| bank.iter().map(move |d| (Some(CoreId(c as u8)), d))),
        )
    }

    fn set_activation(
        &mut self,
        intid: IntId,
        bank: Option<CoreId>,
        to: Activation,
        cause: StateCause,
        source: PendingSource,
    ) -> Result<Option<Change>, GicError> {
        let d = self.descriptor_mut(intid, bank)?;
        let from = d.activation;
        if from == to {
            return Ok(None);
        }
        d.activation = to;
        d.pending_source = if to.is_pending() {
            if from.is_pending() {
                d.pending_source
            } else {
                source
            }
        } else {
            PendingSource::None
        };
        if intid.is_spi() {
            if to.is_pending() {
                self.pending_spis.insert(intid);
            } else {
                self.pending_spis.remove(&intid);
            }
        }
        Ok(Some(Change::Activation {
            intid,
            bank,
            from,
            to,
            cause,
        }))
    }

    /// Assert `intid`. Makes no delivery decision.
    pub fn fire(
        &mut self,
        intid: IntId,
        bank: Option<CoreId>,
        source: PendingSource,
    ) -> Result<Option<Change>, GicError> {
        let from = self.descriptor_mut(intid, bank)?.activation;
        let to = from
            .next(LifecycleEvent::Fire)
            .expect("fire is total on the life cycle");
        let cause = match source {
            PendingSource::Software => StateCause::SetPending,
            _ => StateCause::Fire,
        };
        self.set_activation(intid, bank, to, cause, source)
    }

    /// Highest-urgency pending interrupt `core` may take in `security`
    /// state. Ties go to the lowest INTID. A core with an active interrupt
    /// takes nothing until it ends it.
    pub fn select(&self, core: CoreId, security: Security) -> Option<IntId> {
        let cpu = self.cpu.get(core.index())?;
        if cpu.active.is_some() {
            return None;
        }
        let group = Group::deliverable_to(security);
        let eligible = |d: &InterruptDescriptor| {
            d.activation == Activation::Pending
                && d.enabled
                && d.group == group
                && d.affinity.is_none_or(|a| a == core)
        };
        let ppis = self.ppis[core.index()].iter().filter(|d| eligible(d));
        let spis = self
            .pending_spis
            .iter()
            .map(|i| &self.spis[(i.0 - SPI_BASE) as usize])
            .filter(|d| eligible(d));
        ppis.chain(spis)
            .min_by_key(|d| (d.priority, d.intid))
            .map(|d| d.intid)
    }

    pub fn acknowledge(&mut self, core: CoreId, intid: IntId) -> Result<Change, GicError> {
        let cpu = self
            .cpu
            .get(core.index())
            .ok_or(GicError::NoSuchCore(core))?;
        if cpu.active.is_some() {
            return Err(GicError::OutOfOrder {
                core,
                intid,
                active: cpu.active,
            });
        }
        let bank = intid.is_ppi().then_some(core);
        let state = self.descriptor_mut(intid, bank)?.activation;
        let to = state
            .next(LifecycleEvent::Acknowledge)
            .ok_or(GicError::Protocol {
                intid,
                state,
                event: LifecycleEvent::Acknowledge,
            })?;
        let change = self
            .set_activation(
                intid,
                bank,
                to,
                StateCause::Acknowledge,
                PendingSource::None,
            )?
            .expect("acknowledge always changes state");
        self.cpu[core.index()].active = Some(intid);
        Ok(change)
    }

    pub fn end_of_interrupt(&mut self, core: CoreId, intid: IntId) -> Result<Change, GicError> {
        let cpu = self
            .cpu
            .get(core.index())
            .ok_or(GicError::NoSuchCore(core))?;
        if cpu.active != Some(intid) {
            return Err(GicError::OutOfOrder {
                core,
                intid,
                active: cpu.active,
            });
        }
        let bank = intid.is_ppi().then_some(core);
        let state = self.descriptor_mut(intid, bank)?.activation;
        let to = state
            .next(LifecycleEvent::EndOfInterrupt)
            .ok_or(GicError::Protocol {
                intid,
                state,
                event: LifecycleEvent::EndOfInterrupt,
            })?;
        let change = self
            .set_activation(
                intid,
                bank,
                to,
                StateCause::EndOfInterrupt,
                PendingSource::None,
            )?
            .expect("end of interrupt always changes state");
        self.cpu[core.index()].active = None;
        Ok(change)
    }

    /// Monitor-side reset of one interrupt: back to the reset
    /// configuration, both pending and active cleared.
    pub fn reset_interrupt(
        &mut self,
        intid: IntId,
        bank: Option<CoreId>,
    ) -> Result<Vec<Change>, GicError> {
        let mut changes = Vec::new();
        if let Some(c) = self.set_activation(
            intid,
            bank,
            Activation::Inactive,
            StateCause::Reset,
            PendingSource::None,
        )? {
            changes.push(c);
        }
        for cpu in &mut self.cpu {
            if cpu.active == Some(intid) {
                cpu.active = None;
            }
        }
        changes.extend(self.set_config(intid, bank, ConfigField::Enabled, 0)?);
        changes.extend(self.set_config(
            intid,
            bank,
            ConfigField::Priority,
            DEFAULT_PRIORITY as u64,
        )?);
        changes.extend(self.set_config(intid, bank, ConfigField::Affinity, IROUTER_IRM)?);
        Ok(changes)
    }

    pub fn config_value(d: &InterruptDescriptor, field: ConfigField) -> u64 {
        match field {
            ConfigField::Group => (d.group == Group::NonSecure) as u64,
            ConfigField::Enabled => d.enabled as u64,
            ConfigField::Priority => d.priority as u64,
            ConfigField::Affinity => d.router_word(),
            ConfigField::Trigger => d.trigger as u64,
        }
    }

    /// Set one configuration field with secure authority.
    pub fn set_config(
        &mut self,
        intid: IntId,
        bank: Option<CoreId>,
        field: ConfigField,
        value: u64,
    ) -> Result<Option<Change>, GicError> {
        let d = self.descriptor_mut(intid, bank)?;
        let old = Self::config_value(d, field);
        match field {
            ConfigField::Group => {
                d.group = if value & 1 == 1 {
                    Group::NonSecure
                } else {
                    Group::Secure
                }
            }
            ConfigField::Enabled => d.enabled = value & 1 == 1,
            ConfigField::Priority => d.priority = value as u8,
            ConfigField::Affinity => d.affinity = decode_affinity(value),
            ConfigField::Trigger => d.trigger = (value & 0b11) as u8,
        }
        let new = Self::config_value(d, field);
        Ok((old != new).then_some(Change::Config {
            intid,
            bank,
            field,
            old,
            new,
        }))
    }

    /// Modeled INTIDs a register's fields cover, paired with the field
    /// position. Unmodeled positions (SGIs, PPIs of a missing bank) are
    /// skipped and therefore read as zero.
    fn fields(&self, reg: GicRegisterId, bank: Option<CoreId>) -> Vec<(u32, IntId)> {
        if !reg.is_modeled() {
            return Vec::new();
        }
        if reg.is_banked() && bank.is_none_or(|c| c.index() >= self.layout.cores) {
            return Vec::new();
        }
        reg.covered_intids()
            .filter(|&v| v >= PPI_BASE as u32 && v < INTID_LIMIT as u32)
            .map(|v| (v - reg.covered_intids().start, IntId(v as u16)))
            .collect()
    }

    fn field_value(reg: GicRegisterId, d: &InterruptDescriptor) -> u64 {
        match reg.class {
            RegisterClass::Groupr => (d.group == Group::NonSecure) as u64,
            RegisterClass::Isenabler | RegisterClass::Icenabler => d.enabled as u64,
            RegisterClass::Ispendr | RegisterClass::Icpendr => d.activation.is_pending() as u64,
            RegisterClass::Isactiver | RegisterClass::Icactiver => d.activation.is_active() as u64,
            RegisterClass::Ipriorityr => d.priority as u64,
            RegisterClass::Icfgr => d.trigger as u64,
            RegisterClass::Irouter => d.router_word(),
        }
    }

    /// Mask of all fields that belong to Secure-group interrupts.
    pub fn secure_field_mask(&self, reg: GicRegisterId, bank: Option<CoreId>) -> u64 {
        let bank = if reg.is_banked() { bank } else { None };
        self.fields(reg, bank)
            .into_iter()
            .filter(|&(_, i)| {
                self.descriptor(i, bank)
                    .is_some_and(|d| d.group == Group::Secure)
            })
            .fold(0, |m, (f, _)| m | reg.field_mask(f))
    }

    /// Current state word: what a secure read of the register returns.
    pub fn read_state(&self, reg: GicRegisterId, bank: Option<CoreId>) -> u64 {
        let bank = if reg.is_banked() { bank } else { None };
        let w = reg.class.field_width();
        self.fields(reg, bank)
            .into_iter()
            .filter_map(|(f, i)| self.descriptor(i, bank).map(|d| (f, d)))
            .fold(0u64, |acc, (f, d)| {
                let shift = if w == 64 { 0 } else { f * w };
                acc | (Self::field_value(reg, d) << shift)
            })
    }

    /// Register read with the view the security state is entitled to.
    pub fn read_register(
        &self,
        reg: GicRegisterId,
        bank: Option<CoreId>,
        security: Security,
    ) -> u64 {
        let word = self.read_state(reg, bank);
        match security {
            Security::Secure => word,
            Security::NonSecure => word & !self.secure_field_mask(reg, bank),
        }
    }

    /// Register write. Non-secure writes to Secure-group fields are
    /// ignored, as are non-secure writes to GROUPR altogether.
    pub fn write_register(
        &mut self,
        reg: GicRegisterId,
        bank: Option<CoreId>,
        value: u64,
        security: Security,
    ) -> Vec<Change> {
        let value = value & reg.word_mask();
        let writable = match security {
            Security::Secure => reg.word_mask(),
            Security::NonSecure if reg.class == RegisterClass::Groupr => 0,
            Security::NonSecure => reg.word_mask() & !self.secure_field_mask(reg, bank),
        };
        let old = self.read_state(reg, bank);
        let requested = requested_state(reg.class, old, value);
        self.store_state(reg, bank, (old & !writable) | (requested & writable))
    }

    /// Make the register's state equal `word`, with secure authority.
    pub fn store_state(
        &mut self,
        reg: GicRegisterId,
        bank: Option<CoreId>,
        word: u64,
    ) -> Vec<Change> {
        let bank = if reg.is_banked() { bank } else { None };
        let w = reg.class.field_width();
        let mut changes = Vec::new();
        for (f, intid) in self.fields(reg, bank) {
            let shift = if w == 64 { 0 } else { f * w };
            let field = (word & reg.field_mask(f)) >> shift;
            let Ok(change) = self.store_field(reg.class, intid, bank, field) else {
                continue;
            };
            changes.extend(change);
        }
        changes
    }

    fn store_field(
        &mut self,
        class: RegisterClass,
        intid: IntId,
        bank: Option<CoreId>,
        field: u64,
    ) -> Result<Option<Change>, GicError> {
        let act = self.descriptor_mut(intid, bank)?.activation;
        let on = field & 1 == 1;
        match class {
            RegisterClass::Groupr => self.set_config(intid, bank, ConfigField::Group, field),
            RegisterClass::Isenabler | RegisterClass::Icenabler => {
                self.set_config(intid, bank, ConfigField::Enabled, field)
            }
            RegisterClass::Ipriorityr => self.set_config(intid, bank, ConfigField::Priority, field),
            RegisterClass::Icfgr => self.set_config(intid, bank, ConfigField::Trigger, field),
            RegisterClass::Irouter => self.set_config(intid, bank, ConfigField::Affinity, field),
            RegisterClass::Ispendr | RegisterClass::Icpendr => {
                if on == act.is_pending() {
                    Ok(None)
                } else if on {
                    self.fire(intid, bank, PendingSource::Software)
                } else {
                    let to = Activation::from_bits(false, act.is_active());
                    self.set_activation(
                        intid,
                        bank,
                        to,
                        StateCause::ClearPending,
                        PendingSource::None,
                    )
                }
            }
            RegisterClass::Isactiver | RegisterClass::Icactiver => {
                if on == act.is_active() {
                    return Ok(None);
                }
                let to = Activation::from_bits(act.is_pending(), on);
                let cause = if on {
                    StateCause::SetActive
                } else {
                    for cpu in &mut self.cpu {
                        if cpu.active == Some(intid) {
                            cpu.active = None;
                        }
                    }
                    StateCause::ClearActive
                };
                self.set_activation(intid, bank, to, cause, PendingSource::Software)
            }
        }
    }
}

/// State a write of `value` asks for, given the current state `old`.
pub fn requested_state(class: RegisterClass, old: u64, value: u64) -> u64 {
    match class.write_semantics() {
        WriteSemantics::Plain => value,
        WriteSemantics::SetOnOne => old | value,
        WriteSemantics::ClearOnOne => old & !value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gic(map: &[(u16, &str)]) -> GicState {
        let map: Vec<_> = map
            .iter()
            .map(|&(i, n)| (IntId::new(i).unwrap(), n.to_string()))
            .collect();
        GicState::reset(
            GicLayout::new(DEFAULT_DIST_BASE, DEFAULT_REDIST_BASE, 2),
            &map,
        )
        .unwrap()
    }

    fn id(v: u16) -> IntId {
        IntId::new(v).unwrap()
    }

    fn isenabler1() -> GicRegisterId {
        GicRegisterId::new(RegisterClass::Isenabler, 1)
    }

    #[test]
    fn reset_state() {
        let g = gic(&[(33, "uart0")]);
        let d = g.descriptor(id(33), None).unwrap();
        assert_eq!(d.group, Group::NonSecure);
        assert!(!d.enabled);
        assert_eq!(d.activation, Activation::Inactive);
        assert_eq!(d.priority, 0xA0);
        assert_eq!(d.affinity, None);
        assert_eq!(g.source_of(id(33)), Some("uart0"));
    }

    #[test]
    fn duplicate_assignment_is_rejected() {
        let map = vec![(id(33), "uart0".to_string()), (id(33), "uart1".to_string())];
        let err = GicState::reset(GicLayout::new(0, DIST_SIZE, 1), &map).unwrap_err();
        assert!(matches!(err, GicError::DuplicateAssignment { .. }));
    }

    #[test]
    fn empty_map_keeps_everything_addressable() {
        let g = gic(&[]);
        for i in IntId::spis() {
            assert!(g.descriptor(i, None).is_some());
            assert!(g.source_of(i).is_none());
        }
        assert!(g.descriptor(id(20), Some(CoreId(1))).is_some());
        assert!(IntId::new(15).is_err());
        assert!(IntId::new(256).is_err());
    }

    #[test]
    fn life_cycle_closure() {
        use Activation::*;
        use LifecycleEvent::*;
        let allowed = [
            (Inactive, Fire, Pending),
            (Pending, Fire, Pending),
            (Active, Fire, ActiveAndPending),
            (ActiveAndPending, Fire, ActiveAndPending),
            (Pending, Acknowledge, Active),
            (Active, EndOfInterrupt, Inactive),
            (ActiveAndPending, EndOfInterrupt, Pending),
        ];
        for from in Activation::ALL {
            for ev in [Fire, Acknowledge, EndOfInterrupt] {
                let expect = allowed
                    .iter()
                    .find(|(f, e, _)| *f == from && *e == ev)
                    .map(|t| t.2);
                assert_eq!(from.next(ev), expect, "{from:?} + {ev:?}");
            }
        }
    }

    #[test]
    fn fire_walks_the_life_cycle() {
        let mut g = gic(&[(33, "uart0")]);
        g.fire(id(33), None, PendingSource::Peripheral).unwrap();
        assert_eq!(
            g.descriptor(id(33), None).unwrap().activation,
            Activation::Pending
        );
        // Re-fire is idempotent.
        assert_eq!(
            g.fire(id(33), None, PendingSource::Peripheral).unwrap(),
            None
        );
        g.acknowledge(CoreId(0), id(33)).unwrap();
        g.fire(id(33), None, PendingSource::Peripheral).unwrap();
        let d = g.descriptor(id(33), None).unwrap();
        assert_eq!(d.activation, Activation::ActiveAndPending);
        assert_eq!(d.pending_source, PendingSource::Peripheral);
        g.end_of_interrupt(CoreId(0), id(33)).unwrap();
        assert_eq!(
            g.descriptor(id(33), None).unwrap().activation,
            Activation::Pending
        );
    }

    #[test]
    fn out_of_order_protocol_is_rejected() {
        let mut g = gic(&[(33, "uart0"), (34, "uart1")]);
        assert!(g.acknowledge(CoreId(0), id(33)).is_err());
        assert!(g.end_of_interrupt(CoreId(0), id(33)).is_err());
        g.fire(id(33), None, PendingSource::Peripheral).unwrap();
        g.fire(id(34), None, PendingSource::Peripheral).unwrap();
        g.acknowledge(CoreId(0), id(33)).unwrap();
        // Second acknowledge before EOI on the same core.
        assert!(g.acknowledge(CoreId(0), id(34)).is_err());
        // EOI of an interrupt the core did not acknowledge.
        assert!(g.end_of_interrupt(CoreId(0), id(34)).is_err());
        assert!(g.end_of_interrupt(CoreId(1), id(33)).is_err());
    }

    #[test]
    fn select_prefers_priority_then_lowest_intid() {
        let mut g = gic(&[]);
        for (i, p) in [(34u16, 0xA0u8), (40, 0x60)] {
            g.set_config(id(i), None, ConfigField::Priority, p as u64)
                .unwrap();
            g.set_config(id(i), None, ConfigField::Enabled, 1).unwrap();
            g.set_config(id(i), None, ConfigField::Affinity, 0).unwrap();
            g.fire(id(i), None, PendingSource::Peripheral).unwrap();
        }
        assert_eq!(g.select(CoreId(0), Security::NonSecure), Some(id(40)));
        g.set_config(id(34), None, ConfigField::Priority, 0x60)
            .unwrap();
        assert_eq!(g.select(CoreId(0), Security::NonSecure), Some(id(34)));
        // Affinity pins both to core 0.
        assert_eq!(g.select(CoreId(1), Security::NonSecure), None);
    }

    #[test]
    fn select_skips_masked_and_secure() {
        let mut g = gic(&[]);
        g.fire(id(34), None, PendingSource::Peripheral).unwrap();
        assert_eq!(g.select(CoreId(0), Security::NonSecure), None);
        g.set_config(id(34), None, ConfigField::Enabled, 1).unwrap();
        g.set_config(id(34), None, ConfigField::Group, 0).unwrap();
        assert_eq!(g.select(CoreId(0), Security::NonSecure), None);
        assert_eq!(g.select(CoreId(0), Security::Secure), Some(id(34)));
    }

    #[test]
    fn select_waits_for_end_of_interrupt() {
        let mut g = gic(&[]);
        for i in [34, 35] {
            g.set_config(id(i), None, ConfigField::Enabled, 1).unwrap();
            g.fire(id(i), None, PendingSource::Peripheral).unwrap();
        }
        g.acknowledge(CoreId(0), id(34)).unwrap();
        assert_eq!(g.select(CoreId(0), Security::NonSecure), None);
        assert_eq!(g.select(CoreId(1), Security::NonSecure), Some(id(35)));
    }

    #[test]
    fn non_secure_view_hides_secure_fields() {
        let mut g = gic(&[]);
        g.write_register(isenabler1(), None, 0x11, Security::NonSecure);
        assert_eq!(
            g.read_register(isenabler1(), None, Security::NonSecure),
            0x11
        );

        let mut g = gic(&[]);
        g.set_config(id(36), None, ConfigField::Group, 0).unwrap();
        g.set_config(id(36), None, ConfigField::Enabled, 1).unwrap();
        assert_eq!(g.read_register(isenabler1(), None, Security::NonSecure), 0);
        assert_eq!(g.read_register(isenabler1(), None, Security::Secure), 0x10);
    }

    #[test]
    fn non_secure_write_to_secure_field_is_ignored() {
        let mut g = gic(&[]);
        g.set_config(id(36), None, ConfigField::Group, 0).unwrap();
        let changes = g.write_register(isenabler1(), None, 0x10, Security::NonSecure);
        assert!(changes.is_empty());
        assert!(!g.descriptor(id(36), None).unwrap().enabled);
        let clear = GicRegisterId::new(RegisterClass::Icenabler, 1);
        g.set_config(id(36), None, ConfigField::Enabled, 1).unwrap();
        g.write_register(clear, None, u32::MAX as u64, Security::NonSecure);
        assert!(g.descriptor(id(36), None).unwrap().enabled);
    }

    #[test]
    fn set_and_clear_pairs() {
        let mut g = gic(&[]);
        let pend = GicRegisterId::new(RegisterClass::Ispendr, 1);
        let unpend = GicRegisterId::new(RegisterClass::Icpendr, 1);
        g.write_register(pend, None, 0b101, Security::Secure);
        assert_eq!(g.read_register(unpend, None, Security::Secure), 0b101);
        assert_eq!(
            g.descriptor(id(32), None).unwrap().pending_source,
            PendingSource::Software
        );
        g.write_register(unpend, None, 0b001, Security::Secure);
        assert_eq!(g.read_register(pend, None, Security::Secure), 0b100);
        let act = GicRegisterId::new(RegisterClass::Isactiver, 1);
        g.write_register(act, None, 0b100, Security::Secure);
        assert_eq!(
            g.descriptor(id(34), None).unwrap().activation,
            Activation::ActiveAndPending
        );
    }

    #[test]
    fn router_encoding() {
        let mut g = gic(&[]);
        let r = GicRegisterId::new(RegisterClass::Irouter, 40);
        assert_eq!(g.read_register(r, None, Security::Secure), IROUTER_IRM);
        g.write_register(r, None, 1, Security::Secure);
        assert_eq!(
            g.descriptor(id(40), None).unwrap().affinity,
            Some(CoreId(1))
        );
        g.write_register(r, None, IROUTER_IRM, Security::Secure);
        assert_eq!(g.descriptor(id(40), None).unwrap().affinity, None);
    }

    #[test]
    fn banked_ppis_are_per_core() {
        let mut g = gic(&[]);
        let en0 = GicRegisterId::new(RegisterClass::Isenabler, 0);
        g.write_register(en0, Some(CoreId(1)), 1 << 29, Security::Secure);
        assert!(
            g.descriptor(SECURE_TIMER_INTID, Some(CoreId(1)))
                .unwrap()
                .enabled
        );
        assert!(
            !g.descriptor(SECURE_TIMER_INTID, Some(CoreId(0)))
                .unwrap()
                .enabled
        );
        // SGI fields are unmodeled and read as zero.
        g.write_register(en0, Some(CoreId(0)), 0xFFFF, Security::Secure);
        assert_eq!(g.read_register(en0, Some(CoreId(0)), Security::Secure), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        struct Setup {
            secure: bool,
            enabled: bool,
            priority: u8,
            affinity: Option<u8>,
            fired: bool,
        }

        fn setup() -> impl Strategy<Value = Setup> {
            (
                any::<bool>(),
                any::<bool>(),
                any::<u8>(),
                prop::option::of(0u8..2),
                any::<bool>(),
            )
                .prop_map(|(secure, enabled, priority, affinity, fired)| Setup {
                    secure,
                    enabled,
                    priority,
                    affinity,
                    fired,
                })
        }

        fn build(spis: &[Setup]) -> GicState {
            let mut g = gic(&[]);
            for (k, s) in spis.iter().enumerate() {
                let i = id(32 + k as u16);
                g.set_config(i, None, ConfigField::Group, (!s.secure) as u64)
                    .unwrap();
                g.set_config(i, None, ConfigField::Enabled, s.enabled as u64)
                    .unwrap();
                g.set_config(i, None, ConfigField::Priority, s.priority as u64)
                    .unwrap();
                g.set_config(
                    i,
                    None,
                    ConfigField::Affinity,
                    encode_affinity(s.affinity.map(CoreId)),
                )
                .unwrap();
                if s.fired {
                    g.fire(i, None, PendingSource::Peripheral).unwrap();
                }
            }
            g
        }

        fn class() -> impl Strategy<Value = RegisterClass> {
            prop::sample::select(RegisterClass::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn select_matches_exhaustive_scan(
                spis in prop::collection::vec(setup(), 1..40),
                core in 0u8..2,
                secure in any::<bool>(),
            ) {
                let g = build(&spis);
                let sec = if secure { Security::Secure } else { Security::NonSecure };
                let want = spis
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.fired && s.enabled && s.secure == secure)
                    .filter(|(_, s)| s.affinity.is_none_or(|a| a == core))
                    .map(|(k, s)| (s.priority, 32 + k as u16))
                    .min()
                    .map(|(_, i)| id(i));
                prop_assert_eq!(g.select(CoreId(core), sec), want);
            }

            #[test]
            fn non_secure_writes_never_touch_secure_fields(
                spis in prop::collection::vec(setup(), 32..64),
                class in class(),
                index in 1u32..2,
                value in any::<u64>(),
            ) {
                let mut g = build(&spis);
                let reg = match class {
                    RegisterClass::Irouter => GicRegisterId::new(class, 32 + index * 7),
                    RegisterClass::Ipriorityr => GicRegisterId::new(class, 8 + index),
                    RegisterClass::Icfgr => GicRegisterId::new(class, 2 + index),
                    _ => GicRegisterId::new(class, index),
                };
                let before = g.clone();
                let changes = g.write_register(reg, None, value, Security::NonSecure);
                for c in &changes {
                    let intid = match c {
                        Change::Config { intid, .. } | Change::Activation { intid, .. } => *intid,
                    };
                    prop_assert_eq!(before.descriptor(intid, None).unwrap().group, Group::NonSecure);
                }
                for i in IntId::spis() {
                    let (b, a) = (before.descriptor(i, None).unwrap(), g.descriptor(i, None).unwrap());
                    if b.group == Group::Secure {
                        prop_assert_eq!(b, a);
                    }
                }
                let view = g.read_register(reg, None, Security::NonSecure);
                prop_assert_eq!(view & g.secure_field_mask(reg, None), 0);
            }
        }
    }
}
