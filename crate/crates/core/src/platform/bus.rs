//! Hardware state and the bus pipeline: address space controller check,
//! then dispatch to DRAM, device windows, or the interrupt controller.

use std::sync::Arc;

use crate::asc::{Asc, DenyReason};
use crate::gic::{Change, GicError, GicState, IntId};
use crate::ids::{AccessKind, CoreId, DomainId, MemRange, Security};
use crate::scenario::Scenario;
use crate::trace::{Actor, EventKind, GicPath, Trace};

use super::memory::Memory;

/// Handler block the core is executing for a delivered interrupt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerFrame {
    pub pc: usize,
    pub intid: IntId,
}

/// Per-core execution context the monitor saves and restores on switches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CpuContext {
    /// Whether this context runs the domain script; other cores idle.
    pub script: bool,
    pub pc: usize,
    /// Most recent read results, newest first.
    pub regs: [u64; 8],
    pub handler: Option<HandlerFrame>,
    pub wfi: bool,
    pub sleep: u64,
    pub halted: bool,
    /// Last value read from the interrupt acknowledge register.
    pub iar: Option<u16>,
    /// CPU interface record parked while the context is switched out.
    pub gic_active: Option<IntId>,
}

impl CpuContext {
    pub fn fresh_script() -> Self {
        CpuContext {
            script: true,
            ..Default::default()
        }
    }

    pub fn idle() -> Self {
        CpuContext {
            halted: true,
            ..Default::default()
        }
    }

    pub fn push_reg(&mut self, v: u64) {
        self.regs.rotate_right(1);
        self.regs[0] = v;
    }
}

#[derive(Clone, Debug, Default)]
pub struct Core {
    pub domain: Option<DomainId>,
    pub ctx: CpuContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BusTxn {
    pub core: CoreId,
    pub addr: u64,
    pub width: u8,
    pub kind: AccessKind,
    pub value: u64,
    pub security: Security,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusResult {
    Done(u64),
    Denied(DenyReason),
    /// Denied GIC access on a core whose domain runs the compatibility shim.
    ShimTrap,
}

impl BusResult {
    pub fn value(self) -> u64 {
        match self {
            BusResult::Done(v) => v,
            _ => 0,
        }
    }
}

pub struct Hardware {
    pub scenario: Arc<Scenario>,
    pub gic: GicState,
    pub asc: Asc,
    pub mem: Memory,
    /// Per peripheral: data window holds state a domain wrote.
    pub dirty: Vec<bool>,
    pub cores: Vec<Core>,
}

impl Hardware {
    pub fn new(scenario: Arc<Scenario>) -> Result<Self, GicError> {
        let p = &scenario.platform;
        let gic = GicState::reset(p.gic, &p.intid_map())?;
        Ok(Hardware {
            gic,
            asc: Asc::new(p.granule),
            mem: Memory::new(),
            dirty: vec![false; p.peripherals.len()],
            cores: vec![Core::default(); p.cores as usize],
            scenario,
        })
    }

    pub fn core_ids(&self) -> impl Iterator<Item = CoreId> {
        (0..self.cores.len() as u8).map(CoreId)
    }

    pub fn occupant(&self, core: CoreId) -> Option<DomainId> {
        self.cores.get(core.index()).and_then(|c| c.domain)
    }

    pub fn cores_of(&self, d: DomainId) -> Vec<CoreId> {
        self.core_ids()
            .filter(|&c| self.occupant(c) == Some(d))
            .collect()
    }

    fn target_label(&self, addr: u64) -> String {
        let p = &self.scenario.platform;
        if p.gic.contains(addr) {
            return "gic".into();
        }
        if let Some(x) = p.peripherals.iter().find(|x| x.mmio.contains(addr, 1)) {
            return x.name.clone();
        }
        if let Some(r) = p.shared_regions.iter().find(|r| r.range.contains(addr, 1)) {
            return r.name.clone();
        }
        if p.dram.contains(addr, 1) {
            return "dram".into();
        }
        "unmapped".into()
    }

    /// Run one transaction through the pipeline and record it.
    pub fn transact(
        &mut self,
        trace: &mut Trace,
        txn: BusTxn,
        domain: Option<DomainId>,
        shim: bool,
    ) -> BusResult {
        let denied = self
            .asc
            .check(txn.core, txn.security, txn.addr, txn.width as u64, txn.kind)
            .err();
        let target = self.target_label(txn.addr);
        let is_gic = target == "gic";
        let result = match denied {
            Some(reason) => {
                trace.emit(
                    Some(txn.core),
                    domain,
                    EventKind::Bus {
                        addr: txn.addr,
                        width: txn.width,
                        access: txn.kind,
                        value: if txn.kind == AccessKind::Write {
                            txn.value
                        } else {
                            0
                        },
                        security: txn.security,
                        denied: Some(reason),
                        target,
                    },
                );
                return if shim && is_gic {
                    BusResult::ShimTrap
                } else {
                    BusResult::Denied(reason)
                };
            }
            None if is_gic => {
                let v = self.gic_direct(txn, domain);
                trace.emit(
                    Some(txn.core),
                    domain,
                    EventKind::Bus {
                        addr: txn.addr,
                        width: txn.width,
                        access: txn.kind,
                        value: if txn.kind == AccessKind::Write {
                            txn.value
                        } else {
                            v.0
                        },
                        security: txn.security,
                        denied: None,
                        target,
                    },
                );
                if let Some((register, bank, changes)) = v.1 {
                    trace.emit(
                        Some(txn.core),
                        domain,
                        EventKind::GicAccess {
                            path: GicPath::Direct,
                            register,
                            bank,
                            access: txn.kind,
                            value: txn.value,
                            result: v.0,
                        },
                    );
                    let by = domain.map_or(Actor::Monitor, Actor::Domain);
                    emit_changes(trace, Some(txn.core), domain, &changes, &by);
                }
                return BusResult::Done(v.0);
            }
            None => match txn.kind {
                AccessKind::Read => self.mem.read(txn.addr, txn.width),
                AccessKind::Write => {
                    self.mem.write(txn.addr, txn.width, txn.value);
                    if txn.security == Security::NonSecure {
                        self.note_device_write(txn.addr, txn.width as u64);
                    }
                    txn.value
                }
            },
        };
        trace.emit(
            Some(txn.core),
            domain,
            EventKind::Bus {
                addr: txn.addr,
                width: txn.width,
                access: txn.kind,
                value: result,
                security: txn.security,
                denied: None,
                target,
            },
        );
        BusResult::Done(result)
    }

    fn note_device_write(&mut self, addr: u64, len: u64) {
        let p = &self.scenario.platform;
        for (i, x) in p.peripherals.iter().enumerate() {
            let w = x.data_window();
            if w.overlaps(&MemRange::new(addr, len)) {
                self.dirty[i] = !self.mem.is_zero(w);
            }
        }
    }

    /// Register access that reached the interrupt controller directly.
    #[allow(clippy::type_complexity)]
    fn gic_direct(
        &mut self,
        txn: BusTxn,
        _domain: Option<DomainId>,
    ) -> (u64, Option<(String, Option<CoreId>, Vec<Change>)>) {
        let Some((reg, bank)) = self.gic.layout().decode(txn.addr, txn.width) else {
            return (0, None);
        };
        match txn.kind {
            AccessKind::Read => {
                let v = self.gic.read_register(reg, bank, txn.security);
                (v, Some((reg.to_string(), bank, Vec::new())))
            }
            AccessKind::Write => {
                let changes = self.gic.write_register(reg, bank, txn.value, txn.security);
                (0, Some((reg.to_string(), bank, changes)))
            }
        }
    }
}

/// Record applied interrupt-controller changes, attributed to `by`.
pub fn emit_changes(
    trace: &mut Trace,
    core: Option<CoreId>,
    domain: Option<DomainId>,
    changes: &[Change],
    by: &Actor,
) {
    for c in changes {
        let kind = match *c {
            Change::Config {
                intid,
                bank,
                field,
                old,
                new,
            } => EventKind::IntConfig {
                intid,
                bank,
                field,
                old,
                new,
                by: by.clone(),
            },
            Change::Activation {
                intid,
                bank,
                from,
                to,
                cause,
            } => EventKind::IntState {
                intid,
                bank,
                from,
                to,
                cause,
                by: by.clone(),
            },
        };
        trace.emit(core, domain, kind);
    }
}
