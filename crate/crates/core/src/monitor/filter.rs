//! Ownership-filtered access to the interrupt controller, used by the
//! monitor call and by the compatibility shim.

use std::collections::BTreeSet;

use crate::gic::{requested_state, GicRegisterId, IntId, RegisterClass, IROUTER_IRM};
use crate::ids::{AccessKind, CoreId};
use crate::platform::{emit_changes, Hardware};
use crate::trace::{Actor, EventKind, GicPath, Trace};

use super::{fault, Fault, Monitor, Outcome};

/// Bits of `reg` that describe interrupts in `owned`.
pub fn access_mask(reg: GicRegisterId, owned: &BTreeSet<IntId>) -> u64 {
    reg.covered_intids()
        .filter_map(|v| IntId::new(v as u16).ok())
        .filter(|i| owned.contains(i))
        .filter_map(|i| reg.field_of(i))
        .fold(0, |m, f| m | reg.field_mask(f))
}

impl Monitor {
    #[allow(clippy::too_many_arguments)]
    pub fn gic_access(
        &mut self,
        hw: &mut Hardware,
        trace: &mut Trace,
        core: CoreId,
        addr: u64,
        kind: AccessKind,
        value: u64,
        path: GicPath,
    ) -> Outcome {
        let caller = hw
            .occupant(core)
            .expect("requests come from a running domain");
        let layout = *hw.gic.layout();
        if !layout.contains(addr) {
            return fault(format!("{addr:#x} is outside the interrupt controller"));
        }
        let record = |trace: &mut Trace, register: String, bank, result| {
            trace.emit(
                Some(core),
                Some(caller),
                EventKind::GicAccess {
                    path,
                    register,
                    bank,
                    access: kind,
                    value,
                    result,
                },
            );
        };
        let Some((reg, bank)) = [4u8, 8].into_iter().find_map(|w| layout.decode(addr, w)) else {
            record(trace, "unmodeled".into(), None, 0);
            return Ok(0);
        };
        let owned = &self.domains[caller.0 as usize].intids;
        let mut mask = access_mask(reg, owned);
        let skip = if reg.class.is_state_class() {
            Fault::SkipStateMask
        } else {
            Fault::SkipAccessMask
        };
        if self.faults.has(skip) {
            mask = reg.word_mask();
        }
        let name = reg.to_string();
        match kind {
            AccessKind::Read => {
                let result = hw.gic.read_state(reg, bank) & mask;
                record(trace, name, bank, result);
                Ok(result)
            }
            AccessKind::Write => {
                record(trace, name.clone(), bank, 0);
                trace.emit(
                    Some(core),
                    Some(caller),
                    EventKind::LockAcquire {
                        register: name.clone(),
                    },
                );
                let ignored = match reg.class {
                    RegisterClass::Groupr => true,
                    RegisterClass::Irouter => {
                        value & IROUTER_IRM != 0
                            || value >> 8 != 0
                            || !hw.cores_of(caller).contains(&CoreId(value as u8))
                    }
                    _ => false,
                };
                if !ignored && mask != 0 {
                    let value = value & reg.word_mask();
                    let old = hw.gic.read_state(reg, bank);
                    let new = (old & !mask) | (requested_state(reg.class, old, value) & mask);
                    let changes = hw.gic.store_state(reg, bank, new);
                    emit_changes(
                        trace,
                        Some(core),
                        Some(caller),
                        &changes,
                        &Actor::Domain(caller),
                    );
                }
                trace.emit(
                    Some(core),
                    Some(caller),
                    EventKind::LockRelease { register: name },
                );
                Ok(0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(v: &[u16]) -> BTreeSet<IntId> {
        v.iter().map(|&i| IntId::new(i).unwrap()).collect()
    }

    #[test]
    fn enable_mask_covers_owned_bits() {
        let reg = GicRegisterId::new(RegisterClass::Isenabler, 1);
        assert_eq!(access_mask(reg, &owned(&[34, 40])), 0x104);
    }

    #[test]
    fn priority_mask_covers_owned_byte() {
        let reg = GicRegisterId::new(RegisterClass::Ipriorityr, 8);
        assert_eq!(access_mask(reg, &owned(&[34])), 0x00FF_0000);
    }

    #[test]
    fn router_mask_is_all_or_nothing() {
        let reg = GicRegisterId::new(RegisterClass::Irouter, 34);
        assert_eq!(access_mask(reg, &owned(&[34])), u64::MAX);
        assert_eq!(access_mask(reg, &owned(&[35])), 0);
    }

    #[test]
    fn set_enable_merge_keeps_foreign_bits() {
        let reg = GicRegisterId::new(RegisterClass::Isenabler, 1);
        let mask = access_mask(reg, &owned(&[34, 40]));
        let old = 0x11;
        let new = (old & !mask) | (requested_state(reg.class, old, 0xFFFF_FFFF) & mask);
        assert_eq!(new, 0x115);
        assert_eq!(0xDEAD_BEEF & access_mask(reg, &owned(&[34])), 0x4);
    }
}
