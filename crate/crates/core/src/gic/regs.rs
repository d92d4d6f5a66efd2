//! Register classes, field packing, and the distributor/redistributor
//! address map.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::IntId;
use crate::ids::CoreId;

/// Size of the distributor frame.
pub const DIST_SIZE: u64 = 0x1_0000;
/// Each redistributor has an RD frame followed by an SGI/PPI frame.
pub const REDIST_STRIDE: u64 = 0x2_0000;
pub const SGI_FRAME_OFFSET: u64 = 0x1_0000;

pub const DEFAULT_DIST_BASE: u64 = 0x2F00_0000;
pub const DEFAULT_REDIST_BASE: u64 = 0x2F10_0000;

/// IROUTER.Interrupt_Routing_Mode: route to any participating core.
pub const IROUTER_IRM: u64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegisterClass {
    Groupr,
    Isenabler,
    Icenabler,
    Ispendr,
    Icpendr,
    Isactiver,
    Icactiver,
    Ipriorityr,
    Icfgr,
    Irouter,
}

/// How a write value maps onto the state it touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteSemantics {
    /// The written word is the new state.
    Plain,
    /// Ones set state bits, zeros are ignored.
    SetOnOne,
    /// Ones clear state bits, zeros are ignored.
    ClearOnOne,
}

impl RegisterClass {
    pub const ALL: [RegisterClass; 10] = [
        RegisterClass::Groupr,
        RegisterClass::Isenabler,
        RegisterClass::Icenabler,
        RegisterClass::Ispendr,
        RegisterClass::Icpendr,
        RegisterClass::Isactiver,
        RegisterClass::Icactiver,
        RegisterClass::Ipriorityr,
        RegisterClass::Icfgr,
        RegisterClass::Irouter,
    ];

    /// Bits per INTID field.
    pub fn field_width(self) -> u32 {
        match self {
            RegisterClass::Ipriorityr => 8,
            RegisterClass::Icfgr => 2,
            RegisterClass::Irouter => 64,
            _ => 1,
        }
    }

    pub fn register_bits(self) -> u32 {
        match self {
            RegisterClass::Irouter => 64,
            _ => 32,
        }
    }

    pub fn fields_per_register(self) -> u32 {
        self.register_bits() / self.field_width()
    }

    pub fn width_bytes(self) -> u8 {
        (self.register_bits() / 8) as u8
    }

    pub fn write_semantics(self) -> WriteSemantics {
        match self {
            RegisterClass::Isenabler | RegisterClass::Ispendr | RegisterClass::Isactiver => {
                WriteSemantics::SetOnOne
            }
            RegisterClass::Icenabler | RegisterClass::Icpendr | RegisterClass::Icactiver => {
                WriteSemantics::ClearOnOne
            }
            _ => WriteSemantics::Plain,
        }
    }

    /// True for classes that change activation state rather than configuration.
    pub fn is_state_class(self) -> bool {
        matches!(
            self,
            RegisterClass::Ispendr
                | RegisterClass::Icpendr
                | RegisterClass::Isactiver
                | RegisterClass::Icactiver
        )
    }

    /// Offset of index 0 inside the distributor (and, for the banked
    /// classes, inside the SGI/PPI frame).
    pub fn frame_offset(self) -> u64 {
        match self {
            RegisterClass::Groupr => 0x0080,
            RegisterClass::Isenabler => 0x0100,
            RegisterClass::Icenabler => 0x0180,
            RegisterClass::Ispendr => 0x0200,
            RegisterClass::Icpendr => 0x0280,
            RegisterClass::Isactiver => 0x0300,
            RegisterClass::Icactiver => 0x0380,
            RegisterClass::Ipriorityr => 0x0400,
            RegisterClass::Icfgr => 0x0C00,
            RegisterClass::Irouter => 0x6000,
        }
    }

    /// Number of register slots the block occupies in the frame.
    fn block_slots(self) -> u64 {
        match self {
            RegisterClass::Ipriorityr => 0x100,
            RegisterClass::Icfgr => 0x40,
            RegisterClass::Irouter => 0x400,
            _ => 0x20,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegisterClass::Groupr => "GROUPR",
            RegisterClass::Isenabler => "ISENABLER",
            RegisterClass::Icenabler => "ICENABLER",
            RegisterClass::Ispendr => "ISPENDR",
            RegisterClass::Icpendr => "ICPENDR",
            RegisterClass::Isactiver => "ISACTIVER",
            RegisterClass::Icactiver => "ICACTIVER",
            RegisterClass::Ipriorityr => "IPRIORITYR",
            RegisterClass::Icfgr => "ICFGR",
            RegisterClass::Irouter => "IROUTER",
        }
    }

    pub fn from_name(name: &str) -> Option<RegisterClass> {
        RegisterClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

/// One modeled register: a class plus its index within the class block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GicRegisterId {
    pub class: RegisterClass,
    pub index: u32,
}

impl GicRegisterId {
    pub fn new(class: RegisterClass, index: u32) -> Self {
        GicRegisterId { class, index }
    }

    /// Register holding the field of `intid` for `class`.
    pub fn containing(class: RegisterClass, intid: IntId) -> Self {
        let index = match class {
            RegisterClass::Irouter => intid.value() as u32,
            _ => intid.value() as u32 / class.fields_per_register(),
        };
        GicRegisterId { class, index }
    }

    /// Half-open INTID range the register's fields describe.
    pub fn covered_intids(&self) -> Range<u32> {
        match self.class {
            RegisterClass::Irouter => self.index..self.index + 1,
            c => {
                let n = c.fields_per_register();
                self.index * n..(self.index + 1) * n
            }
        }
    }

    /// Position of `intid`'s field, if the register covers it.
    pub fn field_of(&self, intid: IntId) -> Option<u32> {
        let r = self.covered_intids();
        let v = intid.value() as u32;
        r.contains(&v).then(|| v - r.start)
    }

    /// Bit mask covering field number `field`.
    pub fn field_mask(&self, field: u32) -> u64 {
        let w = self.class.field_width();
        if w == 64 {
            u64::MAX
        } else {
            ((1u64 << w) - 1) << (field * w)
        }
    }

    pub fn word_mask(&self) -> u64 {
        if self.class.register_bits() == 64 {
            u64::MAX
        } else {
            u32::MAX as u64
        }
    }

    /// Whether the register's fields describe SGIs/PPIs and therefore live
    /// in the per-core redistributor frame.
    pub fn is_banked(&self) -> bool {
        self.class != RegisterClass::Irouter && self.covered_intids().start < 32
    }

    /// Whether the register exists in this model at all.
    pub fn is_modeled(&self) -> bool {
        let r = self.covered_intids();
        match self.class {
            RegisterClass::Irouter => (32..256).contains(&r.start),
            _ => r.end <= 256,
        }
    }
}

impl fmt::Display for GicRegisterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.class.name(), self.index)
    }
}

/// Where the distributor and redistributors sit in the physical map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GicLayout {
    pub dist_base: u64,
    pub redist_base: u64,
    pub cores: usize,
}

impl GicLayout {
    pub fn new(dist_base: u64, redist_base: u64, cores: usize) -> Self {
        GicLayout {
            dist_base,
            redist_base,
            cores,
        }
    }

    /// One contiguous window covering distributor and all redistributors.
    pub fn window(&self) -> Range<u64> {
        self.dist_base..self.redist_base + self.cores as u64 * REDIST_STRIDE
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.window().contains(&addr)
    }

    /// Resolve an access to a modeled register. `None` means the access
    /// lands on something read-as-zero/write-ignored.
    pub fn decode(&self, addr: u64, width: u8) -> Option<(GicRegisterId, Option<CoreId>)> {
        if (self.dist_base..self.dist_base + DIST_SIZE).contains(&addr) {
            let reg = decode_frame(addr - self.dist_base, width)?;
            // With affinity routing enabled the distributor copies of the
            // banked registers are RAZ/WI.
            return (!reg.is_banked()).then_some((reg, None));
        }
        let rd_end = self.redist_base + self.cores as u64 * REDIST_STRIDE;
        if (self.redist_base..rd_end).contains(&addr) {
            let rel = addr - self.redist_base;
            let core = CoreId((rel / REDIST_STRIDE) as u8);
            let off = rel % REDIST_STRIDE;
            let off = off.checked_sub(SGI_FRAME_OFFSET)?;
            let reg = decode_frame(off, width)?;
            return reg.is_banked().then_some((reg, Some(core)));
        }
        None
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn address_of(&self, reg: GicRegisterId, bank: Option<CoreId>) -> u64 {
        let slot = reg.class.width_bytes() as u64;
        let off = reg.class.frame_offset() + reg.index as u64 * slot;
        match bank {
            Some(core) if reg.is_banked() => {
                self.redist_base + core.0 as u64 * REDIST_STRIDE + SGI_FRAME_OFFSET + off
            }
            _ => self.dist_base + off,
        }
    }
}

fn decode_frame(off: u64, width: u8) -> Option<GicRegisterId> {
    for class in RegisterClass::ALL {
        let slot = class.width_bytes() as u64;
        let start = class.frame_offset();
        let end = start + class.block_slots() * slot;
        if (start..end).contains(&off) {
            if width != class.width_bytes() || !(off - start).is_multiple_of(slot) {
                return None;
            }
            let reg = GicRegisterId::new(class, ((off - start) / slot) as u32);
            return reg.is_modeled().then_some(reg);
        }
    }
    None
}
