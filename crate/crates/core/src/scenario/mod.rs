//! Scenario files: the platform map, the domains with their manifests and
//! scripts, and the user actions injected while the run progresses.

mod action;
mod emit;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use action::{Action, Addr, RunMode, SmcCall, TeardownTarget};
pub use emit::emit;
pub use parse::{parse, Diagnostic, Diagnostics, Location};

use crate::gic::{GicLayout, IntId};
use crate::ids::{CoreId, MemRange};

pub const DEFAULT_MAX_STEPS: u64 = 10_000;
pub const DEFAULT_LIVENESS_BOUND: u64 = 32;
pub const DEFAULT_DATA_WINDOW: u64 = 0x100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Temporal,
    Spatial,
    Mixed,
}

impl SharingMode {
    pub fn allows_temporal(self) -> bool {
        self != SharingMode::Spatial
    }

    pub fn allows_spatial(self) -> bool {
        self != SharingMode::Temporal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeripheralKind {
    Uart,
    Button,
    Led,
    Display,
    Network,
    Storage,
    Sensor,
    Timer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Exclusive,
    Multiplexing,
    Handover,
    ReadOnly,
    Proxy,
}

impl AccessMode {
    /// Modes that hand the holder the device itself.
    pub fn is_owning(self) -> bool {
        matches!(
            self,
            AccessMode::Exclusive | AccessMode::Multiplexing | AccessMode::Handover
        )
    }
}

macro_rules! names {
    ($ty:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$v => $s),* }
            }
            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($s => Some(<$ty>::$v),)* _ => None }
            }
            pub fn choices() -> &'static [&'static str] {
                &[$($s),*]
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

names!(SharingMode { Temporal => "temporal", Spatial => "spatial", Mixed => "mixed" });
names!(PeripheralKind {
    Uart => "uart", Button => "button", Led => "led", Display => "display",
    Network => "network", Storage => "storage", Sensor => "sensor", Timer => "timer",
});
names!(AccessMode {
    Exclusive => "exclusive", Multiplexing => "multiplexing", Handover => "handover",
    ReadOnly => "read_only", Proxy => "proxy",
});

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeripheralSpec {
    pub name: String,
    pub kind: PeripheralKind,
    pub mmio: MemRange,
    pub intids: Vec<IntId>,
    pub modes: Vec<AccessMode>,
    pub hot_plug: bool,
    /// Offset and length of the device data window inside `mmio`.
    pub data: MemRange,
    pub fire_at: Vec<u64>,
    pub fire_every: Option<u64>,
    pub jitter: u64,
}

impl PeripheralSpec {
    pub fn data_window(&self) -> MemRange {
        MemRange::new(self.mmio.base + self.data.base, self.data.size)
    }

    pub fn supports(&self, mode: AccessMode) -> bool {
        self.modes.contains(&mode)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedRegionSpec {
    pub name: String,
    pub range: MemRange,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformSpec {
    pub cores: u8,
    pub dram: MemRange,
    pub gic: GicLayout,
    pub device_key: [u8; 32],
    pub granule: u64,
    pub peripherals: Vec<PeripheralSpec>,
    pub shared_regions: Vec<SharedRegionSpec>,
}

impl PlatformSpec {
    pub fn peripheral(&self, name: &str) -> Option<usize> {
        self.peripherals.iter().position(|p| p.name == name)
    }

    pub fn shared_region(&self, name: &str) -> Option<usize> {
        self.shared_regions.iter().position(|r| r.name == name)
    }

    pub fn intid_map(&self) -> Vec<(IntId, String)> {
        self.peripherals
            .iter()
            .flat_map(|p| p.intids.iter().map(move |i| (*i, p.name.clone())))
            .collect()
    }

    pub fn peripheral_of(&self, intid: IntId) -> Option<usize> {
        self.peripherals
            .iter()
            .position(|p| p.intids.contains(&intid))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeripheralRequest {
    pub peripheral: usize,
    pub mode: AccessMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedRequest {
    pub region: usize,
    /// Indices into the scenario's domain list.
    pub peers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub scheduler: bool,
    pub shim: bool,
    pub bundle: Vec<u8>,
    pub memory_demand: u64,
    /// Fixed placement; only the scheduler has one.
    pub memory: Option<MemRange>,
    pub cores: Vec<CoreId>,
    pub binary_digest: Option<[u8; 32]>,
    pub peripherals: Vec<PeripheralRequest>,
    pub shared: Vec<SharedRequest>,
    pub script: Vec<Action>,
    pub handler: Vec<Action>,
}

impl DomainSpec {
    pub fn request(&self, peripheral: usize) -> Option<AccessMode> {
        self.peripherals
            .iter()
            .find(|r| r.peripheral == peripheral)
            .map(|r| r.mode)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UserActionKind {
    Handover { peripheral: usize, to: usize },
    Teardown { domain: usize },
    Press { peripheral: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserAction {
    pub step: u64,
    pub kind: UserActionKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub mode: SharingMode,
    pub max_steps: u64,
    pub liveness_bound: u64,
    pub platform: PlatformSpec,
    pub domains: Vec<DomainSpec>,
    pub user_actions: Vec<UserAction>,
}

impl Scenario {
    pub fn scheduler(&self) -> usize {
        self.domains
            .iter()
            .position(|d| d.scheduler)
            .expect("validated scenario has a scheduler")
    }

    pub fn domain(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// Digest of the canonical emission; binds traces to scenarios.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(emit(self).as_bytes()))
    }
}
