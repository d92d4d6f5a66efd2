//! Address space controller: a table of disjoint regions, each with a
//! secure and a non-secure permission and an optional core filter.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AccessKind, CoreId, Security};

pub const DEFAULT_GRANULE: u64 = 0x1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    None,
    ReadOnly,
    ReadWrite,
}

impl Permission {
    pub fn allows(self, kind: AccessKind) -> bool {
        match (self, kind) {
            (Permission::None, _) => false,
            (Permission::ReadOnly, AccessKind::Read) => true,
            (Permission::ReadOnly, AccessKind::Write) => false,
            (Permission::ReadWrite, _) => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub base: u64,
    pub len: u64,
    pub secure: Permission,
    pub non_secure: Permission,
    /// Sorted set of cores allowed to issue non-secure accesses; `None`
    /// admits every core.
    pub cores: Option<Vec<CoreId>>,
    pub label: String,
}

impl Region {
    pub fn new(base: u64, len: u64, non_secure: Permission, label: impl Into<String>) -> Self {
        Region {
            base,
            len,
            secure: Permission::ReadWrite,
            non_secure,
            cores: None,
            label: label.into(),
        }
    }

    pub fn with_cores(mut self, cores: impl IntoIterator<Item = CoreId>) -> Self {
        let mut v: Vec<CoreId> = cores.into_iter().collect();
        v.sort();
        v.dedup();
        self.cores = Some(v);
        self
    }

    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn contains(&self, addr: u64, size: u64) -> bool {
        addr >= self.base && addr.checked_add(size).is_some_and(|e| e <= self.end())
    }

    pub fn admits_core(&self, core: CoreId) -> bool {
        self.cores.as_ref().is_none_or(|c| c.contains(&core))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Unmapped,
    CoreFilter,
    Policy,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenyReason::Unmapped => "unmapped",
            DenyReason::CoreFilter => "core_filter",
            DenyReason::Policy => "policy",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AscError {
    #[error("only the secure world may configure the address space controller")]
    NotSecure,
    #[error("region {label} at {base:#x}+{len:#x} is not aligned to {granule:#x}")]
    Misaligned {
        label: String,
        base: u64,
        len: u64,
        granule: u64,
    },
    #[error("regions {0} and {1} overlap")]
    Overlap(String, String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Asc {
    granule: u64,
    regions: Vec<Region>,
}

impl Asc {
    pub fn new(granule: u64) -> Self {
        Asc {
            granule,
            regions: Vec::new(),
        }
    }

    pub fn granule(&self) -> u64 {
        self.granule
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Replace the whole table. On any error the previous table stays.
    pub fn configure(&mut self, mut regions: Vec<Region>, by: Security) -> Result<(), AscError> {
        if by != Security::Secure {
            return Err(AscError::NotSecure);
        }
        for r in &regions {
            if r.len == 0 || r.base % self.granule != 0 || r.len % self.granule != 0 {
                return Err(AscError::Misaligned {
                    label: r.label.clone(),
                    base: r.base,
                    len: r.len,
                    granule: self.granule,
                });
            }
        }
        regions.sort_by_key(|r| r.base);
        for w in regions.windows(2) {
            if w[0].end() > w[1].base {
                return Err(AscError::Overlap(w[0].label.clone(), w[1].label.clone()));
            }
        }
        self.regions = regions;
        Ok(())
    }

    fn region_at(&self, addr: u64) -> Option<&Region> {
        let i = self.regions.partition_point(|r| r.base <= addr);
        let r = self.regions.get(i.checked_sub(1)?)?;
        (addr < r.end()).then_some(r)
    }

    /// Decide one bus transaction. Secure accesses always pass.
    pub fn check(
        &self,
        core: CoreId,
        security: Security,
        addr: u64,
        size: u64,
        kind: AccessKind,
    ) -> Result<(), DenyReason> {
        if security == Security::Secure {
            return Ok(());
        }
        let region = self
            .region_at(addr)
            .filter(|r| r.contains(addr, size))
            .ok_or(DenyReason::Unmapped)?;
        if !region.admits_core(core) {
            return Err(DenyReason::CoreFilter);
        }
        if !region.non_secure.allows(kind) {
            return Err(DenyReason::Policy);
        }
        Ok(())
    }

    /// Label of the region holding `addr`.
    pub fn label_at(&self, addr: u64) -> Option<&str> {
        self.region_at(addr).map(|r| r.label.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G: u64 = DEFAULT_GRANULE;

    fn table() -> Asc {
        let mut a = Asc::new(G);
        a.configure(
            vec![
                Region::new(0x8000_0000, 4 * G, Permission::ReadWrite, "mem"),
                Region::new(0x8000_4000, G, Permission::ReadOnly, "ro").with_cores([CoreId(1)]),
                Region::new(0x1000_0000, G, Permission::None, "locked"),
            ],
            Security::Secure,
        )
        .unwrap();
        a
    }

    #[test]
    fn decisions() {
        let a = table();
        let c0 = CoreId(0);
        let ns = Security::NonSecure;
        assert_eq!(a.check(c0, ns, 0x8000_0000, 8, AccessKind::Write), Ok(()));
        assert_eq!(
            a.check(c0, ns, 0x8000_3FFC, 8, AccessKind::Read),
            Err(DenyReason::Unmapped)
        );
        assert_eq!(
            a.check(c0, ns, 0x8000_4000, 4, AccessKind::Read),
            Err(DenyReason::CoreFilter)
        );
        assert_eq!(
            a.check(CoreId(1), ns, 0x8000_4000, 4, AccessKind::Read),
            Ok(())
        );
        assert_eq!(
            a.check(CoreId(1), ns, 0x8000_4000, 4, AccessKind::Write),
            Err(DenyReason::Policy)
        );
        assert_eq!(
            a.check(c0, ns, 0x1000_0000, 4, AccessKind::Read),
            Err(DenyReason::Policy)
        );
        assert_eq!(
            a.check(c0, ns, 0x9000_0000, 4, AccessKind::Read),
            Err(DenyReason::Unmapped)
        );
        assert_eq!(
            a.check(c0, Security::Secure, 0x1000_0000, 4, AccessKind::Write),
            Ok(())
        );
    }

    #[test]
    fn rejects_bad_tables_atomically() {
        let mut a = table();
        let before = a.clone();
        let overlap = vec![
            Region::new(0, 2 * G, Permission::ReadWrite, "a"),
            Region::new(G, G, Permission::ReadWrite, "b"),
        ];
        assert!(matches!(
            a.configure(overlap, Security::Secure),
            Err(AscError::Overlap(..))
        ));
        let odd = vec![Region::new(0x10, G, Permission::ReadWrite, "a")];
        assert!(matches!(
            a.configure(odd, Security::Secure),
            Err(AscError::Misaligned { .. })
        ));
        assert_eq!(
            a.configure(Vec::new(), Security::NonSecure),
            Err(AscError::NotSecure)
        );
        assert_eq!(a, before);
    }

    fn perm() -> impl Strategy<Value = Permission> {
        prop_oneof![
            Just(Permission::None),
            Just(Permission::ReadOnly),
            Just(Permission::ReadWrite)
        ]
    }

    // Page-granular candidate regions; overlapping ones are dropped.
    fn regions() -> impl Strategy<Value = Vec<Region>> {
        prop::collection::vec((0u64..32, 1u64..4, perm(), prop::option::of(0u8..4)), 0..8).prop_map(
            |specs| {
                let mut out: Vec<Region> = Vec::new();
                for (i, (page, pages, p, core)) in specs.into_iter().enumerate() {
                    let mut r = Region::new(page * G, pages * G, p, format!("r{i}"));
                    if let Some(c) = core {
                        r = r.with_cores([CoreId(c)]);
                    }
                    if out.iter().all(|o| r.end() <= o.base || o.end() <= r.base) {
                        out.push(r);
                    }
                }
                out
            },
        )
    }

    // Oracle: look up every byte of the access independently.
    fn oracle(
        regions: &[Region],
        core: CoreId,
        addr: u64,
        size: u64,
        kind: AccessKind,
    ) -> Result<(), DenyReason> {
        let owners: Vec<Option<&Region>> = (addr..addr + size)
            .map(|b| regions.iter().find(|r| r.base <= b && b < r.base + r.len))
            .collect();
        let first = owners[0].ok_or(DenyReason::Unmapped)?;
        if owners
            .iter()
            .any(|o| o.is_none_or(|r| r.label != first.label))
        {
            return Err(DenyReason::Unmapped);
        }
        if let Some(cores) = &first.cores {
            if !cores.contains(&core) {
                return Err(DenyReason::CoreFilter);
            }
        }
        let ok = match kind {
            AccessKind::Read => first.non_secure != Permission::None,
            AccessKind::Write => first.non_secure == Permission::ReadWrite,
        };
        if ok {
            Ok(())
        } else {
            Err(DenyReason::Policy)
        }
    }

    proptest! {
        #[test]
        fn check_matches_byte_oracle(
            rs in regions(),
            core in 0u8..4,
            addr in 0u64..(36 * G),
            size in prop_oneof![Just(1u64), Just(2), Just(4), Just(8), Just(64)],
            write in any::<bool>(),
        ) {
            let mut asc = Asc::new(G);
            asc.configure(rs.clone(), Security::Secure).unwrap();
            let kind = if write { AccessKind::Write } else { AccessKind::Read };
            let core = CoreId(core);
            prop_assert_eq!(
                asc.check(core, Security::NonSecure, addr, size, kind),
                oracle(&rs, core, addr, size, kind)
            );
            prop_assert_eq!(asc.check(core, Security::Secure, addr, size, kind), Ok(()));
        }

        #[test]
        fn accepted_tables_are_disjoint(rs in regions()) {
            let mut asc = Asc::new(G);
            asc.configure(rs, Security::Secure).unwrap();
            for w in asc.regions().windows(2) {
                prop_assert!(w[0].end() <= w[1].base);
            }
        }
    }
}
