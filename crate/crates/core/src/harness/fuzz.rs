//! Seeded random scenarios for adversarial domain behavior.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gic::{
    GicLayout, GicRegisterId, IntId, RegisterClass, DEFAULT_DIST_BASE, DEFAULT_REDIST_BASE,
    IROUTER_IRM,
};
use crate::ids::{CoreId, MemRange};
use crate::monitor::Faults;
use crate::platform::{self, RunOptions};
use crate::scenario::{
    self, AccessMode, Action, Addr, DomainSpec, PeripheralKind, PeripheralRequest, PeripheralSpec,
    PlatformSpec, RunMode, Scenario, SharedRegionSpec, SharedRequest, SharingMode, SmcCall,
    TeardownTarget, UserAction, UserActionKind,
};
use crate::trace::TraceEvent;

use super::check::{check, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Domains hammer interrupt controller registers, owned or not.
    GicHeavy,
    /// Peripherals change hands through cedes, user actions and teardowns.
    HandoverHeavy,
    /// Domains probe memory, devices and shared regions they may not own.
    MemoryProbing,
    /// Two domains on two cores side by side.
    Spatial,
}

impl Profile {
    pub const GUARANTEE_SUITE: [Profile; 3] = [
        Profile::GicHeavy,
        Profile::HandoverHeavy,
        Profile::MemoryProbing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::GicHeavy => "gic-heavy",
            Profile::HandoverHeavy => "handover-heavy",
            Profile::MemoryProbing => "memory-probing",
            Profile::Spatial => "spatial",
        }
    }

    pub fn from_name(s: &str) -> Option<Profile> {
        [
            Profile::GicHeavy,
            Profile::HandoverHeavy,
            Profile::MemoryProbing,
            Profile::Spatial,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

pub const FUZZ_MAX_STEPS: u64 = 400;
const DRAM: MemRange = MemRange {
    base: 0x8000_0000,
    size: 0x100_0000,
};
const SCHED_MEM: u64 = 0x10_0000;

/// Seed of scenario `index` in a campaign seeded with `seed`.
pub fn scenario_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

#[allow(clippy::too_many_arguments)]
fn peripheral(
    name: &str,
    kind: PeripheralKind,
    base: u64,
    size: u64,
    intids: &[u16],
    modes: &[AccessMode],
    hot_plug: bool,
    data: MemRange,
) -> PeripheralSpec {
    PeripheralSpec {
        name: name.into(),
        kind,
        mmio: MemRange::new(base, size),
        intids: intids
            .iter()
            .map(|&i| IntId::new(i).expect("SPI"))
            .collect(),
        modes: modes.to_vec(),
        hot_plug,
        data,
        fire_at: Vec::new(),
        fire_every: None,
        jitter: 0,
    }
}

fn platform(rng: &mut ChaCha8Rng, cores: u8) -> PlatformSpec {
    use AccessMode::*;
    use PeripheralKind as K;
    let small = MemRange::new(0, 0x100);
    let mut peripherals = vec![
        peripheral(
            "uart0",
            K::Uart,
            0x1c09_0000,
            0x1000,
            &[33],
            &[Exclusive, Multiplexing],
            false,
            small,
        ),
        peripheral(
            "uart1",
            K::Uart,
            0x1c0a_0000,
            0x1000,
            &[40],
            &[Exclusive, Multiplexing],
            false,
            small,
        ),
        peripheral(
            "storage",
            K::Storage,
            0x1c0b_0000,
            0x1000,
            &[34],
            &[Exclusive, Proxy],
            false,
            small,
        ),
        peripheral(
            "display",
            K::Display,
            0x1c0c_0000,
            0x1000,
            &[35],
            &[Handover, Exclusive],
            true,
            small,
        ),
        peripheral(
            "button",
            K::Button,
            0x1c0d_0000,
            0x1000,
            &[36],
            &[Handover, Exclusive],
            true,
            small,
        ),
        peripheral(
            "network",
            K::Network,
            0x1c0e_0000,
            0x1000,
            &[37, 38],
            &[Exclusive, Proxy, Handover],
            true,
            small,
        ),
        peripheral(
            "sensor",
            K::Sensor,
            0x1c0f_0000,
            0x3000,
            &[39],
            &[Exclusive, ReadOnly],
            false,
            MemRange::new(0x1000, 0x1000),
        ),
        peripheral(
            "led",
            K::Led,
            0x1c1f_0000,
            0x1000,
            &[],
            &[Exclusive],
            false,
            small,
        ),
    ];
    for p in peripherals.iter_mut().filter(|p| !p.intids.is_empty()) {
        match rng.random_range(0..4) {
            0 => {}
            1 => {
                p.fire_at = (0..rng.random_range(1..4))
                    .map(|_| rng.random_range(0..FUZZ_MAX_STEPS))
                    .collect();
                p.fire_at.sort();
                p.fire_at.dedup();
            }
            _ => {
                p.fire_at = vec![rng.random_range(0..60)];
                p.fire_every = Some(rng.random_range(10..80));
                p.jitter = rng.random_range(0..5);
            }
        }
    }
    PlatformSpec {
        cores,
        dram: DRAM,
        gic: GicLayout::new(DEFAULT_DIST_BASE, DEFAULT_REDIST_BASE, cores as usize),
        device_key: [0x5A; 32],
        granule: 0x1000,
        peripherals,
        shared_regions: vec![
            SharedRegionSpec {
                name: "shm0".into(),
                range: MemRange::new(DRAM.base + 0x80_0000, 0x1000),
            },
            SharedRegionSpec {
                name: "shm1".into(),
                range: MemRange::new(DRAM.base + 0x80_1000, 0x1000),
            },
        ],
    }
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    profile: Profile,
    platform: &'a PlatformSpec,
    domains: usize,
}

impl Gen<'_> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        *items.choose(self.rng).expect("non-empty")
    }

    fn spi(&mut self) -> u16 {
        if self.chance(0.8) {
            self.rng.random_range(33..41)
        } else {
            self.rng.random_range(32..256)
        }
    }

    fn register(&mut self) -> (GicRegisterId, bool) {
        let class = self.pick(&RegisterClass::ALL);
        let intid = if class != RegisterClass::Irouter && self.chance(0.1) {
            self.rng.random_range(16..32)
        } else {
            self.spi()
        };
        let reg = GicRegisterId::containing(class, IntId::new(intid).expect("in range"));
        (reg, reg.is_banked())
    }

    fn gic_value(&mut self, reg: GicRegisterId) -> u64 {
        match reg.class {
            RegisterClass::Irouter => match self.rng.random_range(0..4) {
                0 => IROUTER_IRM,
                1 => self.rng.random_range(0..4),
                2 => self.rng.random_range(0..8) | (self.rng.random_range(0..2) << 8),
                _ => self.rng.random::<u64>(),
            },
            RegisterClass::Ipriorityr => {
                let b: u64 = self.pick(&[0x00, 0x40, 0x80, 0xA0, 0xFF]);
                (b * 0x0101_0101)
                    & if self.chance(0.5) {
                        0xFF << (8 * self.rng.random_range(0..4))
                    } else {
                        u32::MAX as u64
                    }
            }
            _ => match self.rng.random_range(0..3) {
                0 => u32::MAX as u64,
                1 => 1 << self.rng.random_range(0..32),
                _ => self.rng.random::<u32>() as u64,
            },
        }
    }

    fn gic_addr(&mut self) -> Addr {
        let (reg, banked) = self.register();
        if banked {
            Addr::Gicr(reg)
        } else {
            Addr::Gicd(reg)
        }
    }

    fn width(&mut self) -> Option<u8> {
        if self.chance(0.7) {
            None
        } else {
            Some(self.pick(&[1u8, 2, 4, 8]))
        }
    }

    fn device_addr(&mut self) -> Addr {
        let p = self.rng.random_range(0..self.platform.peripherals.len());
        let size = self.platform.peripherals[p].mmio.size;
        Addr::Periph {
            peripheral: p,
            offset: self.rng.random_range(0..size / 8) * 8,
        }
    }

    fn probe_addr(&mut self) -> Addr {
        match self.rng.random_range(0..6) {
            0 => Addr::Mem(self.rng.random_range(0..0x1000) * 8),
            1 => self.device_addr(),
            2 => Addr::Shm {
                region: self.rng.random_range(0..2),
                offset: self.rng.random_range(0..0x200) * 8,
            },
            3 => Addr::Abs(DRAM.base + self.rng.random_range(0..DRAM.size / 8) * 8),
            4 => Addr::Abs(DRAM.base + SCHED_MEM + self.rng.random_range(0..0x40) * 0x1000),
            _ => Addr::Abs(self.rng.random_range(0..0x1_0000_0000u64) & !7),
        }
    }

    fn domain_ref(&mut self) -> usize {
        self.rng.random_range(0..self.domains)
    }

    fn gic_action(&mut self) -> Action {
        let addr = self.gic_addr();
        let reg = match addr {
            Addr::Gicd(r) | Addr::Gicr(r) => r,
            _ => unreachable!(),
        };
        let value = self.gic_value(reg);
        match self.rng.random_range(0..4) {
            0 => Action::Read { addr, width: None },
            1 => Action::Write {
                addr,
                value,
                width: None,
            },
            2 => Action::Smc(SmcCall::GicRead { addr }),
            _ => Action::Smc(SmcCall::GicWrite { addr, value }),
        }
    }

    fn handover_action(&mut self) -> Action {
        let n = self.platform.peripherals.len();
        match self.rng.random_range(0..6) {
            0 | 1 => Action::Cede {
                peripheral: self.rng.random_range(0..n),
                to: if self.chance(0.7) {
                    Some(self.domain_ref())
                } else {
                    None
                },
            },
            2 => Action::Clear {
                peripheral: self.rng.random_range(0..n),
            },
            3 => Action::Smc(SmcCall::ShareReadOnly {
                peripheral: self.rng.random_range(0..n),
                reader: self.domain_ref(),
            }),
            4 => Action::Write {
                addr: self.device_addr(),
                value: self.rng.random(),
                width: Some(8),
            },
            _ => Action::Read {
                addr: self.device_addr(),
                width: None,
            },
        }
    }

    fn memory_action(&mut self) -> Action {
        match self.rng.random_range(0..7) {
            0 | 1 => Action::Read {
                addr: self.probe_addr(),
                width: self.width(),
            },
            2 | 3 => Action::Write {
                addr: self.probe_addr(),
                value: self.rng.random(),
                width: self.width(),
            },
            4 => Action::Send {
                region: self.rng.random_range(0..2),
                payload: (0..self.rng.random_range(1..40))
                    .map(|_| self.rng.random())
                    .collect(),
            },
            5 => Action::Recv {
                region: self.rng.random_range(0..2),
            },
            _ => Action::Smc(SmcCall::Key {
                domain: if self.chance(0.5) {
                    None
                } else {
                    Some(self.domain_ref())
                },
            }),
        }
    }

    fn misc_action(&mut self) -> Action {
        match self.rng.random_range(0..9) {
            0 => Action::Ack,
            1 => Action::Eoi,
            2 => Action::Wfi,
            3 => Action::Yield,
            4 => Action::Sleep(self.rng.random_range(1..6)),
            5 => Action::Smc(SmcCall::Attest {
                domain: self.domain_ref(),
            }),
            6 => Action::Smc(SmcCall::Raw {
                function: self.pick(&[
                    0xC200_0001u32,
                    0xC200_0002,
                    0xC200_0004,
                    0xC200_0008,
                    0xC200_00FF,
                ]),
                args: [
                    self.rng.random_range(0..4),
                    self.rng.random_range(0..3),
                    self.rng.random_range(0..8),
                    0,
                ],
            }),
            7 => Action::Smc(SmcCall::Run {
                domain: self.domain_ref(),
                mode: RunMode::Temporal { budget: 5 },
            }),
            _ => Action::Halt,
        }
    }

    fn action(&mut self) -> Action {
        let weights: [u32; 4] = match self.profile {
            Profile::GicHeavy => [6, 1, 1, 2],
            Profile::HandoverHeavy => [1, 5, 1, 2],
            Profile::MemoryProbing => [1, 1, 6, 2],
            Profile::Spatial => [4, 1, 3, 2],
        };
        let total: u32 = weights.iter().sum();
        let mut roll = self.rng.random_range(0..total);
        let mut which = 0;
        for (i, w) in weights.iter().enumerate() {
            if roll < *w {
                which = i;
                break;
            }
            roll -= w;
        }
        match which {
            0 => self.gic_action(),
            1 => self.handover_action(),
            2 => self.memory_action(),
            _ => self.misc_action(),
        }
    }

    fn handler(&mut self) -> Vec<Action> {
        match self.rng.random_range(0..10) {
            0 => Vec::new(),
            1 => vec![Action::Ack],
            2 => vec![Action::Eoi, Action::Ack],
            3 => vec![Action::Ack, self.action(), Action::Eoi],
            _ => vec![Action::Ack, Action::Eoi],
        }
    }

    fn requests(&mut self, scheduler: bool) -> Vec<PeripheralRequest> {
        let mut out = Vec::new();
        for (i, p) in self.platform.peripherals.iter().enumerate() {
            if p.kind == PeripheralKind::Led
                || !self.rng.random_bool(if scheduler { 0.35 } else { 0.3 })
            {
                continue;
            }
            let mode = *p.modes.choose(self.rng).expect("modes");
            if scheduler && mode == AccessMode::ReadOnly {
                continue;
            }
            out.push(PeripheralRequest {
                peripheral: i,
                mode,
            });
        }
        out
    }

    fn shared(&mut self, me: usize) -> Vec<SharedRequest> {
        let mut out = Vec::new();
        for region in 0..2 {
            if !self.chance(0.5) {
                continue;
            }
            let mut peers: Vec<usize> = (0..self.domains)
                .filter(|&d| d != me && self.rng.random_bool(0.6))
                .collect();
            if peers.is_empty() {
                peers.push((me + 1) % self.domains);
            }
            if peers.contains(&me) {
                continue;
            }
            out.push(SharedRequest { region, peers });
        }
        out
    }
}

/// Build scenario `seed` for `profile`.
pub fn generate(profile: Profile, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cores, mode) = match profile {
        Profile::Spatial => (2, SharingMode::Spatial),
        _ => {
            let cores = rng.random_range(1..=3u8);
            let mode = *[
                SharingMode::Temporal,
                SharingMode::Spatial,
                SharingMode::Mixed,
            ]
            .choose(&mut rng)
            .expect("non-empty");
            (cores, mode)
        }
    };
    let platform = platform(&mut rng, cores);
    let apps = match profile {
        Profile::Spatial => 1,
        _ => rng.random_range(1..=3),
    };
    let domains = apps + 1;
    let mut g = Gen {
        rng: &mut rng,
        profile,
        platform: &platform,
        domains,
    };
    let sched_cores: Vec<CoreId> = if mode == SharingMode::Temporal
        || cores == 1
        || (profile != Profile::Spatial && g.chance(0.3))
    {
        (0..cores).map(CoreId).collect()
    } else {
        vec![CoreId(0)]
    };
    let spare: Vec<u8> = (0..cores)
        .filter(|c| !sched_cores.contains(&CoreId(*c)))
        .collect();

    let mut specs = Vec::new();
    let mut sched_script = Vec::new();
    for a in 1..domains {
        let placement = if g.chance(0.2) {
            Some(MemRange::new(
                DRAM.base + SCHED_MEM + 0x10_0000 * a as u64,
                0x1_0000,
            ))
        } else {
            None
        };
        sched_script.push(Action::Smc(SmcCall::Setup {
            domain: a,
            placement,
        }));
    }
    let rounds = g.rng.random_range(2..6);
    for _ in 0..rounds {
        let target = g.rng.random_range(1..domains);
        let spatial = mode.allows_spatial()
            && !spare.is_empty()
            && (!mode.allows_temporal() || g.chance(0.5));
        let run = if spatial {
            let c = *spare.choose(g.rng).expect("spare core");
            RunMode::Spatial { cores: 1 << c }
        } else {
            RunMode::Temporal {
                budget: g.rng.random_range(5..60),
            }
        };
        sched_script.push(Action::Smc(SmcCall::Run {
            domain: target,
            mode: run,
        }));
        for _ in 0..g.rng.random_range(0..5) {
            let a = g.action();
            sched_script.push(a);
        }
        if g.chance(0.4) {
            sched_script.push(Action::Sleep(g.rng.random_range(1..20)));
        }
    }
    if g.chance(0.3) {
        sched_script.push(Action::Smc(SmcCall::Teardown(TeardownTarget::Domain(
            g.rng.random_range(1..domains),
        ))));
    }

    specs.push(DomainSpec {
        name: "legacy".into(),
        scheduler: true,
        shim: g.chance(0.5),
        bundle: b"legacy-os".to_vec(),
        memory_demand: 0,
        memory: Some(MemRange::new(DRAM.base, SCHED_MEM)),
        cores: sched_cores,
        binary_digest: None,
        peripherals: g.requests(true),
        shared: g.shared(0),
        script: sched_script,
        handler: g.handler(),
    });
    for a in 1..domains {
        let len = g.rng.random_range(4..30);
        let mut script: Vec<Action> = (0..len).map(|_| g.action()).collect();
        if g.chance(0.3) {
            script.push(Action::Smc(SmcCall::Teardown(TeardownTarget::Own)));
        }
        specs.push(DomainSpec {
            name: format!("app{a}"),
            scheduler: false,
            shim: g.chance(0.5),
            bundle: format!("app-{a}-{seed}").into_bytes(),
            memory_demand: g.rng.random_range(1..0x40) * 0x400,
            memory: None,
            cores: Vec::new(),
            binary_digest: None,
            peripherals: g.requests(false),
            shared: g.shared(a),
            script,
            handler: g.handler(),
        });
    }
    let mut user_actions = Vec::new();
    let n_user = match profile {
        Profile::HandoverHeavy => g.rng.random_range(2..8),
        _ => g.rng.random_range(0..2),
    };
    for _ in 0..n_user {
        let step = g.rng.random_range(0..FUZZ_MAX_STEPS);
        let handover: Vec<usize> = platform
            .peripherals
            .iter()
            .enumerate()
            .filter(|(_, p)| p.supports(AccessMode::Handover))
            .map(|(i, _)| i)
            .collect();
        let kind = match g.rng.random_range(0..4) {
            0 | 1 => UserActionKind::Handover {
                peripheral: *handover.choose(g.rng).expect("handover devices"),
                to: g.rng.random_range(0..domains),
            },
            2 => UserActionKind::Press {
                peripheral: g.rng.random_range(0..platform.peripherals.len()),
            },
            _ => UserActionKind::Teardown {
                domain: g.rng.random_range(1..domains),
            },
        };
        user_actions.push(UserAction { step, kind });
    }
    user_actions.sort_by_key(|u| u.step);
    Scenario {
        name: format!("{}-{seed:016x}", profile.name()),
        mode,
        max_steps: FUZZ_MAX_STEPS,
        liveness_bound: scenario::DEFAULT_LIVENESS_BOUND,
        platform,
        domains: specs,
        user_actions,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuzzFinding {
    pub index: u64,
    pub seed: u64,
    pub violation: Violation,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FuzzSummary {
    pub runs: u64,
    pub steps: u64,
    pub events: u64,
    pub findings: Vec<FuzzFinding>,
    /// Generated scenarios the parser rejected on re-reading.
    pub invalid: Vec<(u64, String)>,
}

/// A generated scenario with its trace and findings.
pub type FuzzRun = (Arc<Scenario>, Vec<TraceEvent>, Vec<Violation>);

/// One fuzz case: generate, run, check.
pub fn fuzz_one(profile: Profile, seed: u64, faults: Faults) -> Result<FuzzRun, String> {
    let s = generate(profile, seed);
    let reparsed = scenario::parse(&scenario::emit(&s)).map_err(|e| e.to_string())?;
    if reparsed != s {
        return Err("generated scenario does not survive a text round trip".into());
    }
    let s = Arc::new(s);
    let trace = platform::run(
        s.clone(),
        RunOptions {
            seed,
            faults,
            max_steps: None,
        },
    )?;
    let violations = check(&s, &trace).map_err(|e| e.to_string())?;
    Ok((s, trace, violations))
}

/// Run `count` cases in parallel; results are merged in seed order.
pub fn fuzz(seed: u64, count: u64, profiles: &[Profile]) -> FuzzSummary {
    let results: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = scenario_seed(seed, i);
            let profile = profiles[(i % profiles.len() as u64) as usize];
            (i, s, fuzz_one(profile, s, Faults::none()))
        })
        .collect();
    let mut out = FuzzSummary::default();
    for (index, seed, r) in results {
        out.runs += 1;
        match r {
            Ok((_, trace, violations)) => {
                if let Some(crate::trace::EventKind::RunEnd { steps, .. }) =
                    trace.last().map(|e| &e.kind)
                {
                    out.steps += steps;
                }
                out.events += trace.len() as u64;
                out.findings
                    .extend(violations.into_iter().map(|violation| FuzzFinding {
                        index,
                        seed,
                        violation,
                    }));
            }
            Err(e) => out.invalid.push((index, e)),
        }
    }
    out
}
