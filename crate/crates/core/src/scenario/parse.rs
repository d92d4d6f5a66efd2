//! TOML front end with line/column diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use super::action::{parse_action, Names};
use super::*;
use crate::asc::DEFAULT_GRANULE;
use crate::gic::{DEFAULT_DIST_BASE, DEFAULT_REDIST_BASE};

pub const MAX_CORES: u8 = 8;
const DEFAULT_DEVICE_KEY: [u8; 32] = [0x5A; 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub message: String,
    /// Primary location first; further entries are related sites.
    pub locations: Vec<Location>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.locations.split_first() {
            Some((l, rest)) => {
                write!(f, "{}:{}: {}", l.line, l.column, self.message)?;
                for r in rest {
                    write!(f, " (see also {}:{})", r.line, r.column)?;
                }
                Ok(())
            }
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostics {}

type S<T> = Spanned<T>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: S<String>,
    mode: Option<S<String>>,
    max_steps: Option<u64>,
    liveness_bound: Option<u64>,
    platform: RawPlatform,
    #[serde(default)]
    domain: Vec<RawDomain>,
    #[serde(default)]
    user_action: Vec<RawUserAction>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    base: u64,
    size: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlatform {
    cores: S<u8>,
    dram: S<RawRange>,
    gic_base: Option<S<u64>>,
    redist_base: Option<S<u64>>,
    device_key: Option<S<String>>,
    granule: Option<S<u64>>,
    #[serde(default)]
    peripheral: Vec<RawPeripheral>,
    #[serde(default)]
    shared_region: Vec<RawShared>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    offset: u64,
    len: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeripheral {
    name: S<String>,
    kind: S<String>,
    base: S<u64>,
    size: u64,
    #[serde(default)]
    intids: Vec<S<u16>>,
    modes: Vec<S<String>>,
    #[serde(default)]
    hot_plug: bool,
    data: Option<S<RawData>>,
    #[serde(default)]
    fire_at: Vec<u64>,
    fire_every: Option<S<u64>>,
    #[serde(default)]
    jitter: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShared {
    name: S<String>,
    base: S<u64>,
    size: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRequest {
    name: S<String>,
    mode: S<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSharedRequest {
    region: S<String>,
    peers: Vec<S<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    name: S<String>,
    #[serde(default)]
    scheduler: Option<S<bool>>,
    #[serde(default)]
    shim: bool,
    #[serde(default)]
    bundle: String,
    #[serde(default)]
    memory_demand: Option<S<u64>>,
    memory: Option<S<RawRange>>,
    cores: Option<S<Vec<u8>>>,
    binary_digest: Option<S<String>>,
    #[serde(default)]
    peripherals: Vec<RawRequest>,
    #[serde(default)]
    shared: Vec<RawSharedRequest>,
    #[serde(default)]
    script: Vec<S<String>>,
    #[serde(default)]
    handler: Vec<S<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUserAction {
    step: u64,
    action: S<String>,
    peripheral: Option<S<String>>,
    to: Option<S<String>>,
    domain: Option<S<String>>,
}

struct Ctx<'t> {
    text: &'t str,
    // Byte offset of each line start.
    lines: Vec<usize>,
    diags: Vec<Diagnostic>,
}

impl<'t> Ctx<'t> {
    fn new(text: &'t str) -> Self {
        let lines = std::iter::once(0)
            .chain(text.match_indices('\n').map(|(i, _)| i + 1))
            .collect();
        Ctx {
            text,
            lines,
            diags: Vec::new(),
        }
    }

    fn loc(&self, offset: usize) -> Location {
        let line = self.lines.partition_point(|&s| s <= offset);
        let start = self.lines[line - 1];
        let column = self.text[start..offset.min(self.text.len())]
            .chars()
            .count()
            + 1;
        Location { line, column }
    }

    fn error(&mut self, spans: &[Range<usize>], message: impl Into<String>) {
        let locations = spans.iter().map(|s| self.loc(s.start)).collect();
        self.diags.push(Diagnostic {
            message: message.into(),
            locations,
        });
    }
}

fn aligned(r: MemRange, granule: u64) -> bool {
    r.size > 0 && r.base.is_multiple_of(granule) && r.size.is_multiple_of(granule)
}

/// Parse and validate a scenario. All problems found are reported at once.
pub fn parse(text: &str) -> Result<Scenario, Diagnostics> {
    let mut cx = Ctx::new(text);
    let raw: RawScenario = match toml::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            let span = e.span().unwrap_or(0..0);
            cx.error(&[span], e.message().to_string());
            return Err(Diagnostics(cx.diags));
        }
    };
    let scenario = build(&mut cx, raw);
    if cx.diags.is_empty() {
        Ok(scenario.expect("no diagnostics implies a scenario"))
    } else {
        Err(Diagnostics(cx.diags))
    }
}

fn build(cx: &mut Ctx<'_>, raw: RawScenario) -> Option<Scenario> {
    let mode = match &raw.mode {
        None => SharingMode::Mixed,
        Some(m) => SharingMode::from_name(m.get_ref()).unwrap_or_else(|| {
            cx.error(
                &[m.span()],
                format!("mode must be one of {:?}", SharingMode::choices()),
            );
            SharingMode::Mixed
        }),
    };
    if raw.name.get_ref().is_empty() {
        cx.error(&[raw.name.span()], "scenario name is empty");
    }
    let platform = build_platform(cx, &raw.platform);
    let domains = build_domains(cx, &raw.domain, &platform);
    let user_actions = build_user_actions(cx, &raw.user_action, &platform, &domains);
    Some(Scenario {
        name: raw.name.into_inner(),
        mode,
        max_steps: raw.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
        liveness_bound: raw.liveness_bound.unwrap_or(DEFAULT_LIVENESS_BOUND),
        platform,
        domains,
        user_actions,
    })
}

fn build_platform(cx: &mut Ctx<'_>, raw: &RawPlatform) -> PlatformSpec {
    let cores = *raw.cores.get_ref();
    if cores == 0 || cores > MAX_CORES {
        cx.error(
            &[raw.cores.span()],
            format!("cores must be between 1 and {MAX_CORES}"),
        );
    }
    let granule = raw.granule.as_ref().map_or(DEFAULT_GRANULE, |g| {
        let v = *g.get_ref();
        if !v.is_power_of_two() || v < 16 {
            cx.error(&[g.span()], "granule must be a power of two of at least 16");
            DEFAULT_GRANULE
        } else {
            v
        }
    });
    let dram = MemRange::new(raw.dram.get_ref().base, raw.dram.get_ref().size);
    if !aligned(dram, granule) {
        cx.error(
            &[raw.dram.span()],
            "dram must be non-empty and granule aligned",
        );
    }
    let dist = raw
        .gic_base
        .as_ref()
        .map_or(DEFAULT_DIST_BASE, |s| *s.get_ref());
    let redist = raw
        .redist_base
        .as_ref()
        .map_or(DEFAULT_REDIST_BASE, |s| *s.get_ref());
    let gic = GicLayout::new(dist, redist, cores.clamp(1, MAX_CORES) as usize);
    let gic_span = raw
        .gic_base
        .as_ref()
        .or(raw.redist_base.as_ref())
        .map_or(raw.cores.span(), |s| s.span());
    let win = gic.window();
    let gic_range = MemRange::new(win.start, win.end.saturating_sub(win.start));
    if redist < dist + crate::gic::DIST_SIZE || !aligned(gic_range, granule) {
        cx.error(
            std::slice::from_ref(&gic_span),
            "GIC distributor and redistributors must be ordered and granule aligned",
        );
    }
    if gic_range.overlaps(&dram) {
        cx.error(
            &[gic_span.clone(), raw.dram.span()],
            "GIC window overlaps dram",
        );
    }
    let device_key = match &raw.device_key {
        None => DEFAULT_DEVICE_KEY,
        Some(k) => match hex::decode(k.get_ref())
            .ok()
            .and_then(|v| v.try_into().ok())
        {
            Some(key) => key,
            None => {
                cx.error(&[k.span()], "device_key must be 64 hex digits");
                DEFAULT_DEVICE_KEY
            }
        },
    };

    // Everything that occupies the physical map, for overlap checks.
    let mut occupied: Vec<(MemRange, Range<usize>, String)> =
        vec![(gic_range, gic_span.clone(), "the GIC window".into())];
    let mut names: BTreeMap<String, Range<usize>> = BTreeMap::new();
    let mut claim_name = |cx: &mut Ctx<'_>, name: &S<String>| {
        let n = name.get_ref();
        if n == "mem" || n == "self" || n.is_empty() || n.contains(['+', ':', ' ']) {
            cx.error(&[name.span()], format!("`{n}` is not a usable name"));
        } else if let Some(prev) = names.get(n) {
            cx.error(
                &[name.span(), prev.clone()],
                format!("duplicate name `{n}`"),
            );
        } else {
            names.insert(n.clone(), name.span());
        }
    };
    let mut overlaps = |cx: &mut Ctx<'_>, r: MemRange, span: Range<usize>, what: String| {
        for (o, ospan, owhat) in &occupied {
            if o.overlaps(&r) {
                cx.error(
                    &[span.clone(), ospan.clone()],
                    format!("{what} overlaps {owhat}"),
                );
            }
        }
        occupied.push((r, span, what));
    };

    let mut peripherals = Vec::new();
    let mut intid_sites: BTreeMap<u16, (Range<usize>, String)> = BTreeMap::new();
    for p in &raw.peripheral {
        claim_name(cx, &p.name);
        let name = p.name.get_ref().clone();
        let kind = PeripheralKind::from_name(p.kind.get_ref()).unwrap_or_else(|| {
            cx.error(
                &[p.kind.span()],
                format!("kind must be one of {:?}", PeripheralKind::choices()),
            );
            PeripheralKind::Uart
        });
        let mmio = MemRange::new(*p.base.get_ref(), p.size);
        if !aligned(mmio, granule) {
            cx.error(
                &[p.base.span()],
                format!("peripheral {name} is not granule aligned"),
            );
        }
        if mmio.overlaps(&dram) {
            cx.error(
                &[p.base.span(), raw.dram.span()],
                format!("peripheral {name} overlaps dram"),
            );
        }
        overlaps(cx, mmio, p.base.span(), format!("peripheral {name}"));
        let mut intids = Vec::new();
        for i in &p.intids {
            let v = *i.get_ref();
            match IntId::new(v) {
                Ok(id) if id.is_spi() => intids.push(id),
                _ => cx.error(&[i.span()], format!("INTID {v} is not an SPI (32..256)")),
            }
            if let Some((prev, owner)) = intid_sites.get(&v) {
                cx.error(
                    &[i.span(), prev.clone()],
                    format!("INTID {v} assigned to both {owner} and {name}"),
                );
            } else {
                intid_sites.insert(v, (i.span(), name.clone()));
            }
        }
        let mut modes = Vec::new();
        for m in &p.modes {
            match AccessMode::from_name(m.get_ref()) {
                Some(mode) if !modes.contains(&mode) => modes.push(mode),
                Some(_) => cx.error(&[m.span()], "mode listed twice"),
                None => cx.error(
                    &[m.span()],
                    format!("mode must be one of {:?}", AccessMode::choices()),
                ),
            }
        }
        if modes.is_empty() {
            cx.error(
                &[p.name.span()],
                format!("peripheral {name} supports no mode"),
            );
        }
        let data = match &p.data {
            Some(d) => {
                let w = MemRange::new(d.get_ref().offset, d.get_ref().len);
                if w.size == 0 || w.end() > p.size {
                    cx.error(
                        &[d.span()],
                        "data window must be non-empty and inside the device",
                    );
                }
                if modes.contains(&AccessMode::ReadOnly) && !aligned(w, granule) {
                    cx.error(
                        &[d.span()],
                        "a read-only shareable data window must be granule aligned",
                    );
                }
                w
            }
            None => {
                if modes.contains(&AccessMode::ReadOnly) {
                    cx.error(
                        &[p.name.span()],
                        "read_only mode needs an explicit data window",
                    );
                }
                MemRange::new(0, DEFAULT_DATA_WINDOW.min(p.size.max(1)))
            }
        };
        if let Some(e) = &p.fire_every {
            if *e.get_ref() == 0 {
                cx.error(&[e.span()], "fire_every must be positive");
            }
        }
        if (!p.fire_at.is_empty() || p.fire_every.is_some()) && intids.is_empty() {
            cx.error(
                &[p.name.span()],
                format!("peripheral {name} fires but has no INTID"),
            );
        }
        peripherals.push(PeripheralSpec {
            name,
            kind,
            mmio,
            intids,
            modes,
            hot_plug: p.hot_plug,
            data,
            fire_at: p.fire_at.clone(),
            fire_every: p.fire_every.as_ref().map(|e| *e.get_ref()),
            jitter: p.jitter,
        });
    }

    let mut shared_regions = Vec::new();
    for r in &raw.shared_region {
        claim_name(cx, &r.name);
        let range = MemRange::new(*r.base.get_ref(), r.size);
        if !aligned(range, granule) {
            cx.error(&[r.base.span()], "shared region is not granule aligned");
        }
        if !dram.contains(range.base, range.size) {
            cx.error(&[r.base.span()], "shared region must lie inside dram");
        }
        if range.size < 16 {
            cx.error(&[r.base.span()], "shared region too small for a mailbox");
        }
        overlaps(
            cx,
            range,
            r.base.span(),
            format!("shared region {}", r.name.get_ref()),
        );
        shared_regions.push(SharedRegionSpec {
            name: r.name.get_ref().clone(),
            range,
        });
    }

    PlatformSpec {
        cores,
        dram,
        gic,
        device_key,
        granule,
        peripherals,
        shared_regions,
    }
}

fn build_domains(cx: &mut Ctx<'_>, raw: &[RawDomain], platform: &PlatformSpec) -> Vec<DomainSpec> {
    let mut seen: BTreeMap<&str, Range<usize>> = BTreeMap::new();
    for d in raw {
        let n = d.name.get_ref().as_str();
        if n.is_empty() || n == "self" || n.contains(char::is_whitespace) {
            cx.error(
                &[d.name.span()],
                format!("`{n}` is not a usable domain name"),
            );
        }
        if let Some(prev) = seen.get(n) {
            cx.error(
                &[d.name.span(), prev.clone()],
                format!("duplicate domain `{n}`"),
            );
        } else {
            seen.insert(n, d.name.span());
        }
    }
    let schedulers: Vec<_> = raw
        .iter()
        .filter_map(|d| {
            d.scheduler
                .as_ref()
                .filter(|s| *s.get_ref())
                .map(|s| s.span())
        })
        .collect();
    match schedulers.len() {
        0 => cx.error(
            std::slice::from_ref(&(0..0)),
            "no domain is marked scheduler",
        ),
        1 => {}
        _ => cx.error(&schedulers, "more than one domain is marked scheduler"),
    }

    let peripheral_names: Vec<String> = platform
        .peripherals
        .iter()
        .map(|p| p.name.clone())
        .collect();
    let region_names: Vec<String> = platform
        .shared_regions
        .iter()
        .map(|r| r.name.clone())
        .collect();
    let domain_names: Vec<String> = raw.iter().map(|d| d.name.get_ref().clone()).collect();
    let names = Names {
        peripherals: &peripheral_names,
        regions: &region_names,
        domains: &domain_names,
    };
    let lookup_domain = |cx: &mut Ctx<'_>, s: &S<String>| {
        let i = domain_names.iter().position(|n| n == s.get_ref());
        if i.is_none() {
            cx.error(&[s.span()], format!("unknown domain `{}`", s.get_ref()));
        }
        i
    };

    let mut out = Vec::new();
    for d in raw {
        let name = d.name.get_ref().clone();
        let scheduler = d.scheduler.as_ref().is_some_and(|s| *s.get_ref());
        let memory = d.memory.as_ref().map(|m| {
            let r = MemRange::new(m.get_ref().base, m.get_ref().size);
            if !aligned(r, platform.granule) || !platform.dram.contains(r.base, r.size) {
                cx.error(
                    &[m.span()],
                    "memory must be granule aligned and inside dram",
                );
            }
            for s in &platform.shared_regions {
                if s.range.overlaps(&r) {
                    cx.error(
                        &[m.span()],
                        format!("memory overlaps shared region {}", s.name),
                    );
                }
            }
            r
        });
        let mut cores = Vec::new();
        if let Some(c) = &d.cores {
            for &core in c.get_ref() {
                if core >= platform.cores {
                    cx.error(&[c.span()], format!("core {core} does not exist"));
                } else if cores.contains(&CoreId(core)) {
                    cx.error(&[c.span()], format!("core {core} listed twice"));
                } else {
                    cores.push(CoreId(core));
                }
            }
            cores.sort();
        }
        if scheduler {
            if memory.is_none() {
                cx.error(
                    &[d.name.span()],
                    "the scheduler needs a fixed memory placement",
                );
            }
            if cores.is_empty() {
                cx.error(&[d.name.span()], "the scheduler needs at least one core");
            }
        } else {
            if let Some(m) = &d.memory {
                cx.error(
                    &[m.span()],
                    "only the scheduler has a fixed memory placement",
                );
            }
            if let Some(c) = &d.cores {
                cx.error(&[c.span()], "only the scheduler has fixed cores");
            }
        }
        let memory_demand = match &d.memory_demand {
            Some(m) => *m.get_ref(),
            None => memory.map_or(0, |m| m.size),
        };
        if !scheduler && memory_demand == 0 {
            cx.error(
                &[d.name.span()],
                format!("domain {name} needs a positive memory_demand"),
            );
        }
        let binary_digest = d.binary_digest.as_ref().and_then(|s| {
            let v = hex::decode(s.get_ref())
                .ok()
                .and_then(|v| v.try_into().ok());
            if v.is_none() {
                cx.error(&[s.span()], "binary_digest must be 64 hex digits");
            }
            v
        });
        let mut peripherals: Vec<PeripheralRequest> = Vec::new();
        for r in &d.peripherals {
            let Some(p) = platform.peripheral(r.name.get_ref()) else {
                cx.error(
                    &[r.name.span()],
                    format!("unknown peripheral `{}`", r.name.get_ref()),
                );
                continue;
            };
            let Some(mode) = AccessMode::from_name(r.mode.get_ref()) else {
                cx.error(
                    &[r.mode.span()],
                    format!("mode must be one of {:?}", AccessMode::choices()),
                );
                continue;
            };
            if !platform.peripherals[p].supports(mode) {
                cx.error(
                    &[r.mode.span()],
                    format!("peripheral {} does not support {mode}", r.name.get_ref()),
                );
            }
            if peripherals.iter().any(|q| q.peripheral == p) {
                cx.error(&[r.name.span()], "peripheral requested twice");
            }
            peripherals.push(PeripheralRequest {
                peripheral: p,
                mode,
            });
        }
        let mut shared = Vec::new();
        for s in &d.shared {
            let Some(region) = platform.shared_region(s.region.get_ref()) else {
                cx.error(
                    &[s.region.span()],
                    format!("unknown shared region `{}`", s.region.get_ref()),
                );
                continue;
            };
            let mut peers = Vec::new();
            for p in &s.peers {
                if p.get_ref() == &name {
                    cx.error(&[p.span()], "a domain cannot list itself as a peer");
                } else if let Some(i) = lookup_domain(cx, p) {
                    peers.push(i);
                }
            }
            shared.push(SharedRequest { region, peers });
        }
        let mut script_block = |lines: &[S<String>]| {
            let mut acts = Vec::new();
            for l in lines {
                match parse_action(l.get_ref(), &names) {
                    Ok(a) => acts.push(a),
                    Err(e) => {
                        // Basic strings open with one quote character.
                        let at = l.span().start + 1 + e.at;
                        cx.error(std::slice::from_ref(&(at..at)), e.message);
                    }
                }
            }
            acts
        };
        let script = script_block(&d.script);
        let handler = script_block(&d.handler);
        out.push(DomainSpec {
            name,
            scheduler,
            shim: d.shim,
            bundle: d.bundle.as_bytes().to_vec(),
            memory_demand,
            memory,
            cores,
            binary_digest,
            peripherals,
            shared,
            script,
            handler,
        });
    }
    out
}

fn build_user_actions(
    cx: &mut Ctx<'_>,
    raw: &[RawUserAction],
    platform: &PlatformSpec,
    domains: &[DomainSpec],
) -> Vec<UserAction> {
    let mut out = Vec::new();
    for u in raw {
        let peripheral = |cx: &mut Ctx<'_>| match &u.peripheral {
            None => {
                cx.error(&[u.action.span()], "this user action needs `peripheral`");
                None
            }
            Some(p) => {
                let i = platform.peripheral(p.get_ref());
                if i.is_none() {
                    cx.error(&[p.span()], format!("unknown peripheral `{}`", p.get_ref()));
                }
                i
            }
        };
        let domain = |cx: &mut Ctx<'_>, field: &Option<S<String>>, key: &str| match field {
            None => {
                cx.error(
                    &[u.action.span()],
                    format!("this user action needs `{key}`"),
                );
                None
            }
            Some(d) => {
                let i = domains.iter().position(|x| &x.name == d.get_ref());
                if i.is_none() {
                    cx.error(&[d.span()], format!("unknown domain `{}`", d.get_ref()));
                }
                i
            }
        };
        let kind = match u.action.get_ref().as_str() {
            "handover" => {
                let p = peripheral(cx);
                let to = domain(cx, &u.to, "to");
                if let Some(p) = p {
                    if !platform.peripherals[p].supports(AccessMode::Handover) {
                        cx.error(&[u.action.span()], "peripheral does not support handover");
                    }
                }
                p.zip(to)
                    .map(|(peripheral, to)| UserActionKind::Handover { peripheral, to })
            }
            "teardown" => {
                domain(cx, &u.domain, "domain").map(|domain| UserActionKind::Teardown { domain })
            }
            "press" => peripheral(cx).map(|peripheral| UserActionKind::Press { peripheral }),
            other => {
                cx.error(
                    &[u.action.span()],
                    format!("user action must be handover, teardown or press, not `{other}`"),
                );
                None
            }
        };
        if let Some(kind) = kind {
            out.push(UserAction { step: u.step, kind });
        }
    }
    out.sort_by_key(|u| u.step);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"
[platform]
cores = 1
dram = { base = 0x80000000, size = 0x100000 }

[[domain]]
name = "legacy"
scheduler = true
memory = { base = 0x80000000, size = 0x10000 }
cores = [0]
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.domains.len(), 1);
        assert_eq!(s.mode, SharingMode::Mixed);
        assert_eq!(s.liveness_bound, 32);
    }

    #[test]
    fn duplicate_intid_cites_both_lines() {
        let text = format!(
            "{MINIMAL}\n{}",
            r#"
[[platform.peripheral]]
name = "uart0"
kind = "uart"
base = 0x1c090000
size = 0x1000
intids = [33]
modes = ["exclusive"]

[[platform.peripheral]]
name = "uart1"
kind = "uart"
base = 0x1c0a0000
size = 0x1000
intids = [33]
modes = ["exclusive"]
"#
        );
        // Tables after [[domain]] would nest under it; put platform first.
        let text = reorder(&text);
        let err = parse(&text).unwrap_err();
        let d = err
            .0
            .iter()
            .find(|d| d.message.contains("INTID 33"))
            .unwrap();
        assert_eq!(d.locations.len(), 2);
        assert_ne!(d.locations[0].line, d.locations[1].line);
    }

    // Move the peripheral tables before the domain table.
    fn reorder(text: &str) -> String {
        let (head, tail) = text.split_at(text.find("[[domain]]").unwrap());
        let (dom, periph) = tail.split_at(tail.find("[[platform.peripheral]]").unwrap());
        format!("{head}{periph}\n{dom}")
    }

    #[test]
    fn undeclared_region_is_reported() {
        let text = format!("{MINIMAL}script = [\"send shm2 hi\"]\n");
        let err = parse(&text).unwrap_err();
        assert!(err.0[0].message.contains("shm2"), "{err}");
        assert_eq!(err.0[0].locations[0].line, 12);
        assert_eq!(err.0[0].locations[0].column, 17);
    }

    #[test]
    fn two_schedulers_are_rejected() {
        let text = format!(
            "{MINIMAL}\n[[domain]]\nname = \"other\"\nscheduler = true\nmemory = {{ base = 0x80010000, size = 0x10000 }}\ncores = [0]\n"
        );
        let err = parse(&text).unwrap_err();
        let d = err
            .0
            .iter()
            .find(|d| d.message.contains("scheduler"))
            .unwrap();
        assert_eq!(d.locations.len(), 2);
    }

    #[test]
    fn syntax_errors_have_locations() {
        let err = parse("name = \"x\"\n[platform\n").unwrap_err();
        assert_eq!(err.0[0].locations[0].line, 2);
    }
}
