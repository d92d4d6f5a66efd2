//! Canonical re-emission of a parsed scenario.

use std::fmt::Write;

use super::action::{render_action, Names};
use super::*;

fn q(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    let parts: Vec<String> = items.iter().map(f).collect();
    format!("[{}]", parts.join(", "))
}

fn range(r: &MemRange) -> String {
    format!("{{ base = {:#x}, size = {:#x} }}", r.base, r.size)
}

/// Render `s` in the scenario format. Parsing the result yields `s` again.
pub fn emit(s: &Scenario) -> String {
    let p = &s.platform;
    let peripheral_names: Vec<String> = p.peripherals.iter().map(|x| x.name.clone()).collect();
    let region_names: Vec<String> = p.shared_regions.iter().map(|x| x.name.clone()).collect();
    let domain_names: Vec<String> = s.domains.iter().map(|x| x.name.clone()).collect();
    let names = Names {
        peripherals: &peripheral_names,
        regions: &region_names,
        domains: &domain_names,
    };

    let mut o = String::new();
    let _ = writeln!(o, "name = {}", q(&s.name));
    let _ = writeln!(o, "mode = {}", q(s.mode.name()));
    let _ = writeln!(o, "max_steps = {}", s.max_steps);
    let _ = writeln!(o, "liveness_bound = {}", s.liveness_bound);
    let _ = writeln!(o, "\n[platform]");
    let _ = writeln!(o, "cores = {}", p.cores);
    let _ = writeln!(o, "dram = {}", range(&p.dram));
    let _ = writeln!(o, "gic_base = {:#x}", p.gic.dist_base);
    let _ = writeln!(o, "redist_base = {:#x}", p.gic.redist_base);
    let _ = writeln!(o, "device_key = {}", q(&hex::encode(p.device_key)));
    let _ = writeln!(o, "granule = {:#x}", p.granule);
    for x in &p.peripherals {
        let _ = writeln!(o, "\n[[platform.peripheral]]");
        let _ = writeln!(o, "name = {}", q(&x.name));
        let _ = writeln!(o, "kind = {}", q(x.kind.name()));
        let _ = writeln!(o, "base = {:#x}", x.mmio.base);
        let _ = writeln!(o, "size = {:#x}", x.mmio.size);
        let _ = writeln!(o, "intids = {}", list(&x.intids, |i| i.to_string()));
        let _ = writeln!(o, "modes = {}", list(&x.modes, |m| q(m.name())));
        let _ = writeln!(o, "hot_plug = {}", x.hot_plug);
        let _ = writeln!(
            o,
            "data = {{ offset = {:#x}, len = {:#x} }}",
            x.data.base, x.data.size
        );
        let _ = writeln!(o, "fire_at = {}", list(&x.fire_at, |v| v.to_string()));
        if let Some(e) = x.fire_every {
            let _ = writeln!(o, "fire_every = {e}");
        }
        let _ = writeln!(o, "jitter = {}", x.jitter);
    }
    for r in &p.shared_regions {
        let _ = writeln!(o, "\n[[platform.shared_region]]");
        let _ = writeln!(o, "name = {}", q(&r.name));
        let _ = writeln!(o, "base = {:#x}", r.range.base);
        let _ = writeln!(o, "size = {:#x}", r.range.size);
    }
    for d in &s.domains {
        let _ = writeln!(o, "\n[[domain]]");
        let _ = writeln!(o, "name = {}", q(&d.name));
        let _ = writeln!(o, "scheduler = {}", d.scheduler);
        let _ = writeln!(o, "shim = {}", d.shim);
        let _ = writeln!(o, "bundle = {}", q(&String::from_utf8_lossy(&d.bundle)));
        let _ = writeln!(o, "memory_demand = {:#x}", d.memory_demand);
        if let Some(m) = &d.memory {
            let _ = writeln!(o, "memory = {}", range(m));
        }
        if d.scheduler {
            let _ = writeln!(o, "cores = {}", list(&d.cores, |c| c.0.to_string()));
        }
        if let Some(b) = &d.binary_digest {
            let _ = writeln!(o, "binary_digest = {}", q(&hex::encode(b)));
        }
        let _ = writeln!(
            o,
            "peripherals = {}",
            list(&d.peripherals, |r| format!(
                "{{ name = {}, mode = {} }}",
                q(&peripheral_names[r.peripheral]),
                q(r.mode.name())
            ))
        );
        let _ = writeln!(
            o,
            "shared = {}",
            list(&d.shared, |r| format!(
                "{{ region = {}, peers = {} }}",
                q(&region_names[r.region]),
                list(&r.peers, |p| q(&domain_names[*p]))
            ))
        );
        for (key, block) in [("script", &d.script), ("handler", &d.handler)] {
            let _ = writeln!(o, "{key} = [");
            for a in block {
                let _ = writeln!(o, "  {},", q(&render_action(a, &names)));
            }
            let _ = writeln!(o, "]");
        }
    }
    for u in &s.user_actions {
        let _ = writeln!(o, "\n[[user_action]]");
        let _ = writeln!(o, "step = {}", u.step);
        match &u.kind {
            UserActionKind::Handover { peripheral, to } => {
                let _ = writeln!(o, "action = \"handover\"");
                let _ = writeln!(o, "peripheral = {}", q(&peripheral_names[*peripheral]));
                let _ = writeln!(o, "to = {}", q(&domain_names[*to]));
            }
            UserActionKind::Teardown { domain } => {
                let _ = writeln!(o, "action = \"teardown\"");
                let _ = writeln!(o, "domain = {}", q(&domain_names[*domain]));
            }
            UserActionKind::Press { peripheral } => {
                let _ = writeln!(o, "action = \"press\"");
                let _ = writeln!(o, "peripheral = {}", q(&peripheral_names[*peripheral]));
            }
        }
    }
    o
}
