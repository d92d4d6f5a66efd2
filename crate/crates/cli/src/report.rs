//! Counters summarizing one run, derived from its trace.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use tzsim_core::ids::{AccessKind, DomainId};
use tzsim_core::trace::{self, EventKind, TraceEvent};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounters {
    /// Switches that resumed or launched this domain.
    pub context_switches: u64,
    pub monitor_calls: u64,
    pub gic_reads: u64,
    pub gic_writes: u64,
    pub denials: u64,
    pub deliveries: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub steps: u64,
    pub events: u64,
    pub domains: BTreeMap<u32, DomainCounters>,
    pub proxy_round_trips: u64,
    /// `None` when checking was off.
    pub violations: Option<u64>,
    pub warnings: Option<u64>,
    pub trace: Option<String>,
}

impl RunReport {
    pub fn from_trace(scenario: &str, seed: u64, events: &[TraceEvent]) -> RunReport {
        let mut domains: BTreeMap<u32, DomainCounters> = BTreeMap::new();
        let mut steps = 0;
        for e in events {
            let (who, field): (Option<DomainId>, fn(&mut DomainCounters) -> &mut u64) =
                match &e.kind {
                    EventKind::ContextSwitch { to, .. } => (*to, |c| &mut c.context_switches),
                    EventKind::MonitorCall { .. } => (e.domain, |c| &mut c.monitor_calls),
                    EventKind::GicAccess {
                        access: AccessKind::Read,
                        ..
                    } => (e.domain, |c| &mut c.gic_reads),
                    EventKind::GicAccess {
                        access: AccessKind::Write,
                        ..
                    } => (e.domain, |c| &mut c.gic_writes),
                    EventKind::Bus {
                        denied: Some(_), ..
                    } => (e.domain, |c| &mut c.denials),
                    EventKind::InterruptDelivered { .. } => (e.domain, |c| &mut c.deliveries),
                    EventKind::RunEnd { steps: s, .. } => {
                        steps = *s;
                        continue;
                    }
                    _ => continue,
                };
            if let Some(d) = who {
                *field(domains.entry(d.0).or_default()) += 1;
            }
        }
        RunReport {
            scenario: scenario.to_string(),
            seed,
            steps,
            events: events.len() as u64,
            domains,
            proxy_round_trips: trace::proxy_round_trips(events),
            violations: None,
            warnings: None,
            trace: None,
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}  seed {}", self.scenario, self.seed);
        let _ = writeln!(
            out,
            "steps {}  events {}  proxy round trips {}",
            self.steps, self.events, self.proxy_round_trips
        );
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>8} {:>9} {:>10} {:>7} {:>10}",
            "domain", "switches", "smc", "gic reads", "gic writes", "denied", "delivered"
        );
        for (d, c) in &self.domains {
            let _ = writeln!(
                out,
                "{:>6} {:>8} {:>8} {:>9} {:>10} {:>7} {:>10}",
                format!("D{d}"),
                c.context_switches,
                c.monitor_calls,
                c.gic_reads,
                c.gic_writes,
                c.denials,
                c.deliveries
            );
        }
        match (self.violations, self.warnings) {
            (Some(v), Some(w)) => {
                let _ = writeln!(out, "violations {v}  warnings {w}");
            }
            _ => {
                let _ = writeln!(out, "violations not checked");
            }
        }
        if let Some(t) = &self.trace {
            let _ = writeln!(out, "trace {t}");
        }
        out
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}
