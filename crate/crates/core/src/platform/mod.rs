//! The simulated machine: cores stepping domain scripts, peripherals
//! firing on schedule, the secure timer, and the compatibility shim.

mod bus;
mod memory;
pub mod proxy;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gic::{IntId, SPURIOUS_INTID};
use crate::ids::{AccessKind, CoreId, DomainId, Security};
use crate::monitor::{
    self, fire_peripheral, Fault, Faults, Monitor, NONE, RUN_SPATIAL, RUN_TEMPORAL,
};
use crate::scenario::{
    Action, Addr, PeripheralKind, RunMode, Scenario, SmcCall, TeardownTarget, UserAction,
};
use crate::trace::{Actor, EventKind, GicPath, Trace, TraceEvent};

pub use bus::{emit_changes, BusResult, BusTxn, Core, CpuContext, HandlerFrame, Hardware};
pub use memory::Memory;
use proxy::ProxyOutcome;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub faults: Faults,
    /// Overrides the scenario's step limit.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Flow {
    Next,
    /// Retry the same action next step.
    Blocked,
    EndHandler,
}

pub struct Machine {
    scenario: Arc<Scenario>,
    hw: Hardware,
    monitor: Monitor,
    trace: Trace,
    /// (step, peripheral), sorted.
    fires: Vec<(u64, usize)>,
    next_fire: usize,
    user: Vec<UserAction>,
    next_user: usize,
    fire_counts: Vec<u64>,
    max_steps: u64,
    steps: u64,
}

/// Steps at which each peripheral fires: the listed steps, then the
/// period continuing from the last of them, each shifted by seeded jitter.
pub fn fire_plan(scenario: &Scenario, seed: u64, max_steps: u64) -> Vec<(u64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::new();
    for (i, p) in scenario.platform.peripherals.iter().enumerate() {
        let mut times: Vec<u64> = p.fire_at.clone();
        if let Some(every) = p.fire_every.filter(|e| *e > 0) {
            let mut t = p.fire_at.last().copied().unwrap_or(0) + every;
            while t < max_steps {
                times.push(t);
                t += every;
            }
        }
        for t in times {
            let shift = if p.jitter > 0 {
                rng.random_range(0..=p.jitter)
            } else {
                0
            };
            if t + shift < max_steps {
                plan.push((t + shift, i));
            }
        }
    }
    plan.sort();
    plan
}

impl Machine {
    pub fn new(scenario: Arc<Scenario>, opts: RunOptions) -> Result<Machine, String> {
        let max_steps = opts.max_steps.unwrap_or(scenario.max_steps);
        let mut hw = Hardware::new(scenario.clone()).map_err(|e| e.to_string())?;
        let mut monitor = Monitor::new(scenario.clone(), opts.faults);
        let mut trace = Trace::new();
        monitor.boot(&mut hw, &mut trace, opts.seed)?;
        let mut user = scenario.user_actions.clone();
        user.sort_by_key(|u| u.step);
        Ok(Machine {
            fires: fire_plan(&scenario, opts.seed, max_steps),
            next_fire: 0,
            user,
            next_user: 0,
            fire_counts: vec![0; scenario.platform.peripherals.len()],
            max_steps,
            steps: 0,
            scenario,
            hw,
            monitor,
            trace,
        })
    }

    pub fn hardware(&self) -> &Hardware {
        &self.hw
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn run(mut self) -> Vec<TraceEvent> {
        self.finish();
        self.trace.into_events()
    }

    /// Step until quiescent or out of steps, then close the trace. The
    /// machine stays inspectable afterwards.
    pub fn finish(&mut self) {
        let reason = loop {
            if self.steps >= self.max_steps {
                break "max_steps";
            }
            if self.quiescent() {
                break "quiescent";
            }
            self.step();
        };
        self.trace.set_step(self.steps);
        self.trace.emit(
            None,
            None,
            EventKind::RunEnd {
                steps: self.steps,
                reason: reason.into(),
            },
        );
    }

    fn available(&self, c: CoreId) -> bool {
        let core = &self.hw.cores[c.index()];
        core.domain.is_some()
            && core.ctx.handler.is_none()
            && self.hw.gic.cpu(c).is_some_and(|cpu| cpu.active.is_none())
    }

    fn quiescent(&self) -> bool {
        let settled = self.hw.cores.iter().all(|c| {
            c.domain.is_none()
                || ((c.ctx.halted || c.ctx.wfi) && c.ctx.handler.is_none() && c.ctx.sleep == 0)
        });
        let deliverable = !self.monitor.faults().has(Fault::SuppressDelivery)
            && self
                .hw
                .core_ids()
                .any(|c| self.available(c) && self.hw.gic.select(c, Security::NonSecure).is_some());
        settled
            && !deliverable
            && self.monitor.timer().is_none()
            && self.next_fire >= self.fires.len()
            && self.next_user >= self.user.len()
    }

    /// One global step: boundary events, then every core in ascending order.
    pub fn step(&mut self) {
        let now = self.steps;
        self.trace.set_step(now);
        while self.next_fire < self.fires.len() && self.fires[self.next_fire].0 <= now {
            let p = self.fires[self.next_fire].1;
            self.next_fire += 1;
            fire_peripheral(&mut self.hw, &mut self.trace, p);
            self.fire_counts[p] += 1;
            let spec = &self.scenario.platform.peripherals[p];
            if spec.kind == PeripheralKind::Sensor {
                self.hw
                    .mem
                    .write(spec.data_window().base, 4, self.fire_counts[p]);
            }
        }
        while self.next_user < self.user.len() && self.user[self.next_user].step <= now {
            let action = self.user[self.next_user].kind.clone();
            self.next_user += 1;
            self.monitor
                .user_action(&mut self.hw, &mut self.trace, &action);
        }
        if self.monitor.timer().is_some_and(|t| t.deadline <= now) {
            self.monitor.on_timer(&mut self.hw, &mut self.trace);
        }
        if !self.monitor.faults().has(Fault::SuppressDelivery) {
            for c in self.hw.core_ids().collect::<Vec<_>>() {
                if !self.available(c) {
                    continue;
                }
                if let Some(intid) = self.hw.gic.select(c, Security::NonSecure) {
                    let core = &mut self.hw.cores[c.index()];
                    let domain = core.domain;
                    core.ctx.handler = Some(HandlerFrame { pc: 0, intid });
                    core.ctx.wfi = false;
                    self.trace
                        .emit(Some(c), domain, EventKind::InterruptDelivered { intid });
                }
            }
        }
        for c in self.hw.core_ids().collect::<Vec<_>>() {
            self.step_core(c);
        }
        self.steps += 1;
    }

    fn step_core(&mut self, c: CoreId) {
        let Some(d) = self.hw.occupant(c) else { return };
        let decl = self.monitor.domain(d).expect("occupants exist").decl;
        let scenario = self.scenario.clone();
        let spec = &scenario.domains[decl];
        let ctx = &mut self.hw.cores[c.index()].ctx;
        if let Some(frame) = ctx.handler.as_mut() {
            let Some(action) = spec.handler.get(frame.pc) else {
                self.end_handler(c, d);
                return;
            };
            frame.pc += 1;
            let flow = self.exec(c, d, action, true);
            if flow == Flow::Blocked {
                if let Some(f) = self.hw.cores[c.index()].ctx.handler.as_mut() {
                    f.pc -= 1;
                }
            }
            let still = self.hw.occupant(c) == Some(d);
            let done = still
                && self.hw.cores[c.index()]
                    .ctx
                    .handler
                    .as_ref()
                    .is_some_and(|f| f.pc >= spec.handler.len());
            if flow == Flow::EndHandler || done {
                self.end_handler(c, d);
            }
            return;
        }
        if ctx.sleep > 0 {
            ctx.sleep -= 1;
            return;
        }
        if ctx.wfi || ctx.halted || !ctx.script {
            return;
        }
        let Some(action) = spec.script.get(ctx.pc) else {
            self.halt(c, d);
            return;
        };
        ctx.pc += 1;
        let flow = self.exec(c, d, action, false);
        if self.hw.occupant(c) != Some(d) {
            return;
        }
        let ctx = &mut self.hw.cores[c.index()].ctx;
        if flow == Flow::Blocked {
            ctx.pc -= 1;
        } else if ctx.pc >= spec.script.len() && !ctx.halted {
            self.halt(c, d);
        }
    }

    fn halt(&mut self, c: CoreId, d: DomainId) {
        self.hw.cores[c.index()].ctx.halted = true;
        self.trace.emit(Some(c), Some(d), EventKind::CoreHalted {});
    }

    fn end_handler(&mut self, c: CoreId, d: DomainId) {
        if self.hw.occupant(c) == Some(d) {
            self.hw.cores[c.index()].ctx.handler = None;
            self.trace
                .emit(Some(c), Some(d), EventKind::HandlerReturn {});
        }
    }

    fn resolve_addr(&self, d: DomainId, c: CoreId, addr: &Addr) -> u64 {
        let p = &self.scenario.platform;
        match addr {
            Addr::Abs(a) => *a,
            Addr::Mem(off) => {
                let dom = self.monitor.domain(d).expect("occupants exist");
                dom.memory.first().map_or(0, |m| m.base) + off
            }
            Addr::Periph { peripheral, offset } => p.peripherals[*peripheral].mmio.base + offset,
            Addr::Shm { region, offset } => p.shared_regions[*region].range.base + offset,
            Addr::Gicd(reg) => p.gic.address_of(*reg, None),
            Addr::Gicr(reg) => p.gic.address_of(*reg, Some(c)),
        }
    }

    fn domain_arg(&self, decl: usize) -> u64 {
        self.monitor.resolve(decl).map_or(NONE, |id| id.0 as u64)
    }

    fn smc_args(&self, c: CoreId, d: DomainId, call: &SmcCall) -> (u32, [u64; 4]) {
        match call {
            SmcCall::Setup { domain, placement } => {
                let (base, size) = placement.map_or((0, 0), |m| (m.base, m.size));
                (monitor::SMC_SETUP, [*domain as u64, base, size, 0])
            }
            SmcCall::Run { domain, mode } => {
                let (m, x) = match mode {
                    RunMode::Temporal { budget } => (RUN_TEMPORAL, *budget),
                    RunMode::Spatial { cores } => (RUN_SPATIAL, *cores),
                };
                (monitor::SMC_RUN, [self.domain_arg(*domain), m, x, 0])
            }
            SmcCall::Teardown(t) => {
                let id = match t {
                    TeardownTarget::Own => d.0 as u64,
                    TeardownTarget::Domain(x) => self.domain_arg(*x),
                };
                (monitor::SMC_TEARDOWN, [id, 0, 0, 0])
            }
            SmcCall::GicRead { addr } => (
                monitor::SMC_GIC_ACCESS,
                [self.resolve_addr(d, c, addr), 0, 0, 0],
            ),
            SmcCall::GicWrite { addr, value } => (
                monitor::SMC_GIC_ACCESS,
                [self.resolve_addr(d, c, addr), 1, *value, 0],
            ),
            SmcCall::Key { domain } => (
                monitor::SMC_DERIVE_KEY,
                [domain.map_or(NONE, |x| self.domain_arg(x)), 0, 0, 0],
            ),
            SmcCall::Attest { domain } => {
                (monitor::SMC_ATTEST, [self.domain_arg(*domain), 0, 0, 0])
            }
            SmcCall::ShareReadOnly { peripheral, reader } => (
                monitor::SMC_SHARE_RO,
                [*peripheral as u64, self.domain_arg(*reader), 0, 0],
            ),
            SmcCall::Raw { function, args } => (*function, *args),
        }
    }

    fn smc(&mut self, c: CoreId, function: u32, args: [u64; 4]) -> u64 {
        self.monitor
            .smc(&mut self.hw, &mut self.trace, c, function, args)
    }

    /// Domain-issued bus access, via the shim if the domain has one.
    fn access(
        &mut self,
        c: CoreId,
        d: DomainId,
        addr: u64,
        width: u8,
        kind: AccessKind,
        value: u64,
    ) -> u64 {
        let decl = self.monitor.domain(d).expect("occupants exist").decl;
        let shim = self.scenario.domains[decl].shim;
        let txn = BusTxn {
            core: c,
            addr,
            width,
            kind,
            value,
            security: Security::NonSecure,
        };
        match self.hw.transact(&mut self.trace, txn, Some(d), shim) {
            BusResult::Done(v) => v,
            BusResult::Denied(_) => 0,
            BusResult::ShimTrap => {
                self.trace
                    .emit(Some(c), Some(d), EventKind::ShimForwarded { addr });
                self.monitor
                    .gic_access(
                        &mut self.hw,
                        &mut self.trace,
                        c,
                        addr,
                        kind,
                        value,
                        GicPath::Shim,
                    )
                    .unwrap_or(0)
            }
        }
    }

    fn ctx(&mut self, c: CoreId) -> &mut CpuContext {
        &mut self.hw.cores[c.index()].ctx
    }

    fn exec(&mut self, c: CoreId, d: DomainId, action: &Action, in_handler: bool) -> Flow {
        match action {
            Action::Read { addr, width } => {
                let a = self.resolve_addr(d, c, addr);
                let w = width.unwrap_or_else(|| addr.default_width());
                let v = self.access(c, d, a, w, AccessKind::Read, 0);
                self.ctx(c).push_reg(v);
            }
            Action::Write { addr, value, width } => {
                let a = self.resolve_addr(d, c, addr);
                let w = width.unwrap_or_else(|| addr.default_width());
                self.access(c, d, a, w, AccessKind::Write, *value);
            }
            Action::Smc(call) => {
                let (f, args) = self.smc_args(c, d, call);
                let ret = self.smc(c, f, args);
                if self.hw.occupant(c) == Some(d) {
                    self.ctx(c).push_reg(ret);
                }
            }
            Action::Wfi => {
                self.ctx(c).wfi = true;
                self.trace.emit(Some(c), Some(d), EventKind::Wfi {});
            }
            Action::Yield => {
                self.trace.emit(Some(c), Some(d), EventKind::Yield {});
                self.smc(c, monitor::SMC_YIELD, [0; 4]);
            }
            Action::Sleep(n) => self.ctx(c).sleep = *n,
            Action::Send { region, payload } => {
                match proxy::send(&mut self.hw, &mut self.trace, c, d, *region, payload) {
                    ProxyOutcome::Blocked => return Flow::Blocked,
                    ProxyOutcome::Done(_) | ProxyOutcome::Failed => {}
                }
            }
            Action::Recv { region } => {
                match proxy::recv(&mut self.hw, &mut self.trace, c, d, *region) {
                    ProxyOutcome::Blocked => return Flow::Blocked,
                    ProxyOutcome::Done(data) => {
                        let word = data
                            .iter()
                            .take(8)
                            .enumerate()
                            .fold(0u64, |w, (k, b)| w | (*b as u64) << (8 * k));
                        self.ctx(c).push_reg(word);
                    }
                    ProxyOutcome::Failed => {}
                }
            }
            Action::Cede { peripheral, to } => {
                let to = to.map_or(NONE, |x| self.domain_arg(x));
                self.smc(c, monitor::SMC_CEDE, [*peripheral as u64, to, 0, 0]);
            }
            Action::Clear { peripheral } => {
                let w = self.scenario.platform.peripherals[*peripheral].data_window();
                let mut off = 0;
                while off < w.size {
                    let width = (w.size - off).min(8) as u8;
                    self.access(c, d, w.base + off, width, AccessKind::Write, 0);
                    off += width as u64;
                }
            }
            Action::Halt => {
                if in_handler {
                    return Flow::EndHandler;
                }
                self.ctx(c).halted = true;
                self.trace.emit(Some(c), Some(d), EventKind::CoreHalted {});
            }
            Action::Ack => self.acknowledge(c, d),
            Action::Eoi => self.eoi(c, d),
        }
        Flow::Next
    }

    fn acknowledge(&mut self, c: CoreId, d: DomainId) {
        let by = Actor::Domain(d);
        let taken = self
            .hw
            .gic
            .select(c, Security::NonSecure)
            .and_then(|i| self.hw.gic.acknowledge(c, i).ok().map(|ch| (i, ch)));
        let iar = match taken {
            Some((i, change)) => {
                emit_changes(&mut self.trace, Some(c), Some(d), &[change], &by);
                i.value()
            }
            None => SPURIOUS_INTID,
        };
        self.trace.emit(
            Some(c),
            Some(d),
            EventKind::InterruptAcknowledged { intid: iar },
        );
        self.ctx(c).iar = Some(iar);
    }

    fn eoi(&mut self, c: CoreId, d: DomainId) {
        let error = |m: &mut Machine, detail: String| {
            m.trace
                .emit(Some(c), Some(d), EventKind::ProtocolError { detail });
        };
        match self.ctx(c).iar.take() {
            None => error(self, "end of interrupt without acknowledge".into()),
            Some(SPURIOUS_INTID) => {}
            Some(v) => {
                let intid = IntId::new(v).expect("acknowledged values are valid");
                match self.hw.gic.end_of_interrupt(c, intid) {
                    Ok(change) => {
                        emit_changes(
                            &mut self.trace,
                            Some(c),
                            Some(d),
                            &[change],
                            &Actor::Domain(d),
                        );
                        self.trace
                            .emit(Some(c), Some(d), EventKind::InterruptEoi { intid });
                    }
                    Err(e) => error(self, e.to_string()),
                }
            }
        }
    }
}

/// Boot `scenario` and run it to completion.
pub fn run(scenario: Arc<Scenario>, opts: RunOptions) -> Result<Vec<TraceEvent>, String> {
    Ok(Machine::new(scenario, opts)?.run())
}
