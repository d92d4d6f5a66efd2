//! Monitor-free message passing over a mutually shared region.
//!
//! Layout: `ready` (u32, sender id + 1, zero when empty) at +0,
//! `consumed` (u32) at +4, `len` (u64) at +8, payload from +16.

use crate::ids::{AccessKind, CoreId, DomainId, Security};
use crate::trace::{EventKind, Trace};

use super::bus::{BusResult, BusTxn, Hardware};

pub const READY: u64 = 0;
pub const CONSUMED: u64 = 4;
pub const LEN: u64 = 8;
pub const PAYLOAD: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProxyOutcome {
    Done(Vec<u8>),
    /// Mailbox not in the right state yet; retry next step.
    Blocked,
    Failed,
}

struct Port<'a> {
    hw: &'a mut Hardware,
    trace: &'a mut Trace,
    core: CoreId,
    domain: DomainId,
    base: u64,
}

impl Port<'_> {
    fn txn(&mut self, off: u64, width: u8, kind: AccessKind, value: u64) -> Option<u64> {
        let txn = BusTxn {
            core: self.core,
            addr: self.base + off,
            width,
            kind,
            value,
            security: Security::NonSecure,
        };
        match self.hw.transact(self.trace, txn, Some(self.domain), false) {
            BusResult::Done(v) => Some(v),
            _ => None,
        }
    }

    fn read(&mut self, off: u64, width: u8) -> Option<u64> {
        self.txn(off, width, AccessKind::Read, 0)
    }

    fn write(&mut self, off: u64, width: u8, value: u64) -> Option<()> {
        self.txn(off, width, AccessKind::Write, value).map(|_| ())
    }

    fn error(&mut self, channel: &str, detail: impl Into<String>) -> ProxyOutcome {
        self.trace.emit(
            Some(self.core),
            Some(self.domain),
            EventKind::ProxyError {
                channel: channel.into(),
                detail: detail.into(),
            },
        );
        ProxyOutcome::Failed
    }
}

pub fn send(
    hw: &mut Hardware,
    trace: &mut Trace,
    core: CoreId,
    domain: DomainId,
    region: usize,
    payload: &[u8],
) -> ProxyOutcome {
    let scenario = hw.scenario.clone();
    let r = &scenario.platform.shared_regions[region];
    let mut port = Port {
        hw,
        trace,
        core,
        domain,
        base: r.range.base,
    };
    let Some(ready) = port.read(READY, 4) else {
        return port.error(&r.name, "mailbox not accessible");
    };
    if ready != 0 {
        return ProxyOutcome::Blocked;
    }
    if payload.len() as u64 > r.range.size.saturating_sub(PAYLOAD) {
        return port.error(
            &r.name,
            format!("payload of {} bytes does not fit", payload.len()),
        );
    }
    for (i, chunk) in payload.chunks(8).enumerate() {
        let word = chunk
            .iter()
            .enumerate()
            .fold(0u64, |w, (k, b)| w | (*b as u64) << (8 * k));
        if port
            .write(PAYLOAD + 8 * i as u64, chunk.len() as u8, word)
            .is_none()
        {
            return port.error(&r.name, "payload write denied");
        }
    }
    let header = [
        (LEN, 8, payload.len() as u64),
        (CONSUMED, 4, 0),
        (READY, 4, domain.0 as u64 + 1),
    ];
    for (off, width, value) in header {
        if port.write(off, width, value).is_none() {
            return port.error(&r.name, "header write denied");
        }
    }
    port.trace.emit(
        Some(core),
        Some(domain),
        EventKind::ProxySend {
            channel: r.name.clone(),
            len: payload.len() as u64,
        },
    );
    ProxyOutcome::Done(payload.to_vec())
}

pub fn recv(
    hw: &mut Hardware,
    trace: &mut Trace,
    core: CoreId,
    domain: DomainId,
    region: usize,
) -> ProxyOutcome {
    let scenario = hw.scenario.clone();
    let r = &scenario.platform.shared_regions[region];
    let mut port = Port {
        hw,
        trace,
        core,
        domain,
        base: r.range.base,
    };
    let Some(ready) = port.read(READY, 4) else {
        return port.error(&r.name, "mailbox not accessible");
    };
    if ready == 0 || ready == domain.0 as u64 + 1 {
        return ProxyOutcome::Blocked;
    }
    let from = DomainId(ready as u32 - 1);
    let Some(len) = port.read(LEN, 8) else {
        return port.error(&r.name, "length read denied");
    };
    if len > r.range.size.saturating_sub(PAYLOAD) {
        return port.error(&r.name, format!("corrupt length {len}"));
    }
    let mut data = Vec::with_capacity(len as usize);
    let mut off = 0;
    while off < len {
        let width = (len - off).min(8) as u8;
        let Some(word) = port.read(PAYLOAD + off, width) else {
            return port.error(&r.name, "payload read denied");
        };
        data.extend((0..width).map(|k| (word >> (8 * k)) as u8));
        off += width as u64;
    }
    if port.write(READY, 4, 0).is_none() || port.write(CONSUMED, 4, 1).is_none() {
        return port.error(&r.name, "header write denied");
    }
    port.trace.emit(
        Some(core),
        Some(domain),
        EventKind::ProxyRecv {
            channel: r.name.clone(),
            len,
            from,
        },
    );
    ProxyOutcome::Done(data)
}
