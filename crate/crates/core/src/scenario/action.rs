//! Script actions and their one-line textual form.

use crate::gic::{GicRegisterId, RegisterClass};
use crate::ids::MemRange;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Addr {
    Abs(u64),
    /// Offset into the issuing domain's own memory.
    Mem(u64),
    Periph {
        peripheral: usize,
        offset: u64,
    },
    Shm {
        region: usize,
        offset: u64,
    },
    Gicd(GicRegisterId),
    /// Banked register in the issuing core's redistributor.
    Gicr(GicRegisterId),
}

impl Addr {
    pub fn default_width(&self) -> u8 {
        match self {
            Addr::Gicd(r) | Addr::Gicr(r) => r.class.width_bytes(),
            _ => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Temporal {
        budget: u64,
    },
    /// Bit `n` selects core `n`.
    Spatial {
        cores: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeardownTarget {
    Own,
    Domain(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SmcCall {
    Setup {
        domain: usize,
        placement: Option<MemRange>,
    },
    Run {
        domain: usize,
        mode: RunMode,
    },
    Teardown(TeardownTarget),
    GicRead {
        addr: Addr,
    },
    GicWrite {
        addr: Addr,
        value: u64,
    },
    Key {
        domain: Option<usize>,
    },
    Attest {
        domain: usize,
    },
    ShareReadOnly {
        peripheral: usize,
        reader: usize,
    },
    Raw {
        function: u32,
        args: [u64; 4],
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Read {
        addr: Addr,
        width: Option<u8>,
    },
    Write {
        addr: Addr,
        value: u64,
        width: Option<u8>,
    },
    Smc(SmcCall),
    Wfi,
    Yield,
    Sleep(u64),
    Send {
        region: usize,
        payload: Vec<u8>,
    },
    Recv {
        region: usize,
    },
    Cede {
        peripheral: usize,
        to: Option<usize>,
    },
    Clear {
        peripheral: usize,
    },
    Halt,
    Ack,
    Eoi,
}

/// Names actions may refer to, by index.
pub(crate) struct Names<'a> {
    pub peripherals: &'a [String],
    pub regions: &'a [String],
    pub domains: &'a [String],
}

/// A parse failure at byte offset `at` of the line.
#[derive(Debug, PartialEq, Eq)]
pub(crate) struct ActionError {
    pub at: usize,
    pub message: String,
}

fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

pub fn parse_number(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(b) = s.strip_prefix("0b") {
        u64::from_str_radix(b, 2).ok()
    } else {
        s.parse().ok()
    }
}

struct Cursor<'l, 'n> {
    toks: Vec<(usize, &'l str)>,
    pos: usize,
    end: usize,
    names: &'n Names<'n>,
}

impl<'l> Cursor<'l, '_> {
    fn err<T>(&self, at: usize, message: impl Into<String>) -> Result<T, ActionError> {
        Err(ActionError {
            at,
            message: message.into(),
        })
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'l str), ActionError> {
        match self.toks.get(self.pos) {
            Some(&t) => {
                self.pos += 1;
                Ok(t)
            }
            None => self.err(self.end, format!("expected {what}")),
        }
    }

    fn peek(&self) -> Option<&'l str> {
        self.toks.get(self.pos).map(|t| t.1)
    }

    fn number(&mut self, what: &str) -> Result<u64, ActionError> {
        let (at, t) = self.next(what)?;
        parse_number(t).map_or_else(|| self.err(at, format!("expected {what}, found `{t}`")), Ok)
    }

    fn lookup(&mut self, table: &[String], what: &str) -> Result<usize, ActionError> {
        let (at, t) = self.next(what)?;
        match table.iter().position(|n| n == t) {
            Some(i) => Ok(i),
            None => self.err(at, format!("unknown {what} `{t}`")),
        }
    }

    fn peripheral(&mut self) -> Result<usize, ActionError> {
        self.lookup(self.names.peripherals, "peripheral")
    }

    fn domain(&mut self) -> Result<usize, ActionError> {
        self.lookup(self.names.domains, "domain")
    }

    fn region(&mut self) -> Result<usize, ActionError> {
        self.lookup(self.names.regions, "shared region")
    }

    fn width(&mut self) -> Result<Option<u8>, ActionError> {
        if self.peek().is_none() {
            return Ok(None);
        }
        let at = self.here();
        match self.number("access width")? {
            w @ (1 | 2 | 4 | 8) => Ok(Some(w as u8)),
            w => self.err(at, format!("access width must be 1, 2, 4 or 8, not {w}")),
        }
    }

    fn addr(&mut self) -> Result<Addr, ActionError> {
        let (at, t) = self.next("address")?;
        if let Some(n) = parse_number(t) {
            return Ok(Addr::Abs(n));
        }
        for (prefix, redist) in [("gicd:", false), ("gicr:", true)] {
            if let Some(rest) = t.strip_prefix(prefix) {
                let reg = parse_register(rest).ok_or_else(|| ActionError {
                    at,
                    message: format!("bad GIC register `{rest}`"),
                })?;
                if reg.is_banked() != redist {
                    let frame = if redist {
                        "redistributor"
                    } else {
                        "distributor"
                    };
                    return self.err(at, format!("{reg} is not in the {frame} frame"));
                }
                return Ok(if redist {
                    Addr::Gicr(reg)
                } else {
                    Addr::Gicd(reg)
                });
            }
        }
        let (name, offset) = match t.split_once('+') {
            Some((n, o)) => match parse_number(o) {
                Some(o) => (n, o),
                None => return self.err(at, format!("bad offset `{o}`")),
            },
            None => (t, 0),
        };
        if name == "mem" {
            return Ok(Addr::Mem(offset));
        }
        if let Some(p) = self.names.peripherals.iter().position(|n| n == name) {
            return Ok(Addr::Periph {
                peripheral: p,
                offset,
            });
        }
        if let Some(r) = self.names.regions.iter().position(|n| n == name) {
            return Ok(Addr::Shm { region: r, offset });
        }
        self.err(at, format!("unknown address base `{name}`"))
    }

    fn done(&self) -> Result<(), ActionError> {
        match self.toks.get(self.pos) {
            None => Ok(()),
            Some(&(at, t)) => self.err(at, format!("unexpected `{t}`")),
        }
    }
}

fn parse_register(s: &str) -> Option<GicRegisterId> {
    let (class, rest) = s.split_once('[')?;
    let index = parse_number(rest.strip_suffix(']')?)? as u32;
    let reg = GicRegisterId::new(RegisterClass::from_name(class)?, index);
    reg.is_modeled().then_some(reg)
}

fn parse_payload(t: &str) -> Vec<u8> {
    match t.strip_prefix("hex:").and_then(|h| hex::decode(h).ok()) {
        Some(bytes) => bytes,
        None => t.as_bytes().to_vec(),
    }
}

fn render_payload(p: &[u8]) -> String {
    let bare = !p.is_empty()
        && !p.starts_with(b"hex:")
        && p.iter()
            .all(|b| b.is_ascii_alphanumeric() || b"_-.:/".contains(b));
    if bare {
        String::from_utf8(p.to_vec()).expect("ascii")
    } else {
        format!("hex:{}", hex::encode(p))
    }
}

pub(crate) fn parse_action(line: &str, names: &Names<'_>) -> Result<Action, ActionError> {
    let mut c = Cursor {
        toks: tokens(line),
        pos: 0,
        end: line.len(),
        names,
    };
    let (at, verb) = c.next("an action")?;
    let action = match verb {
        "read" => Action::Read {
            addr: c.addr()?,
            width: c.width()?,
        },
        "write" => Action::Write {
            addr: c.addr()?,
            value: c.number("value")?,
            width: c.width()?,
        },
        "smc" => Action::Smc(parse_smc(&mut c)?),
        "wfi" => Action::Wfi,
        "yield" => Action::Yield,
        "sleep" => Action::Sleep(c.number("step count")?),
        "send" => {
            let region = c.region()?;
            let (_, p) = c.next("payload")?;
            Action::Send {
                region,
                payload: parse_payload(p),
            }
        }
        "recv" => Action::Recv {
            region: c.region()?,
        },
        "cede" => {
            let peripheral = c.peripheral()?;
            let to = match c.peek() {
                Some("to") => {
                    c.pos += 1;
                    Some(c.domain()?)
                }
                _ => None,
            };
            Action::Cede { peripheral, to }
        }
        "clear" => Action::Clear {
            peripheral: c.peripheral()?,
        },
        "halt" => Action::Halt,
        "ack" => Action::Ack,
        "eoi" => Action::Eoi,
        other => return c.err(at, format!("unknown action `{other}`")),
    };
    c.done()?;
    Ok(action)
}

fn parse_smc(c: &mut Cursor<'_, '_>) -> Result<SmcCall, ActionError> {
    let (at, f) = c.next("monitor call")?;
    if let Some(function) = parse_number(f) {
        let mut args = [0u64; 4];
        for a in &mut args {
            if c.peek().is_none() {
                break;
            }
            *a = c.number("argument")?;
        }
        return Ok(SmcCall::Raw {
            function: function as u32,
            args,
        });
    }
    Ok(match f {
        "setup" => {
            let domain = c.domain()?;
            let placement = if c.peek().is_some() {
                let base = c.number("base")?;
                Some(MemRange::new(base, c.number("size")?))
            } else {
                None
            };
            SmcCall::Setup { domain, placement }
        }
        "run" => {
            let domain = c.domain()?;
            let (mat, m) = c.next("run mode")?;
            let mode = match m {
                "temporal" => RunMode::Temporal {
                    budget: c.number("budget")?,
                },
                "spatial" => RunMode::Spatial {
                    cores: c.number("core mask")?,
                },
                _ => {
                    return c.err(
                        mat,
                        format!("run mode must be temporal or spatial, not `{m}`"),
                    )
                }
            };
            SmcCall::Run { domain, mode }
        }
        "teardown" => match c.peek() {
            Some("self") => {
                c.pos += 1;
                SmcCall::Teardown(TeardownTarget::Own)
            }
            _ => SmcCall::Teardown(TeardownTarget::Domain(c.domain()?)),
        },
        "gic_read" => SmcCall::GicRead { addr: c.addr()? },
        "gic_write" => SmcCall::GicWrite {
            addr: c.addr()?,
            value: c.number("value")?,
        },
        "key" => SmcCall::Key {
            domain: if c.peek().is_some() {
                Some(c.domain()?)
            } else {
                None
            },
        },
        "attest" => SmcCall::Attest {
            domain: c.domain()?,
        },
        "share_readonly" => SmcCall::ShareReadOnly {
            peripheral: c.peripheral()?,
            reader: c.domain()?,
        },
        other => return c.err(at, format!("unknown monitor call `{other}`")),
    })
}

pub(crate) fn render_addr(a: &Addr, names: &Names<'_>) -> String {
    let named = |n: &str, off: u64| {
        if off == 0 {
            n.to_string()
        } else {
            format!("{n}+{off:#x}")
        }
    };
    match a {
        Addr::Abs(v) => format!("{v:#x}"),
        Addr::Mem(off) => named("mem", *off),
        Addr::Periph { peripheral, offset } => named(&names.peripherals[*peripheral], *offset),
        Addr::Shm { region, offset } => named(&names.regions[*region], *offset),
        Addr::Gicd(r) => format!("gicd:{r}"),
        Addr::Gicr(r) => format!("gicr:{r}"),
    }
}

pub(crate) fn render_action(a: &Action, names: &Names<'_>) -> String {
    let width = |w: &Option<u8>| w.map(|w| format!(" {w}")).unwrap_or_default();
    match a {
        Action::Read { addr, width: w } => format!("read {}{}", render_addr(addr, names), width(w)),
        Action::Write {
            addr,
            value,
            width: w,
        } => format!("write {} {value:#x}{}", render_addr(addr, names), width(w)),
        Action::Smc(call) => format!("smc {}", render_smc(call, names)),
        Action::Wfi => "wfi".into(),
        Action::Yield => "yield".into(),
        Action::Sleep(n) => format!("sleep {n}"),
        Action::Send { region, payload } => {
            format!(
                "send {} {}",
                names.regions[*region],
                render_payload(payload)
            )
        }
        Action::Recv { region } => format!("recv {}", names.regions[*region]),
        Action::Cede { peripheral, to } => match to {
            Some(d) => format!(
                "cede {} to {}",
                names.peripherals[*peripheral], names.domains[*d]
            ),
            None => format!("cede {}", names.peripherals[*peripheral]),
        },
        Action::Clear { peripheral } => format!("clear {}", names.peripherals[*peripheral]),
        Action::Halt => "halt".into(),
        Action::Ack => "ack".into(),
        Action::Eoi => "eoi".into(),
    }
}

fn render_smc(call: &SmcCall, names: &Names<'_>) -> String {
    let d = |i: &usize| names.domains[*i].as_str();
    match call {
        SmcCall::Setup { domain, placement } => match placement {
            Some(p) => format!("setup {} {:#x} {:#x}", d(domain), p.base, p.size),
            None => format!("setup {}", d(domain)),
        },
        SmcCall::Run { domain, mode } => match mode {
            RunMode::Temporal { budget } => format!("run {} temporal {budget}", d(domain)),
            RunMode::Spatial { cores } => format!("run {} spatial {cores:#b}", d(domain)),
        },
        SmcCall::Teardown(TeardownTarget::Own) => "teardown self".into(),
        SmcCall::Teardown(TeardownTarget::Domain(i)) => format!("teardown {}", d(i)),
        SmcCall::GicRead { addr } => format!("gic_read {}", render_addr(addr, names)),
        SmcCall::GicWrite { addr, value } => {
            format!("gic_write {} {value:#x}", render_addr(addr, names))
        }
        SmcCall::Key { domain: None } => "key".into(),
        SmcCall::Key { domain: Some(i) } => format!("key {}", d(i)),
        SmcCall::Attest { domain } => format!("attest {}", d(domain)),
        SmcCall::ShareReadOnly { peripheral, reader } => {
            format!(
                "share_readonly {} {}",
                names.peripherals[*peripheral],
                d(reader)
            )
        }
        SmcCall::Raw { function, args } => format!(
            "{function:#x} {:#x} {:#x} {:#x} {:#x}",
            args[0], args[1], args[2], args[3]
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> (Vec<String>, Vec<String>, Vec<String>) {
        (
            vec!["uart0".into(), "display".into()],
            vec!["chan".into()],
            vec!["legacy".into(), "vault".into()],
        )
    }

    fn roundtrip(line: &str) -> Action {
        let (p, r, d) = names();
        let n = Names {
            peripherals: &p,
            regions: &r,
            domains: &d,
        };
        let a = parse_action(line, &n).unwrap_or_else(|e| panic!("{line}: {e:?}"));
        let again = parse_action(&render_action(&a, &n), &n).unwrap();
        assert_eq!(a, again, "{line}");
        a
    }

    #[test]
    fn every_form_round_trips() {
        for line in [
            "read mem+0x10",
            "read 0x8000_0000 8",
            "write uart0+4 0x41 1",
            "write gicd:ISENABLER[1] 0x4",
            "read gicr:IPRIORITYR[7]",
            "read gicd:IROUTER[34]",
            "smc setup vault",
            "smc setup vault 0x81000000 0x10000",
            "smc run vault temporal 100",
            "smc run vault spatial 0b10",
            "smc teardown self",
            "smc teardown vault",
            "smc gic_write gicd:IROUTER[34] 0",
            "smc gic_read gicd:ISPENDR[1]",
            "smc key",
            "smc key legacy",
            "smc attest legacy",
            "smc share_readonly uart0 vault",
            "smc 0xC2000003",
            "wfi",
            "yield",
            "sleep 3",
            "send chan hello",
            "send chan hex:00ff",
            "recv chan",
            "cede display to vault",
            "cede display",
            "clear uart0",
            "halt",
            "ack",
            "eoi",
        ] {
            roundtrip(line);
        }
    }

    #[test]
    fn gic_forms_default_to_register_width() {
        let a = roundtrip("read gicd:IROUTER[34]");
        let Action::Read { addr, width: None } = a else {
            panic!()
        };
        assert_eq!(addr.default_width(), 8);
    }

    #[test]
    fn errors_point_at_the_token() {
        let (p, r, d) = names();
        let n = Names {
            peripherals: &p,
            regions: &r,
            domains: &d,
        };
        let e = parse_action("send shm2 x", &n).unwrap_err();
        assert_eq!(e.at, 5);
        assert!(e.message.contains("shm2"));
        assert_eq!(parse_action("jump 4", &n).unwrap_err().at, 0);
        assert_eq!(parse_action("read mem 3", &n).unwrap_err().at, 9);
        assert!(parse_action("read gicd:ISENABLER[0]", &n).is_err());
        assert!(parse_action("halt now", &n).is_err());
    }
}
