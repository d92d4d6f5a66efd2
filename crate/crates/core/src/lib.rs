//! Deterministic simulator of a TrustZone platform whose secure monitor
//! isolates mutually distrusting domains by reprogramming the interrupt
//! controller and the address space controller.

pub mod asc;
pub mod gic;
pub mod harness;
pub mod ids;
pub mod monitor;
pub mod platform;
pub mod scenario;
pub mod trace;
