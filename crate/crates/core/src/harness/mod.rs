//! Trace checking against the isolation guarantees, and the fuzzer that
//! feeds it.

pub mod check;
pub mod fuzz;

pub use check::{check, check_with_bound, errors, CheckError, Class, Severity, Violation};
pub use fuzz::{fuzz, fuzz_one, generate, FuzzFinding, FuzzSummary, Profile};
