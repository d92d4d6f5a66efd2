//! Commands behind the `tzsim` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use tzsim_core::harness::{self, fuzz::Profile, Severity, Violation};
use tzsim_core::monitor::Faults;
use tzsim_core::platform::{self, RunOptions};
use tzsim_core::scenario::{self, Scenario};
use tzsim_core::trace;

pub mod report;

pub use report::{DomainCounters, RunReport};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "tzsim",
    version,
    about = "Run, check and fuzz multi-domain TrustZone scenarios"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Write the trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the scenario's step limit.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Check the trace against the isolation guarantees.
        #[arg(long)]
        check: bool,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a recorded trace against the scenario that produced it.
    Check {
        trace: PathBuf,
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Generate, run and check random scenarios.
    Fuzz {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// gic-heavy, handover-heavy, memory-probing, spatial, or all.
        #[arg(long, default_value = "all")]
        profile: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

/// Output of one command: text for stdout and stderr plus the exit status.
#[derive(Debug, Default)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn usage(msg: impl Into<String>) -> Outcome {
        Outcome {
            code: EXIT_USAGE,
            stdout: String::new(),
            stderr: msg.into(),
        }
    }
}

fn load(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    scenario::parse(&text).map_err(|d| {
        d.0.iter()
            .map(|d| format!("{}:{d}", path.display()))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn violation_lines(vs: &[Violation]) -> String {
    vs.iter().map(|v| format!("{v}\n")).collect()
}

pub fn execute(cli: Cli) -> Outcome {
    match cli.command {
        Command::Run {
            scenario,
            trace: trace_path,
            seed,
            max_steps,
            check,
            format,
            report,
        } => cmd_run(
            &scenario,
            trace_path.as_deref(),
            seed,
            max_steps,
            check,
            format,
            report.as_deref(),
        ),
        Command::Check {
            trace,
            scenario,
            format,
        } => cmd_check(&trace, &scenario, format),
        Command::Fuzz {
            seed,
            count,
            profile,
            format,
        } => cmd_fuzz(seed, count, &profile, format),
    }
}

pub fn cmd_run(
    path: &Path,
    trace_path: Option<&Path>,
    seed: u64,
    max_steps: Option<u64>,
    check: bool,
    format: Format,
    report_path: Option<&Path>,
) -> Outcome {
    let s = match load(path) {
        Ok(s) => Arc::new(s),
        Err(e) => return Outcome::usage(e),
    };
    let options = RunOptions {
        seed,
        faults: Faults::none(),
        max_steps,
    };
    let events = match platform::run(s.clone(), options) {
        Ok(e) => e,
        Err(e) => return Outcome::usage(format!("{}: {e}", path.display())),
    };
    let mut out = Outcome::default();
    if let Some(t) = trace_path {
        if let Err(e) = fs::write(t, trace::to_jsonl(&events)) {
            return Outcome::usage(format!("{}: {e}", t.display()));
        }
    }
    let mut report = RunReport::from_trace(&s.name, seed, &events);
    report.trace = trace_path.map(|p| p.display().to_string());
    if check {
        let vs = match harness::check(&s, &events) {
            Ok(v) => v,
            Err(e) => return Outcome::usage(e.to_string()),
        };
        let errors = harness::errors(&vs) as u64;
        report.violations = Some(errors);
        report.warnings = Some(vs.len() as u64 - errors);
        out.stderr = violation_lines(&vs);
        if errors > 0 {
            out.code = EXIT_VIOLATIONS;
        }
    }
    out.stdout = match format {
        Format::Table => report.table(),
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    };
    if let Some(p) = report_path {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        if let Err(e) = fs::write(p, json + "\n") {
            return Outcome::usage(format!("{}: {e}", p.display()));
        }
    }
    out
}

pub fn cmd_check(trace_path: &Path, scenario_path: &Path, format: Format) -> Outcome {
    let s = match load(scenario_path) {
        Ok(s) => s,
        Err(e) => return Outcome::usage(e),
    };
    let text = match fs::read_to_string(trace_path) {
        Ok(t) => t,
        Err(e) => return Outcome::usage(format!("{}: {e}", trace_path.display())),
    };
    let events = match trace::from_jsonl(&text) {
        Ok(e) => e,
        Err((line, e)) => return Outcome::usage(format!("{}:{line}: {e}", trace_path.display())),
    };
    let vs = match harness::check(&s, &events) {
        Ok(v) => v,
        Err(e) => return Outcome::usage(format!("{}: {e}", trace_path.display())),
    };
    let errors = harness::errors(&vs);
    let stdout = match format {
        Format::Table => {
            let mut s = violation_lines(&vs);
            s += &format!(
                "{} violations, {} warnings\n",
                errors,
                vs.iter()
                    .filter(|v| v.severity == Severity::Warning)
                    .count()
            );
            s
        }
        Format::Json => serde_json::to_string_pretty(&vs).expect("violations serialize") + "\n",
    };
    Outcome {
        code: if errors > 0 {
            EXIT_VIOLATIONS
        } else {
            EXIT_CLEAN
        },
        stdout,
        stderr: String::new(),
    }
}

pub fn cmd_fuzz(seed: u64, count: u64, profile: &str, format: Format) -> Outcome {
    let profiles: Vec<Profile> = if profile == "all" {
        Profile::GUARANTEE_SUITE.to_vec()
    } else {
        match Profile::from_name(profile) {
            Some(p) => vec![p],
            None => return Outcome::usage(format!("unknown profile `{profile}`")),
        }
    };
    if count == 0 {
        return Outcome::usage("--count must be at least 1");
    }
    let summary = harness::fuzz(seed, count, &profiles);
    let errors = summary
        .findings
        .iter()
        .filter(|f| f.violation.severity == Severity::Error)
        .count();
    let stdout = match format {
        Format::Table => {
            let mut s = String::new();
            for f in &summary.findings {
                s += &format!("run {} (seed {:#018x}): {}\n", f.index, f.seed, f.violation);
            }
            for (i, e) in &summary.invalid {
                s += &format!("run {i}: generator error: {e}\n");
            }
            s += &format!(
                "{} runs, {} steps, {} events, {} violations\n",
                summary.runs, summary.steps, summary.events, errors
            );
            s
        }
        Format::Json => serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    };
    let code = if !summary.invalid.is_empty() {
        EXIT_USAGE
    } else if errors > 0 {
        EXIT_VIOLATIONS
    } else {
        EXIT_CLEAN
    };
    Outcome {
        code,
        stdout,
        stderr: String::new(),
    }
}
