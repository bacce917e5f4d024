//! Run verdicts and the files a run leaves behind.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::render_transcript;
use crate::crypto::Timestamp;
use crate::registry::Invoice;
use crate::scenario::RunOutcome;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleVerdict {
    pub name: String,
    pub phase: String,
    pub failure: Option<String>,
    pub t_2: Option<u64>,
    pub duration_ms: Option<u64>,
    pub clock_skew: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergySwitch {
    pub seq: u64,
    pub on: bool,
    /// Terminal clock reading at the switch.
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalVerdict {
    pub name: String,
    pub phase: String,
    pub energy: Vec<EnergySwitch>,
    /// Seqs of auth requests rejected for a bad MAC.
    pub rejections: Vec<u64>,
    /// Seqs of frames ignored as malformed, unexpected or arriving while busy.
    pub dropped: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupVerdict {
    pub terminal: String,
    pub request_seq: u64,
    pub response_seq: u64,
    pub outcome: String,
}

/// Energy was on without any vehicle having authenticated the terminal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exposure {
    pub terminal: String,
    pub on_seq: u64,
    pub off_seq: Option<u64>,
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Transcript seqs (or line numbers, for schedule errors) backing a
    /// failure.
    pub evidence: Vec<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub transcript: PathBuf,
    pub invoices: PathBuf,
    pub registry: PathBuf,
    pub report_json: PathBuf,
    pub report_text: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub tariff: u64,
    /// True iff every check passed.
    pub passed: bool,
    pub deadlock_suspected: bool,
    pub vehicles: Vec<VehicleVerdict>,
    pub terminals: Vec<TerminalVerdict>,
    pub lookups: Vec<LookupVerdict>,
    pub invoices: Vec<Invoice>,
    pub exposures: Vec<Exposure>,
    pub checks: Vec<CheckResult>,
    pub step_errors: Vec<StepError>,
    pub files: Option<OutputFiles>,
}

impl RunReport {
    pub fn status(&self) -> &'static str {
        if self.passed {
            "PASS"
        } else {
            "FAIL"
        }
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {}  seed {}  tariff {}/min  {}",
            self.scenario,
            self.seed,
            self.tariff,
            self.status()
        );
        for v in &self.vehicles {
            let _ = write!(s, "  vehicle {:<10} {}", v.name, v.phase);
            if let Some(f) = &v.failure {
                let _ = write!(s, " ({f})");
            }
            if let Some(d) = v.duration_ms {
                let _ = write!(s, " duration {d} ms");
            }
            if v.clock_skew {
                s.push_str(" [clock skew]");
            }
            s.push('\n');
        }
        for t in &self.terminals {
            let switches: Vec<String> = t
                .energy
                .iter()
                .map(|e| format!("{}@{}", if e.on { "on" } else { "off" }, e.seq))
                .collect();
            let _ = writeln!(
                s,
                "  terminal {:<9} {} energy [{}] rejected {} dropped {}",
                t.name,
                t.phase,
                switches.join(" "),
                t.rejections.len(),
                t.dropped.len()
            );
        }
        for l in &self.lookups {
            let _ = writeln!(
                s,
                "  lookup   {} seq {} -> {}",
                l.terminal, l.request_seq, l.outcome
            );
        }
        for inv in &self.invoices {
            let _ = writeln!(
                s,
                "  invoice  {} {} ms amount {}{}",
                inv.id_a,
                inv.duration_ms,
                inv.amount,
                if inv.underfunded {
                    " (underfunded)"
                } else {
                    ""
                }
            );
        }
        for x in &self.exposures {
            let _ = writeln!(
                s,
                "  exposure {} energy on at seq {} without an authenticated vehicle{}",
                x.terminal,
                x.on_seq,
                x.duration_ms
                    .map(|d| format!(" for {d} ms"))
                    .unwrap_or_default()
            );
        }
        if self.deadlock_suspected {
            s.push_str("  deadlock suspected: step limit exceeded\n");
        }
        for c in &self.checks {
            let _ = write!(
                s,
                "  [{}] {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name
            );
            if !c.passed || c.name.starts_with("expect@") {
                let _ = write!(s, ": {}", c.detail);
            }
            if !c.evidence.is_empty() {
                let _ = write!(s, " (evidence {:?})", c.evidence);
            }
            s.push('\n');
        }
        s
    }
}

/// Writes transcript, invoices, registry snapshot and both report forms
/// into `out_dir`, named after the scenario. Records the paths in the
/// report.
pub fn write_run_outputs(out_dir: &Path, outcome: &mut RunOutcome) -> io::Result<OutputFiles> {
    fs::create_dir_all(out_dir)?;
    let stem = &outcome.report.scenario;
    let files = OutputFiles {
        transcript: out_dir.join(format!("{stem}.transcript.jsonl")),
        invoices: out_dir.join(format!("{stem}.invoices")),
        registry: out_dir.join(format!("{stem}.registry")),
        report_json: out_dir.join(format!("{stem}.report.json")),
        report_text: out_dir.join(format!("{stem}.report.txt")),
    };
    outcome.report.files = Some(files.clone());
    fs::write(&files.transcript, render_transcript(&outcome.transcript))?;
    fs::write(&files.invoices, outcome.registry.render_invoices())?;
    fs::write(&files.registry, outcome.registry.render_registry())?;
    fs::write(&files.report_json, outcome.report.to_json() + "\n")?;
    fs::write(&files.report_text, outcome.report.render_text())?;
    Ok(files)
}
