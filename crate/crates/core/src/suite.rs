//! The bundled scenario corpus and the attack suite built on it.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::report::write_run_outputs;
use crate::scenario::{self, RunOptions, ScenarioError};
use crate::MacCheck;

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../scenarios/", $name, ".scn")))),*]
    };
}

/// `(name, source)` for every scenario shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = bundled![
    "honest",
    "fleet",
    "eavesdrop",
    "replay",
    "replay_substitute",
    "stale_replay",
    "stale_replay_strict",
    "tamper",
    "tamper_challenge",
    "inject",
    "forge",
    "block",
    "clock_skew",
    "balance_limit",
    "repeat_sessions",
];

/// The scenarios the attack suite runs, one per attacker capability plus the
/// honest baseline.
pub const ATTACK_SUITE: &[&str] = &[
    "honest",
    "eavesdrop",
    "replay",
    "replay_substitute",
    "tamper",
    "tamper_challenge",
    "inject",
    "forge",
    "block",
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| *src)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub scenario: String,
    pub passed: bool,
    pub failed_checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub scenarios: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        for e in &self.scenarios {
            s.push_str(&format!(
                "{} {}",
                if e.passed { "PASS" } else { "FAIL" },
                e.scenario
            ));
            if !e.failed_checks.is_empty() {
                s.push_str(&format!("  failed: {}", e.failed_checks.join(", ")));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "attack suite: {}\n",
            if self.passed { "PASS" } else { "FAIL" }
        ));
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("bundled scenario {name}: {source}")]
    Scenario { name: String, source: ScenarioError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Runs every attack-suite scenario. Outputs go to `out_dir` when given.
pub fn run_attack_suite(
    out_dir: Option<&Path>,
    seed: Option<u64>,
    mac_check: MacCheck,
) -> Result<SuiteReport, SuiteError> {
    let mut entries = Vec::new();
    for name in ATTACK_SUITE {
        let src = bundled(name).expect("suite names are bundled");
        let wrap = |source| SuiteError::Scenario {
            name: name.to_string(),
            source,
        };
        let sc = scenario::parse(src).map_err(wrap)?;
        let mut outcome = scenario::run_scenario(
            &sc,
            RunOptions {
                seed,
                mac_check,
                ..RunOptions::default()
            },
        )
        .map_err(wrap)?;
        if let Some(dir) = out_dir {
            write_run_outputs(dir, &mut outcome)?;
        }
        entries.push(SuiteEntry {
            scenario: name.to_string(),
            passed: outcome.report.passed,
            failed_checks: outcome
                .report
                .failed_checks()
                .map(|c| c.name.clone())
                .collect(),
        });
    }
    Ok(SuiteReport {
        passed: entries.iter().all(|e| e.passed),
        scenarios: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_passes() {
        let mut failures = Vec::new();
        for (name, src) in BUNDLED {
            let sc = scenario::parse(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            let out = scenario::run_scenario(&sc, RunOptions::default())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            if !out.report.passed {
                failures.push(format!("{name}\n{}", out.report.render_text()));
            }
        }
        assert!(failures.is_empty(), "{}", failures.join("\n"));
    }

    #[test]
    fn suite_passes() {
        let r = run_attack_suite(None, None, MacCheck::Enforce).unwrap();
        assert!(r.passed, "{}", r.render_text());
        assert_eq!(r.scenarios.len(), ATTACK_SUITE.len());
    }
}
