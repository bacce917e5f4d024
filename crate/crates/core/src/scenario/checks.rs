//! Security and accounting checks evaluated after a run. Most work from the
//! transcript alone; the rest use what the simulator observed directly.

use std::collections::{BTreeMap, HashMap};

use crate::channel::{ChannelEvent, Direction, Disposition};
use crate::crypto::{encrypt_block, verify_mac, Block};
use crate::messages::{decode, LookupResponse, ProtocolMessage};
use crate::registry::Tariff;
use crate::report::{CheckResult, RunReport};

use super::sim::ChargingStart;
use super::{Expect, LookupOutcome, Scenario};

pub(crate) struct CheckInputs<'a> {
    pub scenario: &'a Scenario,
    pub transcript: &'a [ChannelEvent],
    pub frames_emitted: u64,
    pub charging: &'a [ChargingStart],
    pub tariff: Tariff,
    pub initial_balances: &'a BTreeMap<String, u64>,
    pub balances: &'a BTreeMap<String, u64>,
    pub report: &'a RunReport,
}

fn result(name: &str, evidence: Vec<u64>, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: evidence.is_empty(),
        evidence,
        detail: detail.into(),
    }
}

fn outcome_of(bytes: &[u8]) -> Option<LookupResponse> {
    match decode(bytes) {
        Ok(ProtocolMessage::LookupResponse(r)) => Some(r),
        _ => None,
    }
}

/// Sequence numbers are 1..=n and every frame handed to the radio link
/// appears exactly once.
fn transcript_complete(i: &CheckInputs) -> CheckResult {
    let mut bad: Vec<u64> = i
        .transcript
        .iter()
        .enumerate()
        .filter(|(idx, e)| e.seq != *idx as u64 + 1)
        .map(|(_, e)| e.seq)
        .collect();
    let radio = i
        .transcript
        .iter()
        .filter(|e| e.direction.is_radio())
        .count() as u64;
    let detail = format!("{radio} radio events, {} frames emitted", i.frames_emitted);
    if radio != i.frames_emitted && bad.is_empty() {
        bad.push(0);
    }
    result("transcript_complete", bad, detail)
}

/// Every energy-on follows a successful lookup for the same terminal, and
/// each success authorizes at most one activation.
fn energy_after_success(i: &CheckInputs) -> CheckResult {
    let mut authorized: HashMap<&str, bool> = HashMap::new();
    let mut bad = Vec::new();
    for e in i.transcript {
        match e.direction {
            Direction::ServerToTerminal => {
                let ok = matches!(outcome_of(&e.payload), Some(LookupResponse::Success { .. }));
                authorized.insert(&e.terminal, ok);
            }
            Direction::EnergySwitch if e.kind == "energy_on" => {
                // Each success authorizes exactly one switch-on.
                let granted = authorized.insert(&e.terminal, false).unwrap_or(false);
                if !granted {
                    bad.push(e.seq);
                }
            }
            _ => {}
        }
    }
    result(
        "energy_after_success",
        bad,
        "energy-on events not preceded by a successful lookup",
    )
}

/// Every lookup request the terminal sends was triggered by an auth request
/// carrying a valid MAC under the group key.
fn mac_gated_forwarding(i: &CheckInputs) -> CheckResult {
    let k_g = i.scenario.group_key;
    let mut last_in: HashMap<&str, &ChannelEvent> = HashMap::new();
    let mut bad = Vec::new();
    for e in i.transcript {
        if e.direction == Direction::VehicleToTerminal && e.disposition.reached_receiver() {
            last_in.insert(&e.terminal, e);
        }
        if e.direction == Direction::TerminalToServer && e.kind == "lookup_request" {
            let Ok(ProtocolMessage::LookupRequest(lookup)) = decode(&e.payload) else {
                bad.push(e.seq);
                continue;
            };
            let ok = last_in.get(e.terminal.as_str()).is_some_and(|trigger| {
                matches!(decode(&trigger.payload), Ok(ProtocolMessage::AuthRequest(req))
                    if req.n_a == lookup.n_a && verify_mac(&req.mac_input(), &req.mac, &k_g))
            });
            if !ok {
                bad.push(e.seq);
            }
        }
    }
    result(
        "mac_gated_forwarding",
        bad,
        "lookups forwarded without a MAC-valid auth request",
    )
}

/// Every successful lookup returns the vehicle whose pseudonym was queried.
fn pseudonym_consistency(i: &CheckInputs) -> CheckResult {
    let mut last_m5: HashMap<&str, Block> = HashMap::new();
    let mut bad = Vec::new();
    for e in i.transcript {
        match (e.direction, decode(&e.payload)) {
            (Direction::TerminalToServer, Ok(ProtocolMessage::LookupRequest(l))) => {
                last_m5.insert(&e.terminal, l.m5);
            }
            (
                Direction::ServerToTerminal,
                Ok(ProtocolMessage::LookupResponse(LookupResponse::Success { id_a, k_a })),
            ) if last_m5.get(e.terminal.as_str()) != Some(&encrypt_block(&id_a, &k_a)) => {
                bad.push(e.seq);
            }
            _ => {}
        }
    }
    result(
        "pseudonym_consistency",
        bad,
        "successful lookups whose identity does not encrypt to the queried pseudonym",
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// No vehicle identity, vehicle key or group key shows up on the radio
/// link, raw or hex-encoded.
fn confidentiality(i: &CheckInputs) -> CheckResult {
    let mut secrets: Vec<Vec<u8>> = vec![i.scenario.group_key.0.to_vec()];
    for v in &i.scenario.vehicles {
        secrets.push(v.identity.id_a.0.to_vec());
        secrets.push(v.identity.k_a.0.to_vec());
    }
    let patterns: Vec<Vec<u8>> = secrets
        .iter()
        .flat_map(|s| {
            let lower = hex::encode(s);
            let upper = lower.to_uppercase();
            [s.clone(), lower.into_bytes(), upper.into_bytes()]
        })
        .collect();
    let mut bad = Vec::new();
    for e in i.transcript.iter().filter(|e| e.direction.is_radio()) {
        let original = match &e.disposition {
            Disposition::Modified { original } => Some(original.as_slice()),
            _ => None,
        };
        let leaked = patterns
            .iter()
            .any(|p| contains(&e.payload, p) || original.is_some_and(|o| contains(o, p)));
        if leaked {
            bad.push(e.seq);
        }
    }
    result(
        "confidentiality",
        bad,
        "radio payloads containing an identity or key",
    )
}

/// A vehicle only starts charging on a challenge whose MAC verifies.
fn charging_requires_authentic_challenge(i: &CheckInputs) -> CheckResult {
    let k_g = i.scenario.group_key;
    let bad = i
        .charging
        .iter()
        .filter(|c| {
            let frame = i.transcript.get(c.frame_seq as usize - 1);
            !frame.is_some_and(|f| {
                matches!(decode(&f.payload), Ok(ProtocolMessage::Challenge(ch))
                    if verify_mac(&ch.mac_input(), &ch.mac, &k_g))
            })
        })
        .map(|c| c.frame_seq)
        .collect();
    result(
        "charging_requires_authentic_challenge",
        bad,
        "vehicles that started charging on an unauthenticated challenge",
    )
}

/// The start time a vehicle recovers equals the one its terminal embedded.
fn vehicle_time_consistent(i: &CheckInputs) -> CheckResult {
    let bad = i
        .charging
        .iter()
        .filter(|c| c.t_1 != Some(c.t_2))
        .map(|c| c.frame_seq)
        .collect();
    result(
        "vehicle_time_consistent",
        bad,
        "recovered start times that differ from the terminal's",
    )
}

/// Invoices follow the tariff, and for fully funded vehicles the invoiced
/// total plus the remaining balance equals the starting balance.
fn billing_consistent(i: &CheckInputs) -> CheckResult {
    let mut bad = Vec::new();
    let mut problems = Vec::new();
    for (idx, inv) in i.report.invoices.iter().enumerate() {
        let duration = inv.t_end.0.checked_sub(inv.t_start.0);
        if duration != Some(inv.duration_ms) || inv.amount != i.tariff.amount_for(inv.duration_ms) {
            bad.push(idx as u64 + 1);
            problems.push(format!("invoice {} does not follow the tariff", idx + 1));
        }
    }
    for v in &i.scenario.vehicles {
        let invoices: Vec<_> = i
            .report
            .invoices
            .iter()
            .filter(|inv| inv.id_a == v.identity.id_a)
            .collect();
        if invoices.iter().any(|inv| inv.underfunded) {
            continue;
        }
        let total: u128 = invoices.iter().map(|inv| inv.amount as u128).sum();
        let start = i.initial_balances.get(&v.name).copied().unwrap_or(0) as u128;
        let end = i.balances.get(&v.name).copied().unwrap_or(0) as u128;
        if total + end != start {
            problems.push(format!(
                "{}: invoiced {total} + balance {end} != initial {start}",
                v.name
            ));
            bad.push(0);
        }
    }
    let detail = if problems.is_empty() {
        format!("{} invoices", i.report.invoices.len())
    } else {
        problems.join("; ")
    };
    result("billing_consistent", bad, detail)
}

fn expectation(i: &CheckInputs, e: &Expect) -> Result<(), String> {
    let r = i.report;
    let vehicle = |name: &str| {
        r.vehicles
            .iter()
            .find(|v| v.name == name)
            .expect("validated")
    };
    let terminal = |name: &str| {
        r.terminals
            .iter()
            .find(|t| t.name == name)
            .expect("validated")
    };
    let eq = |what: &str, got: String, want: String| {
        if got == want {
            Ok(())
        } else {
            Err(format!("{what}: got {got}, want {want}"))
        }
    };
    match e {
        Expect::VehiclePhase { vehicle: v, phase } => {
            eq("phase", vehicle(v).phase.clone(), phase.clone())
        }
        Expect::VehicleFailure { vehicle: v, reason } => eq(
            "failure",
            format!("{:?}", vehicle(v).failure),
            format!("{:?}", Some(reason)),
        ),
        Expect::VehicleSkew { vehicle: v } => eq(
            "clock skew",
            vehicle(v).clock_skew.to_string(),
            "true".into(),
        ),
        Expect::VehicleDuration { vehicle: v, millis } => eq(
            "duration",
            format!("{:?}", vehicle(v).duration_ms),
            format!("{:?}", Some(millis)),
        ),
        Expect::TerminalEnergized { terminal: t, count } => eq(
            "energy activations",
            terminal(t)
                .energy
                .iter()
                .filter(|s| s.on)
                .count()
                .to_string(),
            count.to_string(),
        ),
        Expect::TerminalRejections { terminal: t, count } => eq(
            "rejections",
            terminal(t).rejections.len().to_string(),
            count.to_string(),
        ),
        Expect::Lookups { outcome, count } => {
            let label = match outcome {
                LookupOutcome::Success => "success",
                LookupOutcome::NotFound => "not_found",
                LookupOutcome::ReplayDetected => "replay_detected",
            };
            eq(
                label,
                r.lookups
                    .iter()
                    .filter(|l| l.outcome == label)
                    .count()
                    .to_string(),
                count.to_string(),
            )
        }
        Expect::ServerContacts(n) => eq(
            "server contacts",
            r.lookups.len().to_string(),
            n.to_string(),
        ),
        Expect::Invoices(n) => eq("invoices", r.invoices.len().to_string(), n.to_string()),
        Expect::InvoiceAmount { index, amount } => eq(
            "invoice amount",
            format!(
                "{:?}",
                r.invoices.get(index.wrapping_sub(1)).map(|inv| inv.amount)
            ),
            format!("{:?}", Some(amount)),
        ),
        Expect::Balance { vehicle: v, amount } => eq(
            "balance",
            format!("{:?}", i.balances.get(v)),
            format!("{:?}", Some(amount)),
        ),
        Expect::Exposures(n) => eq("exposures", r.exposures.len().to_string(), n.to_string()),
        Expect::Deadlock => eq(
            "deadlock suspected",
            r.deadlock_suspected.to_string(),
            "true".into(),
        ),
    }
}

pub(crate) fn run_all(i: &CheckInputs) -> Vec<CheckResult> {
    let mut out = vec![
        transcript_complete(i),
        energy_after_success(i),
        mac_gated_forwarding(i),
        pseudonym_consistency(i),
        confidentiality(i),
        charging_requires_authentic_challenge(i),
        vehicle_time_consistent(i),
        billing_consistent(i),
    ];
    let expects_deadlock = i
        .scenario
        .expectations
        .iter()
        .any(|e| e.expect == Expect::Deadlock);
    if !expects_deadlock {
        out.push(CheckResult {
            name: "quiescence".into(),
            passed: !i.report.deadlock_suspected,
            evidence: Vec::new(),
            detail: if i.report.deadlock_suspected {
                format!("step limit {} exceeded", i.scenario.max_steps)
            } else {
                "run reached quiescence".into()
            },
        });
    }
    out.push(CheckResult {
        name: "schedule_valid".into(),
        passed: i.report.step_errors.is_empty(),
        evidence: i.report.step_errors.iter().map(|e| e.line as u64).collect(),
        detail: i
            .report
            .step_errors
            .iter()
            .map(|e| format!("line {}: {}", e.line, e.message))
            .collect::<Vec<_>>()
            .join("; "),
    });
    for e in &i.scenario.expectations {
        let (passed, detail) = match expectation(i, &e.expect) {
            Ok(()) => (true, e.text.clone()),
            Err(why) => (false, format!("{}: {why}", e.text)),
        };
        out.push(CheckResult {
            name: format!("expect@{}", e.line),
            passed,
            evidence: Vec::new(),
            detail,
        });
    }
    out
}
