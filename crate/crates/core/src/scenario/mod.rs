//! Scenario files: provisioning, an explicit schedule of party steps, the
//! attacker's rules and the expected verdicts.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! scenario honest
//! seed 7
//! tariff 5
//! start-time 1700000000000
//! group-key 03030303030303030303030303030303
//! replay-policy last            # or: strict
//! max-steps 10000
//! vehicle car1 id=<hex> key=<hex> balance=1000 channel=sms contact=+905551112233 [prng=1,2]
//! terminal t1 [prng=3,4]
//!
//! rule v2t auth_request 2 block
//! rule t2v challenge * mutate 1 80
//! rule v2t auth_request 2 replay v2t auth_request 1
//! rule v2t auth_request 1 inject <hex>
//!
//! begin car1 t1
//! advance 60000                 # every clock
//! advance car1 500              # one party's clock
//! clock t1 1700000001000
//! stop car1 t1 battery_full     # or balance_reached, unplugged
//! charge-until-balance car1 t1
//! reset car1
//! let na = rand
//! attack send v2t car1 t1 cat(hex:01, rand, rand, na)
//! attack replay v2t auth_request 1 [car1 t1]
//!
//! expect vehicle car1 phase completed
//! expect lookups replay_detected 1
//! ```

mod checks;
pub mod expr;
mod sim;

use std::fmt;
use std::str::FromStr;

use crate::channel::{AdversaryScript, CaptureRef, Direction, Link, Occurrence, Rule, RuleAction};
use crate::crypto::{Block, PrngState, SecretKey, Timestamp};
use crate::messages::MessageKind;
use crate::registry::{NotifyChannel, ReplayPolicy, Tariff};
use crate::vehicle::VehicleIdentity;

pub use expr::Expr;
pub use sim::{run_scenario, RunOptions, RunOutcome};

pub const DEFAULT_START_TIME: Timestamp = Timestamp(1_700_000_000_000);
pub const DEFAULT_MAX_STEPS: u64 = 10_000;
pub const DEFAULT_TARIFF: Tariff = Tariff(5);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleSpec {
    pub name: String,
    pub identity: VehicleIdentity,
    pub balance: u64,
    pub channel: NotifyChannel,
    pub contact: String,
    pub prng: Option<PrngState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TerminalSpec {
    pub name: String,
    pub prng: Option<PrngState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BatteryFull,
    BalanceReached,
    Unplugged,
}

impl FromStr for StopReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "battery_full" => StopReason::BatteryFull,
            "balance_reached" => StopReason::BalanceReached,
            "unplugged" => StopReason::Unplugged,
            other => return Err(format!("unknown stop reason {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepAction {
    Begin {
        vehicle: String,
        terminal: String,
    },
    Advance {
        party: Option<String>,
        millis: u64,
    },
    SetClock {
        party: String,
        at: Timestamp,
    },
    Stop {
        vehicle: String,
        terminal: String,
        reason: StopReason,
    },
    ChargeUntilBalance {
        vehicle: String,
        terminal: String,
    },
    Reset {
        vehicle: String,
    },
    Let {
        name: String,
        expr: Expr,
    },
    AttackReplay {
        capture: CaptureRef,
        link: Option<Link>,
    },
    AttackSend {
        direction: Direction,
        link: Link,
        expr: Expr,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub action: StepAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupOutcome {
    Success,
    NotFound,
    ReplayDetected,
}

impl FromStr for LookupOutcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "success" => LookupOutcome::Success,
            "not_found" => LookupOutcome::NotFound,
            "replay_detected" => LookupOutcome::ReplayDetected,
            other => return Err(format!("unknown lookup outcome {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    VehiclePhase {
        vehicle: String,
        phase: String,
    },
    VehicleFailure {
        vehicle: String,
        reason: String,
    },
    VehicleSkew {
        vehicle: String,
    },
    VehicleDuration {
        vehicle: String,
        millis: u64,
    },
    TerminalEnergized {
        terminal: String,
        count: usize,
    },
    TerminalRejections {
        terminal: String,
        count: usize,
    },
    Lookups {
        outcome: LookupOutcome,
        count: usize,
    },
    ServerContacts(usize),
    Invoices(usize),
    InvoiceAmount {
        index: usize,
        amount: u64,
    },
    Balance {
        vehicle: String,
        amount: u64,
    },
    Exposures(usize),
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub line: usize,
    pub text: String,
    pub expect: Expect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub tariff: Tariff,
    pub group_key: SecretKey,
    pub replay_policy: ReplayPolicy,
    pub start_time: Timestamp,
    pub max_steps: u64,
    pub vehicles: Vec<VehicleSpec>,
    pub terminals: Vec<TerminalSpec>,
    pub script: AdversaryScript,
    pub steps: Vec<Step>,
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    pub fn vehicle(&self, name: &str) -> Option<&VehicleSpec> {
        self.vehicles.iter().find(|v| v.name == name)
    }

    pub fn has_terminal(&self, name: &str) -> bool {
        self.terminals.iter().any(|t| t.name == name)
    }

    fn has_party(&self, name: &str) -> bool {
        self.vehicle(name).is_some() || self.has_terminal(name)
    }
}

const VEHICLE_PHASES: &[&str] = &[
    "idle",
    "awaiting_challenge",
    "charging",
    "completed",
    "failed",
];

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse()
        .map_err(|_| format!("{what} must be a number, got {s:?}"))
}

fn parse_prng(s: &str) -> Result<PrngState, String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("prng must be `s0,s1`, got {s:?}"))?;
    PrngState::new(parse_num(a, "prng s0")?, parse_num(b, "prng s1")?).map_err(|e| e.to_string())
}

fn parse_occurrence(s: &str) -> Result<Occurrence, String> {
    if s == "*" {
        return Ok(Occurrence::Any);
    }
    match parse_num::<u32>(s, "occurrence")? {
        0 => Err("occurrences count from 1".into()),
        n => Ok(Occurrence::Nth(n)),
    }
}

fn parse_kind(s: &str) -> Result<MessageKind, String> {
    MessageKind::parse(s).ok_or_else(|| format!("unknown message kind {s:?}"))
}

fn parse_capture_ref(words: &[&str]) -> Result<CaptureRef, String> {
    let [dir, kind, occ] = words else {
        return Err("expected `<direction> <kind> <occurrence>`".into());
    };
    let direction: Direction = dir.parse()?;
    if !direction.is_radio() {
        return Err("only radio frames are captured".into());
    }
    let Occurrence::Nth(occurrence) = parse_occurrence(occ)? else {
        return Err("a capture reference needs a concrete occurrence".into());
    };
    Ok(CaptureRef {
        direction,
        kind: parse_kind(kind)?,
        occurrence,
    })
}

fn parse_rule(words: &[&str]) -> Result<Rule, String> {
    if words.len() < 4 {
        return Err("expected `rule <direction> <kind> <occurrence> <action> ...`".into());
    }
    let action = match (words[3], &words[4..]) {
        ("pass", []) => RuleAction::Pass,
        ("block", []) => RuleAction::Block,
        ("mutate", [offset, mask]) => RuleAction::Mutate {
            offset: parse_num(offset, "mutate offset")?,
            mask: hex::decode(mask).map_err(|e| format!("mutate mask: {e}"))?,
        },
        ("replay", rest) => RuleAction::Replay(parse_capture_ref(rest)?),
        ("inject", [bytes]) => {
            RuleAction::Inject(hex::decode(bytes).map_err(|e| format!("inject bytes: {e}"))?)
        }
        (other, _) => return Err(format!("bad rule action {other:?}")),
    };
    Ok(Rule {
        direction: words[0].parse()?,
        kind: parse_kind(words[1])?,
        occurrence: parse_occurrence(words[2])?,
        action,
    })
}

#[derive(Default)]
struct VehicleDraft {
    id: Option<Block>,
    key: Option<SecretKey>,
    balance: u64,
    channel: Option<NotifyChannel>,
    contact: Option<String>,
    prng: Option<PrngState>,
}

fn parse_vehicle(words: &[&str]) -> Result<(String, VehicleDraft), String> {
    let Some((name, attrs)) = words.split_first() else {
        return Err("expected `vehicle <name> id=<hex> key=<hex> ...`".into());
    };
    let mut d = VehicleDraft::default();
    for attr in attrs {
        let (k, v) = attr
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {attr:?}"))?;
        match k {
            "id" => d.id = Some(Block::from_hex(v).map_err(|e| format!("id: {e}"))?),
            "key" => d.key = Some(SecretKey::from_hex(v).map_err(|e| format!("key: {e}"))?),
            "balance" => d.balance = parse_num(v, "balance")?,
            "channel" => d.channel = Some(v.parse()?),
            "contact" => d.contact = Some(v.to_string()),
            "prng" => d.prng = Some(parse_prng(v)?),
            other => return Err(format!("unknown vehicle attribute {other:?}")),
        }
    }
    Ok((name.to_string(), d))
}

fn parse_expect(words: &[&str]) -> Result<Expect, String> {
    let count = |s: &str| parse_num::<usize>(s, "count");
    Ok(match words {
        ["vehicle", v, "phase", p] => {
            if !VEHICLE_PHASES.contains(p) {
                return Err(format!("unknown vehicle phase {p:?}"));
            }
            Expect::VehiclePhase {
                vehicle: v.to_string(),
                phase: p.to_string(),
            }
        }
        ["vehicle", v, "failure", r] => {
            if !["bad_mac", "bad_timestamp"].contains(r) {
                return Err(format!("unknown failure reason {r:?}"));
            }
            Expect::VehicleFailure {
                vehicle: v.to_string(),
                reason: r.to_string(),
            }
        }
        ["vehicle", v, "skew"] => Expect::VehicleSkew {
            vehicle: v.to_string(),
        },
        ["vehicle", v, "duration", ms] => Expect::VehicleDuration {
            vehicle: v.to_string(),
            millis: parse_num(ms, "duration")?,
        },
        ["terminal", t, "energized", n] => Expect::TerminalEnergized {
            terminal: t.to_string(),
            count: count(n)?,
        },
        ["terminal", t, "rejections", n] => Expect::TerminalRejections {
            terminal: t.to_string(),
            count: count(n)?,
        },
        ["lookups", outcome, n] => Expect::Lookups {
            outcome: outcome.parse()?,
            count: count(n)?,
        },
        ["server-contacts", n] => Expect::ServerContacts(count(n)?),
        ["invoices", n] => Expect::Invoices(count(n)?),
        ["invoice", i, "amount", a] => Expect::InvoiceAmount {
            index: count(i)?,
            amount: parse_num(a, "amount")?,
        },
        ["balance", v, a] => Expect::Balance {
            vehicle: v.to_string(),
            amount: parse_num(a, "balance")?,
        },
        ["exposures", n] => Expect::Exposures(count(n)?),
        ["deadlock"] => Expect::Deadlock,
        _ => return Err(format!("unknown expectation `{}`", words.join(" "))),
    })
}

fn parse_step(words: &[&str], rest_after: impl Fn(usize) -> String) -> Result<StepAction, String> {
    Ok(match words {
        ["begin", v, t] => StepAction::Begin {
            vehicle: v.to_string(),
            terminal: t.to_string(),
        },
        ["advance", ms] => StepAction::Advance {
            party: None,
            millis: parse_num(ms, "advance")?,
        },
        ["advance", party, ms] => StepAction::Advance {
            party: Some(party.to_string()),
            millis: parse_num(ms, "advance")?,
        },
        ["clock", party, at] => StepAction::SetClock {
            party: party.to_string(),
            at: Timestamp(parse_num(at, "clock")?),
        },
        ["stop", v, t] => StepAction::Stop {
            vehicle: v.to_string(),
            terminal: t.to_string(),
            reason: StopReason::Unplugged,
        },
        ["stop", v, t, reason] => StepAction::Stop {
            vehicle: v.to_string(),
            terminal: t.to_string(),
            reason: reason.parse()?,
        },
        ["charge-until-balance", v, t] => StepAction::ChargeUntilBalance {
            vehicle: v.to_string(),
            terminal: t.to_string(),
        },
        ["reset", v] => StepAction::Reset {
            vehicle: v.to_string(),
        },
        ["let", name, "=", ..] => StepAction::Let {
            name: name.to_string(),
            expr: Expr::parse(&rest_after(3))?,
        },
        ["attack", "replay", rest @ ..] => {
            let (cap, link) = match rest {
                [d, k, o] => (parse_capture_ref(&[d, k, o])?, None),
                [d, k, o, v, t] => (parse_capture_ref(&[d, k, o])?, Some(Link::new(*v, *t))),
                _ => return Err("expected `attack replay <direction> <kind> <occurrence> [<vehicle> <terminal>]`".into()),
            };
            StepAction::AttackReplay { capture: cap, link }
        }
        ["attack", "send", dir, v, t, _, ..] => {
            let direction: Direction = dir.parse()?;
            if !direction.is_radio() {
                return Err("the attacker can only send on the radio link".into());
            }
            StepAction::AttackSend {
                direction,
                link: Link::new(*v, *t),
                expr: Expr::parse(&rest_after(5))?,
            }
        }
        _ => return Err(format!("unknown directive `{}`", words.join(" "))),
    })
}

/// Text after the first `n` whitespace-separated words of `line`.
fn tail(line: &str, n: usize) -> String {
    let mut rest = line.trim_start();
    for _ in 0..n {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        rest = rest[end..].trim_start();
    }
    rest.to_string()
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let mut name = None;
    let mut seed = 1;
    let mut tariff = DEFAULT_TARIFF;
    let mut group_key = None;
    let mut replay_policy = ReplayPolicy::LastNonce;
    let mut start_time = DEFAULT_START_TIME;
    let mut max_steps = DEFAULT_MAX_STEPS;
    let mut vehicles: Vec<(usize, String, VehicleDraft)> = Vec::new();
    let mut terminals = Vec::new();
    let mut script = AdversaryScript::default();
    let mut steps = Vec::new();
    let mut expectations = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ScenarioError {
            line: lineno,
            message,
        };
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["scenario", n] => name = Some(n.to_string()),
            ["seed", s] => seed = parse_num(s, "seed").map_err(err)?,
            ["tariff", t] => tariff = Tariff(parse_num(t, "tariff").map_err(err)?),
            ["group-key", k] => {
                group_key =
                    Some(SecretKey::from_hex(k).map_err(|e| err(format!("group key: {e}")))?)
            }
            ["replay-policy", "last"] => replay_policy = ReplayPolicy::LastNonce,
            ["replay-policy", "strict"] => replay_policy = ReplayPolicy::Strict,
            ["start-time", t] => start_time = Timestamp(parse_num(t, "start time").map_err(err)?),
            ["max-steps", n] => max_steps = parse_num(n, "max steps").map_err(err)?,
            ["vehicle", rest @ ..] => {
                let (n, d) = parse_vehicle(rest).map_err(err)?;
                vehicles.push((lineno, n, d));
            }
            ["terminal", n, rest @ ..] => {
                let prng = match rest {
                    [] => None,
                    [p] => Some(
                        parse_prng(
                            p.strip_prefix("prng=")
                                .ok_or_else(|| err(format!("unknown terminal attribute {p:?}")))?,
                        )
                        .map_err(err)?,
                    ),
                    _ => return Err(err("expected `terminal <name> [prng=s0,s1]`".into())),
                };
                terminals.push(TerminalSpec {
                    name: n.to_string(),
                    prng,
                });
            }
            ["rule", rest @ ..] => {
                let rule = parse_rule(rest).map_err(err)?;
                script.push(rule).map_err(err)?;
            }
            ["expect", rest @ ..] => expectations.push(Expectation {
                line: lineno,
                text: rest.join(" "),
                expect: parse_expect(rest).map_err(err)?,
            }),
            _ => steps.push(Step {
                line: lineno,
                action: parse_step(&words, |n| tail(line, n)).map_err(err)?,
            }),
        }
    }

    let group_key = group_key.ok_or(ScenarioError {
        line: 0,
        message: "missing `group-key`".into(),
    })?;
    let vehicles = vehicles
        .into_iter()
        .map(|(line, name, d)| {
            let missing = |what: &str| ScenarioError {
                line,
                message: format!("vehicle {name} is missing {what}="),
            };
            Ok(VehicleSpec {
                identity: VehicleIdentity {
                    id_a: d.id.ok_or_else(|| missing("id"))?,
                    k_a: d.key.ok_or_else(|| missing("key"))?,
                    k_g: group_key,
                },
                balance: d.balance,
                channel: d.channel.unwrap_or(NotifyChannel::Sms),
                contact: d.contact.unwrap_or_else(|| format!("{name}-owner")),
                prng: d.prng,
                name,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;

    let scenario = Scenario {
        name: name.unwrap_or_else(|| "unnamed".to_string()),
        seed,
        tariff,
        group_key,
        replay_policy,
        start_time,
        max_steps,
        vehicles,
        terminals,
        script,
        steps,
        expectations,
    };
    validate(&scenario)?;
    Ok(scenario)
}

fn validate(s: &Scenario) -> Result<(), ScenarioError> {
    let mut names = std::collections::BTreeSet::new();
    for n in s
        .vehicles
        .iter()
        .map(|v| &v.name)
        .chain(s.terminals.iter().map(|t| &t.name))
    {
        if n == "attacker" || n == "server" || !names.insert(n.as_str()) {
            return Err(ScenarioError {
                line: 0,
                message: format!("party name {n:?} is reserved or declared twice"),
            });
        }
    }
    let check_vehicle = |line: usize, v: &str| {
        if s.vehicle(v).is_none() {
            return Err(ScenarioError {
                line,
                message: format!("undeclared vehicle {v:?}"),
            });
        }
        Ok(())
    };
    let check_terminal = |line: usize, t: &str| {
        if !s.has_terminal(t) {
            return Err(ScenarioError {
                line,
                message: format!("undeclared terminal {t:?}"),
            });
        }
        Ok(())
    };
    for step in &s.steps {
        let line = step.line;
        match &step.action {
            StepAction::Begin { vehicle, terminal }
            | StepAction::Stop {
                vehicle, terminal, ..
            }
            | StepAction::ChargeUntilBalance { vehicle, terminal } => {
                check_vehicle(line, vehicle)?;
                check_terminal(line, terminal)?;
            }
            StepAction::Reset { vehicle } => check_vehicle(line, vehicle)?,
            StepAction::Advance {
                party: Some(party), ..
            }
            | StepAction::SetClock { party, .. } => {
                if !s.has_party(party) {
                    return Err(ScenarioError {
                        line,
                        message: format!("undeclared party {party:?}"),
                    });
                }
            }
            StepAction::AttackReplay {
                link: Some(link), ..
            }
            | StepAction::AttackSend { link, .. } => {
                check_vehicle(line, &link.vehicle)?;
                check_terminal(line, &link.terminal)?;
            }
            _ => {}
        }
    }
    for e in &s.expectations {
        match &e.expect {
            Expect::VehiclePhase { vehicle, .. }
            | Expect::VehicleFailure { vehicle, .. }
            | Expect::VehicleSkew { vehicle }
            | Expect::VehicleDuration { vehicle, .. }
            | Expect::Balance { vehicle, .. } => check_vehicle(e.line, vehicle)?,
            Expect::TerminalEnergized { terminal, .. }
            | Expect::TerminalRejections { terminal, .. } => check_terminal(e.line, terminal)?,
            _ => {}
        }
    }
    Ok(())
}
