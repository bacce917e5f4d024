use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::channel::{Channel, ChannelEvent, Direction, Link};
use crate::clock::{Clock, ManualClock};
use crate::crypto::{PrngState, Timestamp};
use crate::messages::{decode, encode, LookupResponse, ProtocolMessage};
use crate::registry::{Registry, Tariff};
use crate::report::{
    CheckResult, EnergySwitch, Exposure, LookupVerdict, RunReport, StepError, TerminalVerdict,
    VehicleVerdict,
};
use crate::terminal::{AuthDecision, LookupDecision, TerminalAgent};
use crate::vehicle::{ChallengeOutcome, FailureReason, VehiclePhase, VehicleSession};
use crate::MacCheck;

use super::checks;
use super::{Scenario, ScenarioError, StepAction, StopReason, VehicleSpec};

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's `seed`.
    pub seed: Option<u64>,
    /// Overrides the scenario's `tariff`.
    pub tariff: Option<Tariff>,
    pub mac_check: MacCheck,
    /// Pre-provisioned registry. Every scenario vehicle must already be in
    /// it; without one the vehicles are registered from the scenario.
    pub registry: Option<Registry>,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub transcript: Vec<ChannelEvent>,
    pub registry: Registry,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-party generator state derived from the run seed and the party's role
/// and name.
pub(crate) fn party_prng(seed: u64, role: &str, name: &str) -> PrngState {
    PrngState::from_seed(seed ^ fnv1a(&format!("{role}/{name}")))
}

struct VehicleSlot {
    spec: VehicleSpec,
    session: VehicleSession,
    clock: ManualClock,
}

struct TerminalSlot {
    agent: TerminalAgent,
    clock: ManualClock,
    energy: Vec<EnergySwitch>,
    rejections: Vec<u64>,
    dropped: Vec<u64>,
}

/// A vehicle reaching `Charging`, with the frame that caused it.
#[derive(Debug, Clone)]
pub(crate) struct ChargingStart {
    pub terminal: String,
    pub frame_seq: u64,
    pub t_2: Timestamp,
    /// Start time the terminal holds, if it has an active session.
    pub t_1: Option<Timestamp>,
}

enum Receiver {
    Vehicle,
    Terminal,
}

struct Pending {
    receiver: Receiver,
    link: Link,
    seq: u64,
    bytes: Vec<u8>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    tariff: Tariff,
    channel: Channel,
    registry: Registry,
    vehicles: BTreeMap<String, VehicleSlot>,
    terminals: BTreeMap<String, TerminalSlot>,
    attacker_prng: PrngState,
    vars: BTreeMap<String, Vec<u8>>,
    queue: VecDeque<Pending>,
    steps_taken: u64,
    deadlock: bool,
    step_errors: Vec<StepError>,
    lookups: Vec<LookupVerdict>,
    charging: Vec<ChargingStart>,
}

impl Sim<'_> {
    fn tick(&mut self) -> bool {
        self.steps_taken += 1;
        if self.steps_taken > self.scenario.max_steps {
            self.deadlock = true;
        }
        !self.deadlock
    }

    fn error(&mut self, line: usize, message: impl Into<String>) {
        self.step_errors.push(StepError {
            line,
            message: message.into(),
        });
    }

    fn clocks(&self) -> impl Iterator<Item = &ManualClock> {
        self.vehicles
            .values()
            .map(|v| &v.clock)
            .chain(self.terminals.values().map(|t| &t.clock))
    }

    fn party_clock(&self, name: &str) -> &ManualClock {
        self.vehicles
            .get(name)
            .map(|v| &v.clock)
            .or_else(|| self.terminals.get(name).map(|t| &t.clock))
            .expect("party names are validated at parse time")
    }

    fn send_radio(&mut self, link: Link, direction: Direction, bytes: Vec<u8>) {
        let d = self.channel.deliver(&link, direction, bytes);
        self.enqueue(link, direction, d.seq, d.delivered);
    }

    fn enqueue(&mut self, link: Link, direction: Direction, seq: u64, bytes: Option<Vec<u8>>) {
        let Some(bytes) = bytes else { return };
        let receiver = match direction {
            Direction::VehicleToTerminal => Receiver::Terminal,
            _ => Receiver::Vehicle,
        };
        self.queue.push_back(Pending {
            receiver,
            link,
            seq,
            bytes,
        });
    }

    fn drain(&mut self) {
        while let Some(p) = self.queue.pop_front() {
            if !self.tick() {
                self.queue.clear();
                return;
            }
            match p.receiver {
                Receiver::Terminal => self.terminal_receive(p),
                Receiver::Vehicle => self.vehicle_receive(p),
            }
        }
    }

    fn terminal_receive(&mut self, p: Pending) {
        let name = p.link.terminal.clone();
        let slot = self.terminals.get_mut(&name).expect("validated");
        // Malformed or unexpected frames on the radio are attack artifacts.
        let Ok(ProtocolMessage::AuthRequest(req)) = decode(&p.bytes) else {
            slot.dropped.push(p.seq);
            return;
        };
        let lookup = match slot.agent.handle_auth_request(&req) {
            Err(_) => {
                slot.dropped.push(p.seq);
                return;
            }
            Ok(AuthDecision::Rejected) => {
                slot.rejections.push(p.seq);
                return;
            }
            Ok(AuthDecision::Forward(lookup)) => lookup,
        };
        let request_seq = self.channel.observe(
            &name,
            Direction::TerminalToServer,
            encode(&ProtocolMessage::LookupRequest(lookup)),
        );
        let resp = self.registry.lookup_and_verify(&lookup.m5, &lookup.n_a);
        let response_seq = self.channel.observe(
            &name,
            Direction::ServerToTerminal,
            encode(&ProtocolMessage::LookupResponse(resp)),
        );
        self.lookups.push(LookupVerdict {
            terminal: name.clone(),
            request_seq,
            response_seq,
            outcome: match resp {
                LookupResponse::Success { .. } => "success",
                LookupResponse::NotFound => "not_found",
                LookupResponse::ReplayDetected => "replay_detected",
            }
            .to_string(),
        });
        let slot = self.terminals.get_mut(&name).expect("validated");
        let decision = slot
            .agent
            .handle_lookup_response(&resp)
            .expect("a lookup is pending right after forwarding");
        if let LookupDecision::Challenge(challenge) = decision {
            // Energy goes on before the challenge is transmitted.
            let at = slot.clock.now();
            let seq = self.channel.record_energy(&name, true);
            let slot = self.terminals.get_mut(&name).expect("validated");
            slot.energy.push(EnergySwitch { seq, on: true, at });
            self.send_radio(
                p.link,
                Direction::TerminalToVehicle,
                encode(&ProtocolMessage::Challenge(challenge)),
            );
        }
    }

    fn vehicle_receive(&mut self, p: Pending) {
        let slot = self.vehicles.get_mut(&p.link.vehicle).expect("validated");
        let Ok(ProtocolMessage::Challenge(challenge)) = decode(&p.bytes) else {
            return;
        };
        if !matches!(slot.session.phase(), VehiclePhase::AwaitingChallenge { .. }) {
            return;
        }
        let outcome = slot
            .session
            .handle_challenge(&slot.spec.identity, &challenge)
            .expect("phase checked above");
        if let ChallengeOutcome::Accepted { t_2 } = outcome {
            let t_1 = self
                .terminals
                .get(&p.link.terminal)
                .and_then(|t| t.agent.active_session())
                .map(|(_, t_1)| t_1);
            self.charging.push(ChargingStart {
                terminal: p.link.terminal.clone(),
                frame_seq: p.seq,
                t_2,
                t_1,
            });
        }
    }

    fn stop(&mut self, line: usize, vehicle: &str, terminal: &str) {
        let v = self.vehicles.get_mut(vehicle).expect("validated");
        if matches!(v.session.phase(), VehiclePhase::Charging { .. }) {
            v.session.on_energy_stop().expect("vehicle is charging");
        }
        let t = self.terminals.get_mut(terminal).expect("validated");
        if !t.agent.energy_active() {
            return;
        }
        let report = t.agent.on_session_end().expect("terminal is energized");
        let at = t.clock.now();
        let seq = self.channel.record_energy(terminal, false);
        let t = self.terminals.get_mut(terminal).expect("validated");
        t.energy.push(EnergySwitch { seq, on: false, at });
        self.channel.observe(
            terminal,
            Direction::TerminalToServer,
            encode(&ProtocolMessage::SessionReport(report)),
        );
        if let Err(e) = self.registry.bill_session(&report, self.tariff) {
            self.error(line, format!("billing failed: {e}"));
        }
    }

    fn step(&mut self, line: usize, action: &StepAction) {
        match action {
            StepAction::Begin { vehicle, terminal } => {
                let v = self.vehicles.get_mut(vehicle).expect("validated");
                match v.session.begin_auth(&v.spec.identity) {
                    Ok(req) => self.send_radio(
                        Link::new(vehicle, terminal),
                        Direction::VehicleToTerminal,
                        encode(&ProtocolMessage::AuthRequest(req)),
                    ),
                    Err(e) => self.error(line, format!("{vehicle}: {e}")),
                }
            }
            StepAction::Advance { party, millis } => match party {
                Some(p) => self.party_clock(p).advance(*millis),
                None => self.clocks().for_each(|c| c.advance(*millis)),
            },
            StepAction::SetClock { party, at } => self.party_clock(party).set(*at),
            StepAction::Stop {
                vehicle, terminal, ..
            } => self.stop(line, vehicle, terminal),
            StepAction::ChargeUntilBalance { vehicle, terminal } => {
                let id_a = self.vehicles[vehicle].spec.identity.id_a;
                let Some(record) = self.registry.record(&id_a) else {
                    self.error(line, format!("{vehicle} is not registered"));
                    return;
                };
                let ms = self.tariff.affordable_ms(record.balance);
                self.clocks().for_each(|c| c.advance(ms));
                self.step(
                    line,
                    &StepAction::Stop {
                        vehicle: vehicle.clone(),
                        terminal: terminal.clone(),
                        reason: StopReason::BalanceReached,
                    },
                );
            }
            StepAction::Reset { vehicle } => {
                self.vehicles
                    .get_mut(vehicle)
                    .expect("validated")
                    .session
                    .reset();
            }
            StepAction::Let { name, expr } => match self.eval(expr) {
                Ok(bytes) => {
                    self.vars.insert(name.clone(), bytes);
                }
                Err(e) => self.error(line, e),
            },
            StepAction::AttackReplay { capture, link } => {
                let Some(cap) = self.channel.capture(*capture).cloned() else {
                    self.error(line, "nothing captured to replay");
                    return;
                };
                let link = link.clone().unwrap_or(cap.link);
                let d =
                    self.channel
                        .attacker_send(&link, cap.direction, cap.payload, Some(cap.seq));
                self.enqueue(link, cap.direction, d.seq, d.delivered);
            }
            StepAction::AttackSend {
                direction,
                link,
                expr,
            } => match self.eval(expr) {
                Ok(bytes) => {
                    let d = self.channel.attacker_send(link, *direction, bytes, None);
                    self.enqueue(link.clone(), *direction, d.seq, d.delivered);
                }
                Err(e) => self.error(line, e),
            },
        }
    }

    fn eval(&mut self, expr: &super::Expr) -> Result<Vec<u8>, String> {
        let channel = &self.channel;
        let captures = |seq: u64| channel.capture_by_seq(seq).map(|c| c.payload.clone());
        super::expr::EvalContext {
            captures: &captures,
            vars: &self.vars,
            prng: &mut self.attacker_prng,
        }
        .eval(expr)
    }

    fn run(&mut self) {
        for step in &self.scenario.steps {
            if !self.tick() {
                break;
            }
            self.step(step.line, &step.action);
            self.drain();
            if self.deadlock {
                break;
            }
        }
    }

    fn exposures(&self) -> Vec<Exposure> {
        let mut out = Vec::new();
        for (name, t) in &self.terminals {
            let mut switches = t.energy.iter().peekable();
            while let Some(on) = switches.next() {
                if !on.on {
                    continue;
                }
                let off = switches.next_if(|s| !s.on);
                let covered = self.charging.iter().any(|c| {
                    &c.terminal == name
                        && c.frame_seq > on.seq
                        && off.is_none_or(|off| c.frame_seq < off.seq)
                });
                if !covered {
                    out.push(Exposure {
                        terminal: name.clone(),
                        on_seq: on.seq,
                        off_seq: off.map(|o| o.seq),
                        duration_ms: off.map(|o| o.at.saturating_since(on.at)),
                    });
                }
            }
        }
        out
    }
}

fn vehicle_verdict(name: &str, session: &VehicleSession) -> VehicleVerdict {
    let phase = *session.phase();
    let mut v = VehicleVerdict {
        name: name.to_string(),
        phase: phase.name().to_string(),
        failure: None,
        t_2: None,
        duration_ms: None,
        clock_skew: false,
    };
    match phase {
        VehiclePhase::Charging { t_2, .. } => v.t_2 = Some(t_2.0),
        VehiclePhase::Completed {
            t_2,
            duration_ms,
            clock_skew,
            ..
        } => {
            v.t_2 = Some(t_2.0);
            v.duration_ms = Some(duration_ms);
            v.clock_skew = clock_skew;
        }
        VehiclePhase::Failed { reason, .. } => {
            v.failure = Some(
                match reason {
                    FailureReason::BadMac => "bad_mac",
                    FailureReason::BadTimestamp => "bad_timestamp",
                }
                .to_string(),
            )
        }
        _ => {}
    }
    v
}

/// Runs a scenario to completion (or until its step budget runs out) and
/// evaluates every check against the resulting transcript.
pub fn run_scenario(scenario: &Scenario, opts: RunOptions) -> Result<RunOutcome, ScenarioError> {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let tariff = opts.tariff.unwrap_or(scenario.tariff);
    let registry = match opts.registry {
        Some(reg) => {
            for v in &scenario.vehicles {
                let found = reg.record(&v.identity.id_a);
                if found.as_ref().map(|r| r.k_a) != Some(v.identity.k_a) {
                    return Err(ScenarioError {
                        line: 0,
                        message: format!(
                            "vehicle {} ({}) is not provisioned in the registry",
                            v.name, v.identity.id_a
                        ),
                    });
                }
            }
            reg
        }
        None => {
            let reg = Registry::with_policy(scenario.replay_policy);
            for v in &scenario.vehicles {
                reg.register_vehicle(
                    v.identity.id_a,
                    v.identity.k_a,
                    v.balance,
                    v.contact.clone(),
                    v.channel,
                )
                .map_err(|e| ScenarioError {
                    line: 0,
                    message: format!("vehicle {}: {e}", v.name),
                })?;
            }
            reg
        }
    };
    let initial_balances: BTreeMap<String, u64> = scenario
        .vehicles
        .iter()
        .map(|v| {
            let b = registry.record(&v.identity.id_a).map_or(0, |r| r.balance);
            (v.name.clone(), b)
        })
        .collect();

    let vehicles = scenario
        .vehicles
        .iter()
        .map(|spec| {
            let clock = ManualClock::new(scenario.start_time);
            let prng = spec
                .prng
                .unwrap_or_else(|| party_prng(seed, "vehicle", &spec.name));
            let session =
                VehicleSession::new(prng, Arc::new(clock.clone())).with_mac_check(opts.mac_check);
            (
                spec.name.clone(),
                VehicleSlot {
                    spec: spec.clone(),
                    session,
                    clock,
                },
            )
        })
        .collect();
    let terminals = scenario
        .terminals
        .iter()
        .map(|spec| {
            let clock = ManualClock::new(scenario.start_time);
            let prng = spec
                .prng
                .unwrap_or_else(|| party_prng(seed, "terminal", &spec.name));
            let agent = TerminalAgent::new(scenario.group_key, prng, Arc::new(clock.clone()))
                .with_mac_check(opts.mac_check);
            (
                spec.name.clone(),
                TerminalSlot {
                    agent,
                    clock,
                    energy: Vec::new(),
                    rejections: Vec::new(),
                    dropped: Vec::new(),
                },
            )
        })
        .collect();

    let mut sim = Sim {
        scenario,
        tariff,
        channel: Channel::new(scenario.script.clone()),
        registry,
        vehicles,
        terminals,
        attacker_prng: party_prng(seed, "attacker", ""),
        vars: BTreeMap::new(),
        queue: VecDeque::new(),
        steps_taken: 0,
        deadlock: false,
        step_errors: Vec::new(),
        lookups: Vec::new(),
        charging: Vec::new(),
    };
    sim.run();

    let exposures = sim.exposures();
    let vehicles: Vec<VehicleVerdict> = sim
        .vehicles
        .iter()
        .map(|(name, slot)| vehicle_verdict(name, &slot.session))
        .collect();
    let terminals: Vec<TerminalVerdict> = sim
        .terminals
        .iter()
        .map(|(name, slot)| TerminalVerdict {
            name: name.clone(),
            phase: slot.agent.phase_name().to_string(),
            energy: slot.energy.clone(),
            rejections: slot.rejections.clone(),
            dropped: slot.dropped.clone(),
        })
        .collect();
    let invoices = sim.registry.invoices();
    let balances: BTreeMap<String, u64> = scenario
        .vehicles
        .iter()
        .map(|v| {
            let b = sim
                .registry
                .record(&v.identity.id_a)
                .map_or(0, |r| r.balance);
            (v.name.clone(), b)
        })
        .collect();

    let mut report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        tariff: tariff.0,
        passed: false,
        deadlock_suspected: sim.deadlock,
        vehicles,
        terminals,
        lookups: sim.lookups.clone(),
        invoices,
        exposures,
        checks: Vec::new(),
        step_errors: sim.step_errors.clone(),
        files: None,
    };

    let inputs = checks::CheckInputs {
        scenario,
        transcript: sim.channel.transcript(),
        frames_emitted: sim.channel.frames_emitted(),
        charging: &sim.charging,
        tariff,
        initial_balances: &initial_balances,
        balances: &balances,
        report: &report,
    };
    let results: Vec<CheckResult> = checks::run_all(&inputs);
    report.passed = results.iter().all(|c| c.passed);
    report.checks = results;

    let Sim {
        channel, registry, ..
    } = sim;
    Ok(RunOutcome {
        report,
        transcript: channel.into_transcript(),
        registry,
    })
}
