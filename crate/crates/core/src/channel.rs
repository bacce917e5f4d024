//! The vehicle-terminal radio link as an attacker-controlled medium, plus
//! the transcript every simulated event is written to.
//!
//! The attacker sees every radio frame and may pass, block, modify, replay
//! or inject frames per its [`AdversaryScript`]. Trusted-link traffic
//! (terminal and server) and energy switching are recorded but cannot be
//! touched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::messages::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "v2t")]
    VehicleToTerminal,
    #[serde(rename = "t2v")]
    TerminalToVehicle,
    #[serde(rename = "t2s")]
    TerminalToServer,
    #[serde(rename = "s2t")]
    ServerToTerminal,
    #[serde(rename = "energy")]
    EnergySwitch,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::VehicleToTerminal => "v2t",
            Direction::TerminalToVehicle => "t2v",
            Direction::TerminalToServer => "t2s",
            Direction::ServerToTerminal => "s2t",
            Direction::EnergySwitch => "energy",
        }
    }

    /// Radio traffic is the only traffic the attacker can touch.
    pub fn is_radio(self) -> bool {
        matches!(
            self,
            Direction::VehicleToTerminal | Direction::TerminalToVehicle
        )
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "v2t" => Direction::VehicleToTerminal,
            "t2v" => Direction::TerminalToVehicle,
            "t2s" => Direction::TerminalToServer,
            "s2t" => Direction::ServerToTerminal,
            "energy" => Direction::EnergySwitch,
            other => return Err(format!("unknown direction {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "disposition", rename_all = "snake_case")]
pub enum Disposition {
    Delivered,
    Blocked,
    Modified {
        #[serde(with = "hex::serde")]
        original: Vec<u8>,
    },
    Injected,
    Replayed {
        source: u64,
    },
}

impl Disposition {
    pub fn name(&self) -> &'static str {
        match self {
            Disposition::Delivered => "delivered",
            Disposition::Blocked => "blocked",
            Disposition::Modified { .. } => "modified",
            Disposition::Injected => "injected",
            Disposition::Replayed { .. } => "replayed",
        }
    }

    /// Whether the payload reached its receiver.
    pub fn reached_receiver(&self) -> bool {
        !matches!(self, Disposition::Blocked)
    }
}

/// One transcript record. For radio and trusted-link events `kind` is the
/// message kind; for energy events it is `energy_on` or `energy_off`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub seq: u64,
    pub direction: Direction,
    pub terminal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle: Option<String>,
    pub kind: String,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    #[serde(flatten)]
    pub disposition: Disposition,
}

impl ChannelEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// Renders a transcript as JSON lines.
pub fn render_transcript(events: &[ChannelEvent]) -> String {
    events.iter().map(|e| e.to_json_line() + "\n").collect()
}

pub fn parse_transcript(text: &str) -> Result<Vec<ChannelEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// The endpoints of one radio link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    pub vehicle: String,
    pub terminal: String,
}

impl Link {
    pub fn new(vehicle: impl Into<String>, terminal: impl Into<String>) -> Self {
        Link {
            vehicle: vehicle.into(),
            terminal: terminal.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occurrence {
    /// 1-based index among honest frames of the same direction and kind.
    Nth(u32),
    Any,
}

impl Occurrence {
    fn matches(self, n: u32) -> bool {
        match self {
            Occurrence::Nth(want) => want == n,
            Occurrence::Any => true,
        }
    }
}

/// Reference to a captured honest frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureRef {
    pub direction: Direction,
    pub kind: MessageKind,
    pub occurrence: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleAction {
    Pass,
    Block,
    /// Suppress the frame and deliver a captured one in its place.
    Replay(CaptureRef),
    /// XOR `mask` into the payload starting at `offset`. Mask bytes past the
    /// end of the payload are ignored.
    Mutate {
        offset: usize,
        mask: Vec<u8>,
    },
    /// Suppress the frame and deliver these bytes instead.
    Inject(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub direction: Direction,
    pub kind: MessageKind,
    pub occurrence: Occurrence,
    pub action: RuleAction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdversaryScript {
    pub rules: Vec<Rule>,
}

impl AdversaryScript {
    pub fn passive() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rule: Rule) -> Result<(), String> {
        if !rule.direction.is_radio() {
            return Err(format!(
                "rules may only target radio traffic (v2t, t2v), not {}",
                rule.direction
            ));
        }
        self.rules.push(rule);
        Ok(())
    }

    fn action_for(&self, direction: Direction, kind: MessageKind, n: u32) -> &RuleAction {
        self.rules
            .iter()
            .find(|r| r.direction == direction && r.kind == kind && r.occurrence.matches(n))
            .map_or(&RuleAction::Pass, |r| &r.action)
    }
}

/// A frame the attacker has seen on the radio link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub seq: u64,
    pub direction: Direction,
    pub kind: MessageKind,
    pub link: Link,
    pub payload: Vec<u8>,
}

/// What happened to a frame, and what (if anything) the receiver gets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub disposition: Disposition,
    pub seq: u64,
    pub delivered: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
pub struct Channel {
    script: AdversaryScript,
    transcript: Vec<ChannelEvent>,
    captures: Vec<Capture>,
    honest: BTreeMap<(Direction, MessageKind), Vec<u64>>,
    emitted: u64,
}

impl Channel {
    pub fn new(script: AdversaryScript) -> Self {
        Channel {
            script,
            ..Self::default()
        }
    }

    pub fn transcript(&self) -> &[ChannelEvent] {
        &self.transcript
    }

    pub fn into_transcript(self) -> Vec<ChannelEvent> {
        self.transcript
    }

    pub fn captures(&self) -> &[Capture] {
        &self.captures
    }

    /// Frames handed to the channel by any sender, attacker included.
    pub fn frames_emitted(&self) -> u64 {
        self.emitted
    }

    pub fn capture_by_seq(&self, seq: u64) -> Option<&Capture> {
        self.captures.iter().find(|c| c.seq == seq)
    }

    /// Looks up the n-th honest frame of a direction and kind.
    pub fn capture(&self, r: CaptureRef) -> Option<&Capture> {
        let seq = *self
            .honest
            .get(&(r.direction, r.kind))?
            .get(r.occurrence.checked_sub(1)? as usize)?;
        self.capture_by_seq(seq)
    }

    fn record(
        &mut self,
        direction: Direction,
        link: &Link,
        kind: String,
        payload: Vec<u8>,
        disposition: Disposition,
    ) -> u64 {
        let seq = self.transcript.len() as u64 + 1;
        let vehicle = match direction {
            Direction::VehicleToTerminal | Direction::TerminalToVehicle => {
                Some(link.vehicle.clone())
            }
            _ => None,
        };
        if direction.is_radio() {
            self.captures.push(Capture {
                seq,
                direction,
                kind: MessageKind::of_bytes(&payload),
                link: link.clone(),
                payload: payload.clone(),
            });
        }
        self.transcript.push(ChannelEvent {
            seq,
            direction,
            terminal: link.terminal.clone(),
            vehicle,
            kind,
            payload,
            disposition,
        });
        seq
    }

    /// Sends an honest party's radio frame through the attacker.
    pub fn deliver(&mut self, link: &Link, direction: Direction, payload: Vec<u8>) -> Delivery {
        debug_assert!(direction.is_radio());
        self.emitted += 1;
        let kind = MessageKind::of_bytes(&payload);
        let n = self.honest.get(&(direction, kind)).map_or(0, Vec::len) as u32 + 1;
        let action = self.script.action_for(direction, kind, n).clone();
        let label = kind.as_str().to_string();

        let (seq, disposition, delivered) = match action {
            RuleAction::Pass => {
                let seq = self.record(
                    direction,
                    link,
                    label,
                    payload.clone(),
                    Disposition::Delivered,
                );
                (seq, Disposition::Delivered, Some(payload))
            }
            RuleAction::Block => {
                let seq = self.record(direction, link, label, payload, Disposition::Blocked);
                (seq, Disposition::Blocked, None)
            }
            RuleAction::Mutate { offset, mask } => {
                let mut mutated = payload.clone();
                for (b, m) in mutated.iter_mut().skip(offset).zip(mask.iter()) {
                    *b ^= m;
                }
                let disposition = Disposition::Modified { original: payload };
                let mkind = MessageKind::of_bytes(&mutated).as_str().to_string();
                let seq = self.record(direction, link, mkind, mutated.clone(), disposition.clone());
                (seq, disposition, Some(mutated))
            }
            RuleAction::Replay(r) => {
                let seq = self.record(direction, link, label, payload, Disposition::Blocked);
                self.honest.entry((direction, kind)).or_default().push(seq);
                return match self.capture(r).cloned() {
                    Some(cap) => self.attacker_send(link, direction, cap.payload, Some(cap.seq)),
                    None => Delivery {
                        disposition: Disposition::Blocked,
                        seq,
                        delivered: None,
                    },
                };
            }
            RuleAction::Inject(bytes) => {
                let seq = self.record(direction, link, label, payload, Disposition::Blocked);
                self.honest.entry((direction, kind)).or_default().push(seq);
                return self.attacker_send(link, direction, bytes, None);
            }
        };
        self.honest.entry((direction, kind)).or_default().push(seq);
        Delivery {
            disposition,
            seq,
            delivered,
        }
    }

    /// A frame originated by the attacker: fresh bytes (`source == None`) or
    /// a replay of the capture at `source`.
    pub fn attacker_send(
        &mut self,
        link: &Link,
        direction: Direction,
        payload: Vec<u8>,
        source: Option<u64>,
    ) -> Delivery {
        debug_assert!(direction.is_radio());
        self.emitted += 1;
        let disposition = match source {
            Some(source) => Disposition::Replayed { source },
            None => Disposition::Injected,
        };
        let label = MessageKind::of_bytes(&payload).as_str().to_string();
        let seq = self.record(direction, link, label, payload.clone(), disposition.clone());
        Delivery {
            disposition,
            seq,
            delivered: Some(payload),
        }
    }

    /// Records trusted-link traffic. Never intercepted.
    pub fn observe(&mut self, terminal: &str, direction: Direction, payload: Vec<u8>) -> u64 {
        debug_assert!(!direction.is_radio());
        let label = MessageKind::of_bytes(&payload).as_str().to_string();
        self.record(
            direction,
            &Link::new("", terminal),
            label,
            payload,
            Disposition::Delivered,
        )
    }

    pub fn record_energy(&mut self, terminal: &str, on: bool) -> u64 {
        let label = if on { "energy_on" } else { "energy_off" };
        self.record(
            Direction::EnergySwitch,
            &Link::new("", terminal),
            label.to_string(),
            vec![u8::from(on)],
            Disposition::Delivered,
        )
    }
}
