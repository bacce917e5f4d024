//! Terminal side: unwraps the vehicle's pseudonym for the server, issues the
//! time-bound challenge, switches the energy flow and reports finished
//! sessions for billing.

use std::sync::Arc;

use crate::clock::Clock;
use crate::crypto::{
    compute_mac, decrypt_block, encrypt_block, xor_combine, Block, MacTag, Nonce, PrngState,
    SecretKey, Timestamp,
};
use crate::error::ProtocolError;
use crate::messages::{
    AuthRequest, ChallengeMessage, LookupRequest, LookupResponse, SessionReport,
};
use crate::MacCheck;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TerminalSession {
    Idle,
    AwaitingLookup {
        n_a: Nonce,
        m5: Block,
    },
    Energized {
        n_a: Nonce,
        m5: Block,
        id_a: Block,
        k_a: SecretKey,
        t_1: Timestamp,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthDecision {
    /// Send this to the server over the trusted link.
    Forward(LookupRequest),
    /// MAC did not verify; nothing is forwarded and no state changes.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    NotFound,
    ReplayDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupDecision {
    /// Energy is already on when this is returned.
    Challenge(ChallengeMessage),
    Abort(AbortReason),
}

pub struct TerminalAgent {
    k_g: SecretKey,
    prng: PrngState,
    clock: Arc<dyn Clock>,
    mac_check: MacCheck,
    session: TerminalSession,
}

impl TerminalAgent {
    pub fn new(k_g: SecretKey, prng: PrngState, clock: Arc<dyn Clock>) -> Self {
        TerminalAgent {
            k_g,
            prng,
            clock,
            mac_check: MacCheck::Enforce,
            session: TerminalSession::Idle,
        }
    }

    pub fn with_mac_check(mut self, mac_check: MacCheck) -> Self {
        self.mac_check = mac_check;
        self
    }

    pub fn energy_active(&self) -> bool {
        matches!(self.session, TerminalSession::Energized { .. })
    }

    pub fn is_idle(&self) -> bool {
        self.session == TerminalSession::Idle
    }

    pub fn phase_name(&self) -> &'static str {
        match self.session {
            TerminalSession::Idle => "idle",
            TerminalSession::AwaitingLookup { .. } => "awaiting_lookup",
            TerminalSession::Energized { .. } => "energized",
        }
    }

    /// Identity and start time of the session being charged.
    pub fn active_session(&self) -> Option<(Block, Timestamp)> {
        match self.session {
            TerminalSession::Energized { id_a, t_1, .. } => Some((id_a, t_1)),
            _ => None,
        }
    }

    /// The pseudonym and nonce the terminal holds for the current session.
    pub fn pending(&self) -> Option<(Block, Nonce)> {
        match self.session {
            TerminalSession::Idle => None,
            TerminalSession::AwaitingLookup { m5, n_a }
            | TerminalSession::Energized { m5, n_a, .. } => Some((m5, n_a)),
        }
    }

    fn order_violation(&self, operation: &'static str) -> ProtocolError {
        ProtocolError::ProtocolOrderViolation {
            operation,
            phase: self.phase_name(),
        }
    }

    /// M4 = D(M3, k_g), M5 = M4 ⊕ N_a. Only MAC-valid requests reach the
    /// server.
    pub fn handle_auth_request(
        &mut self,
        msg: &AuthRequest,
    ) -> Result<AuthDecision, ProtocolError> {
        if self.session != TerminalSession::Idle {
            return Err(ProtocolError::Busy);
        }
        if !self
            .mac_check
            .accepts(&msg.mac_input(), &msg.mac, &self.k_g)
        {
            return Ok(AuthDecision::Rejected);
        }
        let m4 = decrypt_block(&msg.m3, &self.k_g);
        let m5 = xor_combine(&m4, &msg.n_a.into());
        self.session = TerminalSession::AwaitingLookup { n_a: msg.n_a, m5 };
        Ok(AuthDecision::Forward(LookupRequest { m5, n_a: msg.n_a }))
    }

    /// On success, reads t_1, switches energy on and wraps
    /// M8 = E(E(t_1 ⊕ N_t, k_a), k_g).
    pub fn handle_lookup_response(
        &mut self,
        resp: &LookupResponse,
    ) -> Result<LookupDecision, ProtocolError> {
        let TerminalSession::AwaitingLookup { n_a, m5 } = self.session else {
            return Err(self.order_violation("handle_lookup_response"));
        };
        let (id_a, k_a) = match *resp {
            LookupResponse::Success { id_a, k_a } => (id_a, k_a),
            LookupResponse::NotFound => {
                self.session = TerminalSession::Idle;
                return Ok(LookupDecision::Abort(AbortReason::NotFound));
            }
            LookupResponse::ReplayDetected => {
                self.session = TerminalSession::Idle;
                return Ok(LookupDecision::Abort(AbortReason::ReplayDetected));
            }
        };
        let t_1 = self.clock.now();
        let n_t = self.prng.draw_nonce();
        let m6 = xor_combine(&t_1.to_block(), &n_t.into());
        let m7 = encrypt_block(&m6, &k_a);
        let m8 = encrypt_block(&m7, &self.k_g);
        let mut msg = ChallengeMessage {
            m8,
            mac: MacTag::ZERO,
            n_t,
        };
        msg.mac = compute_mac(&msg.mac_input(), &self.k_g).expect("mac input is 32 bytes");
        self.session = TerminalSession::Energized {
            n_a,
            m5,
            id_a,
            k_a,
            t_1,
        };
        Ok(LookupDecision::Challenge(msg))
    }

    /// Switches energy off and produces the (ID_a, t_1, t_5) report.
    pub fn on_session_end(&mut self) -> Result<SessionReport, ProtocolError> {
        let TerminalSession::Energized { id_a, t_1, .. } = self.session else {
            return Err(self.order_violation("on_session_end"));
        };
        let t_5 = self.clock.now().max(t_1);
        self.session = TerminalSession::Idle;
        Ok(SessionReport {
            id_a,
            t_start: t_1,
            t_end: t_5,
        })
    }
}
