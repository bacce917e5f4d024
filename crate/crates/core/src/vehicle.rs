//! Vehicle side of the protocol: builds the authentication request, checks
//! the terminal's time-bound challenge and measures the charging duration.

use std::sync::Arc;

use crate::clock::Clock;
use crate::crypto::compute_mac;
use crate::crypto::{
    decrypt_block, encrypt_block, xor_combine, Block, Nonce, PrngState, SecretKey, Timestamp,
};
use crate::error::ProtocolError;
use crate::messages::{AuthRequest, ChallengeMessage};
use crate::MacCheck;

/// Credentials provisioned into the vehicle ahead of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VehicleIdentity {
    pub id_a: Block,
    pub k_a: SecretKey,
    pub k_g: SecretKey,
}

impl VehicleIdentity {
    /// E(ID_a, k_a), the value the server indexes the vehicle under.
    pub fn pseudonym(&self) -> Block {
        encrypt_block(&self.id_a, &self.k_a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    BadMac,
    /// The recovered timestamp had nonzero padding bits.
    BadTimestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehiclePhase {
    Idle,
    AwaitingChallenge {
        n_a: Nonce,
    },
    Charging {
        n_a: Nonce,
        t_2: Timestamp,
    },
    Completed {
        n_a: Nonce,
        t_2: Timestamp,
        t_3: Timestamp,
        duration_ms: u64,
        /// Vehicle clock read earlier than the terminal's start time.
        clock_skew: bool,
    },
    Failed {
        n_a: Nonce,
        reason: FailureReason,
    },
}

impl VehiclePhase {
    pub fn name(&self) -> &'static str {
        match self {
            VehiclePhase::Idle => "idle",
            VehiclePhase::AwaitingChallenge { .. } => "awaiting_challenge",
            VehiclePhase::Charging { .. } => "charging",
            VehiclePhase::Completed { .. } => "completed",
            VehiclePhase::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengeOutcome {
    Accepted { t_2: Timestamp },
    Rejected(FailureReason),
}

pub struct VehicleSession {
    phase: VehiclePhase,
    prng: PrngState,
    clock: Arc<dyn Clock>,
    mac_check: MacCheck,
}

impl VehicleSession {
    pub fn new(prng: PrngState, clock: Arc<dyn Clock>) -> Self {
        VehicleSession {
            phase: VehiclePhase::Idle,
            prng,
            clock,
            mac_check: MacCheck::Enforce,
        }
    }

    pub fn with_mac_check(mut self, mac_check: MacCheck) -> Self {
        self.mac_check = mac_check;
        self
    }

    pub fn phase(&self) -> &VehiclePhase {
        &self.phase
    }

    pub fn prng(&self) -> PrngState {
        self.prng
    }

    /// Charging duration shown to the owner, once the session completed.
    pub fn duration_ms(&self) -> Option<u64> {
        match self.phase {
            VehiclePhase::Completed { duration_ms, .. } => Some(duration_ms),
            _ => None,
        }
    }

    fn order_violation(&self, operation: &'static str) -> ProtocolError {
        ProtocolError::ProtocolOrderViolation {
            operation,
            phase: self.phase.name(),
        }
    }

    /// Draws N_a and builds M3 = E(E(ID_a, k_a) ⊕ N_a, k_g) with its MAC.
    pub fn begin_auth(&mut self, identity: &VehicleIdentity) -> Result<AuthRequest, ProtocolError> {
        if self.phase != VehiclePhase::Idle {
            return Err(self.order_violation("begin_auth"));
        }
        let n_a = self.prng.draw_nonce();
        let m1 = encrypt_block(&identity.id_a, &identity.k_a);
        let m2 = xor_combine(&m1, &n_a.into());
        let m3 = encrypt_block(&m2, &identity.k_g);
        let mut req = AuthRequest {
            m3,
            mac: Default::default(),
            n_a,
        };
        req.mac = compute_mac(&req.mac_input(), &identity.k_g).expect("mac input is 32 bytes");
        self.phase = VehiclePhase::AwaitingChallenge { n_a };
        Ok(req)
    }

    /// Verifies the challenge MAC, unwraps M8 under k_g then k_a and recovers
    /// the terminal's start time t_2 = M10 ⊕ N_t.
    pub fn handle_challenge(
        &mut self,
        identity: &VehicleIdentity,
        msg: &ChallengeMessage,
    ) -> Result<ChallengeOutcome, ProtocolError> {
        let VehiclePhase::AwaitingChallenge { n_a } = self.phase else {
            return Err(self.order_violation("handle_challenge"));
        };
        if !self
            .mac_check
            .accepts(&msg.mac_input(), &msg.mac, &identity.k_g)
        {
            self.phase = VehiclePhase::Failed {
                n_a,
                reason: FailureReason::BadMac,
            };
            return Ok(ChallengeOutcome::Rejected(FailureReason::BadMac));
        }
        let m9 = decrypt_block(&msg.m8, &identity.k_g);
        let m10 = decrypt_block(&m9, &identity.k_a);
        match Timestamp::from_block(&xor_combine(&m10, &msg.n_t.into())) {
            Some(t_2) => {
                self.phase = VehiclePhase::Charging { n_a, t_2 };
                Ok(ChallengeOutcome::Accepted { t_2 })
            }
            None => {
                self.phase = VehiclePhase::Failed {
                    n_a,
                    reason: FailureReason::BadTimestamp,
                };
                Ok(ChallengeOutcome::Rejected(FailureReason::BadTimestamp))
            }
        }
    }

    /// Energy stopped for whatever reason; t_4 = t_3 - t_2, floored at zero.
    pub fn on_energy_stop(&mut self) -> Result<u64, ProtocolError> {
        let VehiclePhase::Charging { n_a, t_2 } = self.phase else {
            return Err(self.order_violation("on_energy_stop"));
        };
        let t_3 = self.clock.now();
        let duration_ms = t_3.saturating_since(t_2);
        self.phase = VehiclePhase::Completed {
            n_a,
            t_2,
            t_3,
            duration_ms,
            clock_skew: t_3 < t_2,
        };
        Ok(duration_ms)
    }

    /// Returns to `Idle`, abandoning whatever session was in progress. A
    /// failed session is never retried automatically.
    pub fn reset(&mut self) {
        self.phase = VehiclePhase::Idle;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::crypto::MacTag;

    fn identity() -> VehicleIdentity {
        VehicleIdentity {
            id_a: Block([1; 16]),
            k_a: SecretKey([2; 16]),
            k_g: SecretKey([3; 16]),
        }
    }

    fn session(s0: u64, s1: u64, clock: &ManualClock) -> VehicleSession {
        VehicleSession::new(PrngState::new(s0, s1).unwrap(), Arc::new(clock.clone()))
    }

    // Honest challenge for t_1 = 1_700_000_000_000, terminal seed (3, 4),
    // from tests/oracle/protocol_oracle.py.
    fn oracle_challenge() -> ChallengeMessage {
        ChallengeMessage {
            m8: Block::from_hex("aeeca4a77cda0458e20df38737bd0831").unwrap(),
            mac: MacTag::from_hex("6da120088413b17695299be092acd62e").unwrap(),
            n_t: Nonce::from_hex("00000000018000c700000000038001cf").unwrap(),
        }
    }

    #[test]
    fn begin_auth_matches_oracle() {
        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        let req = v.begin_auth(&identity()).unwrap();
        assert_eq!(req.m3.to_hex(), "169c0e7078981c7313eb82d8fbcba74e");
        assert_eq!(req.mac.to_hex(), "53d632dcd7b8126de0e8a78af07325be");
        assert_eq!(req.n_a.to_hex(), "000000000080004300000000018000c7");
        assert_eq!(v.phase(), &VehiclePhase::AwaitingChallenge { n_a: req.n_a });
        assert_eq!(
            identity().pseudonym().to_hex(),
            "8f42c24bee6e63472b165aa941312f7c"
        );
    }

    #[test]
    fn different_seeds_different_requests() {
        let clock = ManualClock::default();
        let a = session(1, 2, &clock).begin_auth(&identity()).unwrap();
        let b = session(2, 1, &clock).begin_auth(&identity()).unwrap();
        assert_ne!(a.n_a, b.n_a);
        assert_ne!(a.m3, b.m3);
    }

    #[test]
    fn begin_twice_is_order_violation() {
        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        v.begin_auth(&identity()).unwrap();
        assert!(matches!(
            v.begin_auth(&identity()),
            Err(ProtocolError::ProtocolOrderViolation { .. })
        ));
    }

    #[test]
    fn honest_challenge_recovers_t1() {
        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        v.begin_auth(&identity()).unwrap();
        let out = v
            .handle_challenge(&identity(), &oracle_challenge())
            .unwrap();
        assert_eq!(
            out,
            ChallengeOutcome::Accepted {
                t_2: Timestamp(1_700_000_000_000)
            }
        );
        assert_eq!(v.phase().name(), "charging");
    }

    #[test]
    fn flipped_ciphertext_bit_fails() {
        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        v.begin_auth(&identity()).unwrap();
        let mut c = oracle_challenge();
        c.m8.0[5] ^= 0x10;
        assert_eq!(
            v.handle_challenge(&identity(), &c).unwrap(),
            ChallengeOutcome::Rejected(FailureReason::BadMac)
        );
        assert_eq!(v.phase().name(), "failed");
        // no automatic retry
        assert!(v
            .handle_challenge(&identity(), &oracle_challenge())
            .is_err());
        v.reset();
        assert_eq!(v.phase(), &VehiclePhase::Idle);
    }

    #[test]
    fn wrong_vehicle_key_fails_padding_check() {
        // Built with a different k_a but a valid group MAC: only the padding
        // check stands between this and a bogus t_2.
        let id = identity();
        let wrong = SecretKey([9; 16]);
        let n_t = Nonce([0x55; 16]);
        let m6 = xor_combine(&Timestamp(1_700_000_000_000).to_block(), &n_t.into());
        let m8 = encrypt_block(&encrypt_block(&m6, &wrong), &id.k_g);
        let mut c = ChallengeMessage {
            m8,
            mac: MacTag::ZERO,
            n_t,
        };
        c.mac = compute_mac(&c.mac_input(), &id.k_g).unwrap();

        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        v.begin_auth(&id).unwrap();
        assert_eq!(
            v.handle_challenge(&id, &c).unwrap(),
            ChallengeOutcome::Rejected(FailureReason::BadTimestamp)
        );
    }

    fn charging_at(t_2: u64, clock: &ManualClock) -> VehicleSession {
        let mut v = session(1, 2, clock);
        v.phase = VehiclePhase::Charging {
            n_a: Nonce::ZERO,
            t_2: Timestamp(t_2),
        };
        v
    }

    #[test]
    fn duration_is_t3_minus_t2() {
        let clock = ManualClock::new(Timestamp(61_000));
        let mut v = charging_at(1_000, &clock);
        assert_eq!(v.on_energy_stop().unwrap(), 60_000);
        assert_eq!(v.duration_ms(), Some(60_000));

        let clock = ManualClock::new(Timestamp(1_000));
        let mut v = charging_at(1_000, &clock);
        assert_eq!(v.on_energy_stop().unwrap(), 0);
    }

    #[test]
    fn skewed_clock_saturates_and_flags() {
        let clock = ManualClock::new(Timestamp(500));
        let mut v = charging_at(1_000, &clock);
        assert_eq!(v.on_energy_stop().unwrap(), 0);
        assert!(matches!(
            v.phase(),
            VehiclePhase::Completed {
                clock_skew: true,
                ..
            }
        ));
    }

    #[test]
    fn energy_stop_requires_charging() {
        let clock = ManualClock::default();
        let mut v = session(1, 2, &clock);
        assert!(v.on_energy_stop().is_err());
        assert_eq!(v.duration_ms(), None);
    }
}
