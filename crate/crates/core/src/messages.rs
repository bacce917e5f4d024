//! Wire messages and their fixed-width framing.
//!
//! Every frame is a one-byte type tag followed by the fields in declaration
//! order. Integers are big-endian. Lengths are fixed per tag:
//!
//! | tag  | message           | length |
//! |------|-------------------|--------|
//! | 0x01 | `AuthRequest`     | 49     |
//! | 0x02 | `LookupRequest`   | 33     |
//! | 0x03 | `LookupResponse`  | 34 on success, 2 otherwise |
//! | 0x04 | `ChallengeMessage`| 49     |
//! | 0x05 | `SessionReport`   | 33     |

use serde::{Deserialize, Serialize};

use crate::crypto::{Block, MacTag, Nonce, SecretKey, Timestamp, BLOCK_LEN};

pub const TAG_AUTH_REQUEST: u8 = 0x01;
pub const TAG_LOOKUP_REQUEST: u8 = 0x02;
pub const TAG_LOOKUP_RESPONSE: u8 = 0x03;
pub const TAG_CHALLENGE: u8 = 0x04;
pub const TAG_SESSION_REPORT: u8 = 0x05;

pub const AUTH_REQUEST_LEN: usize = 1 + 3 * BLOCK_LEN;
pub const LOOKUP_REQUEST_LEN: usize = 1 + 2 * BLOCK_LEN;
pub const CHALLENGE_LEN: usize = 1 + 3 * BLOCK_LEN;
pub const SESSION_REPORT_LEN: usize = 1 + BLOCK_LEN + 8 + 8;

const OUTCOME_SUCCESS: u8 = 0;
const OUTCOME_NOT_FOUND: u8 = 1;
const OUTCOME_REPLAY: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed message: {0}")]
pub struct MalformedMessage(pub String);

/// Vehicle to terminal: M3, MAC, N_a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthRequest {
    pub m3: Block,
    pub mac: MacTag,
    pub n_a: Nonce,
}

impl AuthRequest {
    /// The bytes the MAC covers: M3 followed by N_a.
    pub fn mac_input(&self) -> [u8; 2 * BLOCK_LEN] {
        concat_blocks(&self.m3.0, &self.n_a.0)
    }
}

/// Terminal to server over the trusted link: M5, N_a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupRequest {
    pub m5: Block,
    pub n_a: Nonce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum LookupResponse {
    Success { id_a: Block, k_a: SecretKey },
    NotFound,
    ReplayDetected,
}

/// Terminal to vehicle: M8, MAC, N_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChallengeMessage {
    pub m8: Block,
    pub mac: MacTag,
    pub n_t: Nonce,
}

impl ChallengeMessage {
    pub fn mac_input(&self) -> [u8; 2 * BLOCK_LEN] {
        concat_blocks(&self.m8.0, &self.n_t.0)
    }
}

/// Terminal to server after the energy flow stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub id_a: Block,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolMessage {
    AuthRequest(AuthRequest),
    LookupRequest(LookupRequest),
    LookupResponse(LookupResponse),
    Challenge(ChallengeMessage),
    SessionReport(SessionReport),
}

/// Message kind, used for transcript labels and adversary rule matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    AuthRequest,
    LookupRequest,
    LookupResponse,
    Challenge,
    SessionReport,
    /// Bytes that do not decode.
    Raw,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::AuthRequest => "auth_request",
            MessageKind::LookupRequest => "lookup_request",
            MessageKind::LookupResponse => "lookup_response",
            MessageKind::Challenge => "challenge",
            MessageKind::SessionReport => "session_report",
            MessageKind::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<MessageKind> {
        Some(match s {
            "auth_request" => MessageKind::AuthRequest,
            "lookup_request" => MessageKind::LookupRequest,
            "lookup_response" => MessageKind::LookupResponse,
            "challenge" => MessageKind::Challenge,
            "session_report" => MessageKind::SessionReport,
            "raw" => MessageKind::Raw,
            _ => return None,
        })
    }

    /// Classifies arbitrary bytes; anything that fails to decode is `Raw`.
    pub fn of_bytes(bytes: &[u8]) -> MessageKind {
        decode(bytes).map_or(MessageKind::Raw, |m| m.kind())
    }
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ProtocolMessage::AuthRequest(_) => MessageKind::AuthRequest,
            ProtocolMessage::LookupRequest(_) => MessageKind::LookupRequest,
            ProtocolMessage::LookupResponse(_) => MessageKind::LookupResponse,
            ProtocolMessage::Challenge(_) => MessageKind::Challenge,
            ProtocolMessage::SessionReport(_) => MessageKind::SessionReport,
        }
    }
}

fn concat_blocks(a: &[u8; BLOCK_LEN], b: &[u8; BLOCK_LEN]) -> [u8; 2 * BLOCK_LEN] {
    let mut out = [0u8; 2 * BLOCK_LEN];
    out[..BLOCK_LEN].copy_from_slice(a);
    out[BLOCK_LEN..].copy_from_slice(b);
    out
}

pub fn encode(message: &ProtocolMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(AUTH_REQUEST_LEN);
    match message {
        ProtocolMessage::AuthRequest(m) => {
            out.push(TAG_AUTH_REQUEST);
            out.extend_from_slice(&m.m3.0);
            out.extend_from_slice(&m.mac.0);
            out.extend_from_slice(&m.n_a.0);
        }
        ProtocolMessage::LookupRequest(m) => {
            out.push(TAG_LOOKUP_REQUEST);
            out.extend_from_slice(&m.m5.0);
            out.extend_from_slice(&m.n_a.0);
        }
        ProtocolMessage::LookupResponse(r) => {
            out.push(TAG_LOOKUP_RESPONSE);
            match r {
                LookupResponse::Success { id_a, k_a } => {
                    out.push(OUTCOME_SUCCESS);
                    out.extend_from_slice(&id_a.0);
                    out.extend_from_slice(&k_a.0);
                }
                LookupResponse::NotFound => out.push(OUTCOME_NOT_FOUND),
                LookupResponse::ReplayDetected => out.push(OUTCOME_REPLAY),
            }
        }
        ProtocolMessage::Challenge(m) => {
            out.push(TAG_CHALLENGE);
            out.extend_from_slice(&m.m8.0);
            out.extend_from_slice(&m.mac.0);
            out.extend_from_slice(&m.n_t.0);
        }
        ProtocolMessage::SessionReport(r) => {
            out.push(TAG_SESSION_REPORT);
            out.extend_from_slice(&r.id_a.0);
            out.extend_from_slice(&r.t_start.0.to_be_bytes());
            out.extend_from_slice(&r.t_end.0.to_be_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn block(&mut self) -> [u8; BLOCK_LEN] {
        let (head, rest) = self.bytes.split_at(BLOCK_LEN);
        self.bytes = rest;
        head.try_into().expect("length checked before reading")
    }

    fn u64(&mut self) -> u64 {
        let (head, rest) = self.bytes.split_at(8);
        self.bytes = rest;
        u64::from_be_bytes(head.try_into().expect("length checked before reading"))
    }
}

fn expect_len(bytes: &[u8], want: usize, what: &str) -> Result<(), MalformedMessage> {
    if bytes.len() != want {
        return Err(MalformedMessage(format!(
            "{what} must be {want} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, MalformedMessage> {
    let Some((&tag, body)) = bytes.split_first() else {
        return Err(MalformedMessage("empty frame".into()));
    };
    let mut r = Reader { bytes: body };
    let msg = match tag {
        TAG_AUTH_REQUEST => {
            expect_len(bytes, AUTH_REQUEST_LEN, "auth_request")?;
            ProtocolMessage::AuthRequest(AuthRequest {
                m3: Block(r.block()),
                mac: MacTag(r.block()),
                n_a: Nonce(r.block()),
            })
        }
        TAG_LOOKUP_REQUEST => {
            expect_len(bytes, LOOKUP_REQUEST_LEN, "lookup_request")?;
            ProtocolMessage::LookupRequest(LookupRequest {
                m5: Block(r.block()),
                n_a: Nonce(r.block()),
            })
        }
        TAG_LOOKUP_RESPONSE => {
            let outcome = body
                .first()
                .ok_or_else(|| MalformedMessage("lookup_response missing outcome".into()))?;
            let resp = match *outcome {
                OUTCOME_SUCCESS => {
                    expect_len(bytes, 2 + 2 * BLOCK_LEN, "lookup_response success")?;
                    r.bytes = &body[1..];
                    LookupResponse::Success {
                        id_a: Block(r.block()),
                        k_a: SecretKey(r.block()),
                    }
                }
                OUTCOME_NOT_FOUND => {
                    expect_len(bytes, 2, "lookup_response not_found")?;
                    LookupResponse::NotFound
                }
                OUTCOME_REPLAY => {
                    expect_len(bytes, 2, "lookup_response replay_detected")?;
                    LookupResponse::ReplayDetected
                }
                other => {
                    return Err(MalformedMessage(format!(
                        "unknown lookup outcome {other:#04x}"
                    )))
                }
            };
            ProtocolMessage::LookupResponse(resp)
        }
        TAG_CHALLENGE => {
            expect_len(bytes, CHALLENGE_LEN, "challenge")?;
            ProtocolMessage::Challenge(ChallengeMessage {
                m8: Block(r.block()),
                mac: MacTag(r.block()),
                n_t: Nonce(r.block()),
            })
        }
        TAG_SESSION_REPORT => {
            expect_len(bytes, SESSION_REPORT_LEN, "session_report")?;
            ProtocolMessage::SessionReport(SessionReport {
                id_a: Block(r.block()),
                t_start: Timestamp(r.u64()),
                t_end: Timestamp(r.u64()),
            })
        }
        other => return Err(MalformedMessage(format!("unknown tag {other:#04x}"))),
    };
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_auth() -> AuthRequest {
        AuthRequest {
            m3: Block::from_hex("169c0e7078981c7313eb82d8fbcba74e").unwrap(),
            mac: MacTag::from_hex("53d632dcd7b8126de0e8a78af07325be").unwrap(),
            n_a: Nonce::from_hex("000000000080004300000000018000c7").unwrap(),
        }
    }

    const GOLDEN_AUTH: &str = "01169c0e7078981c7313eb82d8fbcba74e\
53d632dcd7b8126de0e8a78af07325be000000000080004300000000018000c7";

    #[test]
    fn zero_auth_request() {
        let m = ProtocolMessage::AuthRequest(AuthRequest {
            m3: Block::ZERO,
            mac: MacTag::ZERO,
            n_a: Nonce::ZERO,
        });
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 49);
        assert_eq!(bytes[0], TAG_AUTH_REQUEST);
        assert!(bytes[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn golden_auth_request() {
        let bytes = encode(&ProtocolMessage::AuthRequest(sample_auth()));
        assert_eq!(hex::encode(&bytes), GOLDEN_AUTH);
        assert_eq!(
            decode(&bytes).unwrap(),
            ProtocolMessage::AuthRequest(sample_auth())
        );
    }

    #[test]
    fn fixed_lengths() {
        let lookup = ProtocolMessage::LookupRequest(LookupRequest {
            m5: Block([1; 16]),
            n_a: Nonce([2; 16]),
        });
        assert_eq!(encode(&lookup).len(), 33);
        let chal = ProtocolMessage::Challenge(ChallengeMessage {
            m8: Block([1; 16]),
            mac: MacTag([2; 16]),
            n_t: Nonce([3; 16]),
        });
        assert_eq!(encode(&chal).len(), 49);
        let report = ProtocolMessage::SessionReport(SessionReport {
            id_a: Block([1; 16]),
            t_start: Timestamp(1000),
            t_end: Timestamp(61_000),
        });
        assert_eq!(encode(&report).len(), 33);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(&[]).is_err());
        let golden = hex::decode(GOLDEN_AUTH).unwrap();
        assert!(decode(&golden[..golden.len() - 1]).is_err());
        let mut longer = golden.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        assert!(decode(&[0x7f; 49]).is_err());
        assert!(decode(&[TAG_LOOKUP_RESPONSE]).is_err());
        assert!(decode(&[TAG_LOOKUP_RESPONSE, 9]).is_err());
        assert!(decode(&[TAG_LOOKUP_RESPONSE, OUTCOME_SUCCESS]).is_err());
    }

    #[test]
    fn kind_of_raw_bytes() {
        assert_eq!(MessageKind::of_bytes(&[1, 2, 3]), MessageKind::Raw);
        let golden = hex::decode(GOLDEN_AUTH).unwrap();
        assert_eq!(MessageKind::of_bytes(&golden), MessageKind::AuthRequest);
        for k in [
            MessageKind::AuthRequest,
            MessageKind::Challenge,
            MessageKind::Raw,
        ] {
            assert_eq!(MessageKind::parse(k.as_str()), Some(k));
        }
    }

    fn arb_block() -> impl Strategy<Value = [u8; 16]> {
        any::<[u8; 16]>()
    }

    fn arb_message() -> impl Strategy<Value = ProtocolMessage> {
        prop_oneof![
            (arb_block(), arb_block(), arb_block()).prop_map(|(a, b, c)| {
                ProtocolMessage::AuthRequest(AuthRequest {
                    m3: Block(a),
                    mac: MacTag(b),
                    n_a: Nonce(c),
                })
            }),
            (arb_block(), arb_block()).prop_map(|(a, b)| {
                ProtocolMessage::LookupRequest(LookupRequest {
                    m5: Block(a),
                    n_a: Nonce(b),
                })
            }),
            (arb_block(), arb_block()).prop_map(|(a, b)| {
                ProtocolMessage::LookupResponse(LookupResponse::Success {
                    id_a: Block(a),
                    k_a: SecretKey(b),
                })
            }),
            Just(ProtocolMessage::LookupResponse(LookupResponse::NotFound)),
            Just(ProtocolMessage::LookupResponse(
                LookupResponse::ReplayDetected
            )),
            (arb_block(), arb_block(), arb_block()).prop_map(|(a, b, c)| {
                ProtocolMessage::Challenge(ChallengeMessage {
                    m8: Block(a),
                    mac: MacTag(b),
                    n_t: Nonce(c),
                })
            }),
            (arb_block(), any::<u64>(), any::<u64>()).prop_map(|(a, s, e)| {
                ProtocolMessage::SessionReport(SessionReport {
                    id_a: Block(a),
                    t_start: Timestamp(s),
                    t_end: Timestamp(e),
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn encode_then_decode(m in arb_message()) {
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }

        #[test]
        fn decode_then_encode(tag in 1u8..=5, body in proptest::collection::vec(any::<u8>(), 48)) {
            let len = match tag {
                TAG_AUTH_REQUEST | TAG_CHALLENGE => 48,
                _ => 32,
            };
            let mut bytes = vec![tag];
            bytes.extend_from_slice(&body[..len]);
            if tag == TAG_LOOKUP_RESPONSE {
                bytes[1] = OUTCOME_SUCCESS;
                bytes.push(body[47]);
            }
            let m = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&m), bytes);
        }
    }

    #[test]
    fn fuzz_never_panics() {
        let mut prng = crate::crypto::PrngState::new(99, 100).unwrap();
        for _ in 0..10_000 {
            let len = (prng.next_u64() % 64) as usize;
            let mut bytes = vec![0u8; len];
            for b in bytes.iter_mut() {
                *b = prng.next_u64() as u8;
            }
            if len > 0 && prng.next_u64().is_multiple_of(2) {
                bytes[0] = (prng.next_u64() % 6) as u8;
            }
            if let Ok(m) = decode(&bytes) {
                assert_eq!(encode(&m), bytes);
            }
        }
    }
}
