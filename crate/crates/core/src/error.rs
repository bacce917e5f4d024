use thiserror::Error;

/// Misuse of an agent's state machine. Cryptographic failures are not errors;
/// they show up as state transitions or rejections.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{operation} is not allowed in phase {phase}")]
    ProtocolOrderViolation {
        operation: &'static str,
        phase: &'static str,
    },
    #[error("terminal already has an active session")]
    Busy,
}
