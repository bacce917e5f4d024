//! Mutual authentication, charging and billing protocol for street-side
//! electric vehicle charging terminals.
//!
//! A vehicle, a terminal and a registry server run the protocol as explicit
//! state machines. The vehicle-terminal radio link runs through
//! [`channel::Channel`], where a scripted attacker can read, block, modify,
//! replay or inject frames, and every event lands in a deterministic
//! transcript. [`scenario`] drives whole runs from text files and checks
//! the security properties against the transcript.

pub mod channel;
pub mod clock;
pub mod crypto;
pub mod error;
pub mod messages;
pub mod registry;
pub mod report;
pub mod scenario;
pub mod suite;
pub mod terminal;
pub mod vehicle;

pub use crypto::{Block, MacTag, Nonce, PrngState, SecretKey, Timestamp};
pub use error::ProtocolError;
pub use messages::{decode, encode, MessageKind, ProtocolMessage};
pub use registry::{Invoice, Registry, Tariff, VehicleRecord};
pub use terminal::TerminalAgent;
pub use vehicle::{VehicleIdentity, VehicleSession};

/// Whether agents verify incoming MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MacCheck {
    #[default]
    Enforce,
    /// Accept every tag. Only present in `negative-control` builds.
    #[cfg(feature = "negative-control")]
    Skip,
}

impl MacCheck {
    pub fn accepts(self, message: &[u8], tag: &MacTag, key: &SecretKey) -> bool {
        match self {
            MacCheck::Enforce => crypto::verify_mac(message, tag, key),
            #[cfg(feature = "negative-control")]
            MacCheck::Skip => true,
        }
    }
}
