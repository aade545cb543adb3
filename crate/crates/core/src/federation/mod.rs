//! Synchronous federated averaging over TCP.
//!
//! An aggregator holds the global weights of both networks. Each round it
//! broadcasts them, every collaborator trains locally on its own images and
//! returns updated weights with its training-image count, and the aggregator
//! replaces the global weights with the count-weighted mean. Only weight
//! blobs cross the wire; no message type can carry image data.

mod aggregate;
mod aggregator;
mod collaborator;
mod frame;
mod session;

pub use aggregate::{aggregate, Contribution};
pub use aggregator::{Aggregator, AggregatorConfig, FederationOutcome};
pub use collaborator::{run_collaborator, CollaboratorConfig, LocalTrainer};
pub use frame::{read_message, write_message, Message, FRAME_HEADER_LEN, MAX_FRAME_LEN};
pub use session::{read_session, replay, Direction, ReplayOutcome, SessionRecord, SessionWriter, SESSION_MAGIC};

/// Message type bytes.
pub mod kind {
    pub const HELLO: u8 = 0x01;
    pub const ROUND_START: u8 = 0x02;
    pub const LOCAL_UPDATE: u8 = 0x03;
    pub const SHUTDOWN: u8 = 0x04;
    pub const ERROR: u8 = 0x7F;
}

/// Codes carried by ERROR frames.
pub mod code {
    pub const MALFORMED: u16 = 1;
    pub const UNKNOWN_TYPE: u16 = 2;
    pub const WRONG_ROUND: u16 = 3;
    pub const DUPLICATE_ID: u16 = 4;
    pub const SHAPE_MISMATCH: u16 = 5;
    pub const PEER_FAILED: u16 = 6;
    pub const UNEXPECTED: u16 = 7;
    pub const LOCAL_FAILURE: u16 = 8;
    pub const TIMEOUT: u16 = 9;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("update for round {got} during round {expected}")]
    WrongRound { expected: u32, got: u32 },
    #[error("duplicate collaborator id {0:?}")]
    DuplicateId(String),
    #[error("weight layout mismatch: {0}")]
    ShapeMismatch(String),
    #[error("peer failed: {0}")]
    PeerFailed(String),
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("local failure: {0}")]
    LocalFailure(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("peer reported error {code}: {detail}")]
    Remote { code: u16, detail: String },
}

impl ProtocolError {
    pub fn code(&self) -> u16 {
        match self {
            ProtocolError::Malformed(_) => code::MALFORMED,
            ProtocolError::UnknownType(_) => code::UNKNOWN_TYPE,
            ProtocolError::WrongRound { .. } => code::WRONG_ROUND,
            ProtocolError::DuplicateId(_) => code::DUPLICATE_ID,
            ProtocolError::ShapeMismatch(_) => code::SHAPE_MISMATCH,
            ProtocolError::PeerFailed(_) => code::PEER_FAILED,
            ProtocolError::Unexpected(_) => code::UNEXPECTED,
            ProtocolError::LocalFailure(_) => code::LOCAL_FAILURE,
            ProtocolError::Timeout(_) => code::TIMEOUT,
            ProtocolError::Remote { code, .. } => *code,
        }
    }

    /// The ERROR frame announcing this failure.
    pub fn to_message(&self) -> Message {
        Message::Error {
            code: self.code(),
            detail: self.to_string(),
        }
    }
}

/// Encodes each model as an MFLW blob.
pub fn encode_models(models: &[crate::ModelWeights<f32>]) -> Vec<Vec<u8>> {
    models.iter().map(crate::serialize::encode_weights).collect()
}

/// Decodes MFLW blobs; any corruption is a malformed frame.
pub fn decode_models(blobs: &[Vec<u8>]) -> Result<Vec<crate::ModelWeights<f32>>, ProtocolError> {
    blobs
        .iter()
        .enumerate()
        .map(|(i, b)| {
            crate::serialize::decode_weights(b).map_err(|e| ProtocolError::Malformed(format!("model blob {i}: {e}")))
        })
        .collect()
}
