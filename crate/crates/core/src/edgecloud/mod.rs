//! Edge-cloud cooperation: the wire protocol, a discrete-event simulator of
//! both deployment paths, and live edge and cloud nodes over TCP.

mod live;
mod protocol;
mod sim;

use thiserror::Error;

pub use live::{
    run_cloud, run_edge, serve_cloud, CloudConfig, CloudReport, EdgeConfig, EdgeNode, EdgeReport, FramePayload,
    PushOutcome,
};
pub use protocol::{
    decode_message, decode_prefix, encode_message, read_message, write_message, Message, MessageType, ProtocolError,
    HEADER_LEN, MAGIC, MIN_FRAME_LEN, TRAILER_LEN,
};
pub use sim::{
    crossover, delay_curve, run_sim, EdgeMode, EdgeNodeState, EdgeParams, EventKind, FrameDelay, LatencyProfile,
    NetworkModel, Node, PathKind, Scenario, SimSummary, SimTrace, TraceEvent,
};

#[derive(Debug, Error)]
pub enum EdgeCloudError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("malformed {kind} payload: {reason}")]
    Payload { kind: MessageType, reason: String },
    #[error("unexpected {0} message")]
    Unexpected(MessageType),
    #[error("peer gave up after {0} connection attempts")]
    Unreachable(usize),
    #[error(transparent)]
    Weights(#[from] crate::netdef::WeightsError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
