//! One-shot federated round: broadcast, parallel client adapter training
//! and upload, hierarchical merge at the server, merged-model return.
//!
//! Frames are `tag: u32 LE`, `len: u64 LE`, then `len` payload bytes.
//! Model and adapter payloads are FULM-v1 containers; `Ack` and `Error`
//! carry JSON `{code, detail}`.

pub mod message;
pub mod round;
pub mod simulation;
pub mod transport;

pub use message::{decode_message, encode_message, read_message, MessageTag, ProtocolMessage, Status};
pub use round::{
    run_client, run_round, serve_round, AdapterTask, ClientJob, RetentionMode, RoundConfig, RoundReport,
    ServerRetention, TransportKind,
};
pub use simulation::{AdapterSpec, ClientSpec, DataSelection, Simulation, SimulationSpec};
pub use transport::{accept_all, channel_pair, ChannelConnection, Connection, TcpConnection};
