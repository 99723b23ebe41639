//! Wire protocol and inference server for streaming pose estimation.
//!
//! The byte layout of every message is described in `docs/protocol.md`.

pub mod buffer;
pub mod client;
pub mod envelope;
pub mod payload;
pub mod registry;
pub mod server;

pub use buffer::FrameBuffer;
pub use client::{session_id, Client, ClientError, RenderSubscriber};
pub use envelope::{decode, decode_prefix, Envelope, Kind, ProtocolError, SessionId, HEADER_LEN};
pub use registry::{ModelRegistry, PipelineFactory, RegistryError};
pub use server::{serve, ServeError, ServerHandle, ServerOptions, ServerStats};
