//! Blocking client helpers for input and render connections.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use epvr_core::descriptor::MotionFrame;
use epvr_core::refine::KeypointFrame;
use thiserror::Error;

use crate::envelope::{read_envelope, write_envelope, Envelope, Kind, ProtocolError, ReadError, SessionId};
use crate::payload::{decode_error, decode_pose_result, encode_hmd, encode_keypoints, PoseMessage};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("server closed the connection")]
    Closed,
    #[error("unexpected {0:?} from server")]
    Unexpected(Kind),
}

impl From<ReadError> for ClientError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Io(e) => Self::Io(e),
            ReadError::Protocol(e) => Self::Protocol(e),
        }
    }
}

fn remote(env: &Envelope) -> ClientError {
    match decode_error(&env.payload) {
        Ok((code, message)) => ClientError::Remote { code, message },
        Err(e) => ClientError::Protocol(e),
    }
}

pub fn session_id(n: u128) -> SessionId {
    n.to_le_bytes()
}

fn recv_from(stream: &mut TcpStream) -> Result<Envelope, ClientError> {
    read_envelope(stream)?.ok_or(ClientError::Closed)
}

/// Input-side connection bound to one model and session.
pub struct Client {
    stream: TcpStream,
    session: SessionId,
    seq: u64,
}

impl Client {
    /// Connects and performs the HELLO handshake.
    pub fn connect(addr: impl ToSocketAddrs, model: &str, session: SessionId) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut client = Self { stream, session, seq: 0 };
        client.send(Kind::Hello, 0.0, model.as_bytes().to_vec())?;
        let reply = client.recv()?;
        match reply.kind {
            Kind::Hello => Ok(client),
            Kind::Error => Err(remote(&reply)),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> std::io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    pub fn send(&mut self, kind: Kind, timestamp: f64, payload: Vec<u8>) -> Result<u64, ClientError> {
        self.seq += 1;
        let env = Envelope::new(kind, self.session, self.seq, timestamp, payload);
        write_envelope(&mut self.stream, &env)?;
        Ok(self.seq)
    }

    pub fn send_hmd(&mut self, frame: &MotionFrame) -> Result<u64, ClientError> {
        self.send(Kind::HmdFrame, frame.timestamp(), encode_hmd(frame))
    }

    pub fn send_keypoints(&mut self, frame: &KeypointFrame) -> Result<u64, ClientError> {
        self.send(Kind::KeypointFrame, frame.timestamp, encode_keypoints(frame))
    }

    pub fn recv(&mut self) -> Result<Envelope, ClientError> {
        recv_from(&mut self.stream)
    }

    /// Next pose result; PONGs are skipped and ERROR becomes `Remote`.
    pub fn recv_pose(&mut self) -> Result<(Envelope, PoseMessage), ClientError> {
        loop {
            let env = self.recv()?;
            match env.kind {
                Kind::PoseResult => {
                    let msg = decode_pose_result(&env.payload)?;
                    return Ok((env, msg));
                }
                Kind::Pong => continue,
                Kind::Error => return Err(remote(&env)),
                other => return Err(ClientError::Unexpected(other)),
            }
        }
    }

    pub fn ping(&mut self, payload: &[u8]) -> Result<(), ClientError> {
        self.send(Kind::Ping, 0.0, payload.to_vec())?;
        Ok(())
    }

    pub fn close(self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

/// Receives every pose result of a session after subscribing.
pub struct RenderSubscriber {
    stream: TcpStream,
}

impl RenderSubscriber {
    pub fn connect(addr: impl ToSocketAddrs, session: SessionId) -> Result<Self, ClientError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        write_envelope(&mut stream, &Envelope::new(Kind::SubscribeRender, session, 1, 0.0, Vec::new()))?;
        let reply = recv_from(&mut stream)?;
        match reply.kind {
            Kind::SubscribeRender => Ok(Self { stream }),
            Kind::Error => Err(remote(&reply)),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> std::io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    /// Next raw envelope; `Closed` once the session ends.
    pub fn recv(&mut self) -> Result<Envelope, ClientError> {
        recv_from(&mut self.stream)
    }
}
