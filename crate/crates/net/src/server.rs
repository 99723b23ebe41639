//! Multi-session inference server.
//!
//! Each input connection owns one pipeline session: a reader thread feeds
//! decoded sensor frames into a latest-wins buffer and a worker thread drains
//! it through the pipeline. Results go back to the input client and are
//! fanned out to render subscribers of the same session through bounded
//! per-subscriber queues, so a slow subscriber never stalls the worker.

use std::collections::HashMap;
use std::io::{ErrorKind, Read};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use epvr_core::descriptor::MotionFrame;
use epvr_core::pipeline::{Session, PAIRING_TOLERANCE};
use epvr_core::refine::KeypointFrame;
use log::{debug, info, warn};
use thiserror::Error;

use crate::buffer::FrameBuffer;
use crate::envelope::{read_envelope, write_envelope, Envelope, Kind, ProtocolError, ReadError, SessionId};
use crate::payload::{decode_hello, decode_hmd, decode_keypoints, encode_error, encode_pose_result, ErrorCode};
use crate::registry::{PipelineFactory, RegistryError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    /// How often blocked reads and waits check for shutdown.
    pub poll_interval: Duration,
    /// Results queued per render subscriber before it is disconnected.
    pub subscriber_backlog: usize,
    /// Keypoint and headset frames closer than this (seconds) are paired.
    pub pairing_tolerance: f64,
    pub write_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(50),
            subscriber_backlog: 64,
            pairing_tolerance: PAIRING_TOLERANCE,
            write_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub sessions_opened: AtomicU64,
    pub frames_received: AtomicU64,
    pub results_sent: AtomicU64,
    pub frames_dropped: AtomicU64,
    pub pipeline_errors: AtomicU64,
}

#[derive(Default)]
struct SessionHub {
    subscribers: Mutex<Vec<SyncSender<Arc<Vec<u8>>>>>,
}

struct Shared {
    factory: Arc<dyn PipelineFactory>,
    sessions: Mutex<HashMap<SessionId, Arc<SessionHub>>>,
    shutdown: AtomicBool,
    options: ServerOptions,
    stats: ServerStats,
}

impl Shared {
    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.shared.stats
    }

    pub fn active_sessions(&self) -> usize {
        self.shared.sessions.lock().map(|s| s.len()).unwrap_or(0)
    }

    /// Stops accepting, lets every session finish its pending frame, and
    /// waits for all connection threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve(
    addr: impl ToSocketAddrs + std::fmt::Debug,
    factory: Arc<dyn PipelineFactory>,
    options: ServerOptions,
) -> Result<ServerHandle, ServeError> {
    let bind_err = |source| ServeError::BindFailure { addr: format!("{addr:?}"), source };
    let listener = TcpListener::bind(&addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    let shared = Arc::new(Shared {
        factory,
        sessions: Mutex::new(HashMap::new()),
        shutdown: AtomicBool::new(false),
        options,
        stats: ServerStats::default(),
    });
    let accept = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name("epvr-accept".into())
            .spawn(move || accept_loop(listener, shared))
            .map_err(bind_err)?
    };
    info!("listening on {local}");
    Ok(ServerHandle { addr: local, shared, accept: Some(accept) })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut connections: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let shared = shared.clone();
                match std::thread::Builder::new().name(format!("epvr-conn-{peer}")).spawn(move || {
                    if let Err(e) = handle_connection(stream, &shared) {
                        debug!("connection {peer} closed: {e}");
                    }
                }) {
                    Ok(h) => connections.push(h),
                    Err(e) => warn!("cannot spawn connection thread: {e}"),
                }
                connections.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
    for h in connections {
        let _ = h.join();
    }
    info!("server stopped");
}

/// Retries timed-out reads until the server shuts down.
struct PollingReader<'a> {
    stream: &'a TcpStream,
    shared: &'a Shared,
}

impl Read for PollingReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        loop {
            match (&mut &*self.stream).read(buf) {
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if self.shared.stopping() {
                        return Err(std::io::Error::new(ErrorKind::ConnectionAborted, "server shutting down"));
                    }
                }
                r => return r,
            }
        }
    }
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, env: &Envelope) -> std::io::Result<()> {
    let mut s = writer.lock().unwrap_or_else(|e| e.into_inner());
    write_envelope(&mut *s, env)
}

fn send_error(writer: &Writer, session: SessionId, seq: u64, code: ErrorCode, message: &str) {
    let env = Envelope { kind: Kind::Error, session, seq, timestamp_us: 0, payload: encode_error(code, message) };
    if let Err(e) = send(writer, &env) {
        debug!("cannot deliver error to client: {e}");
    }
}

fn handle_connection(stream: TcpStream, shared: &Arc<Shared>) -> Result<(), ReadError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(shared.options.poll_interval))?;
    stream.set_write_timeout(Some(shared.options.write_timeout))?;
    stream.set_nodelay(true)?;
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = PollingReader { stream: &stream, shared };
    loop {
        let Some(env) = read_envelope(&mut reader)? else {
            return Ok(());
        };
        match env.kind {
            Kind::Ping => send(&writer, &Envelope { kind: Kind::Pong, ..env })?,
            Kind::Hello => return run_input_session(env, &mut reader, writer, shared),
            Kind::SubscribeRender => return run_subscriber(env, writer, shared),
            other => {
                send_error(&writer, env.session, 0, ErrorCode::UnexpectedMessage, &format!("{other:?} before HELLO"));
                return Ok(());
            }
        }
    }
}

fn run_subscriber(hello: Envelope, writer: Writer, shared: &Arc<Shared>) -> Result<(), ReadError> {
    let hub = shared.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(&hello.session).cloned();
    let Some(hub) = hub else {
        send_error(&writer, hello.session, 0, ErrorCode::UnknownSession, "no active session with this id");
        return Ok(());
    };
    let (tx, rx): (SyncSender<Arc<Vec<u8>>>, Receiver<Arc<Vec<u8>>>) =
        mpsc::sync_channel(shared.options.subscriber_backlog);
    // Acknowledge before registering so the ack precedes every result.
    send(&writer, &Envelope { payload: Vec::new(), ..hello })?;
    hub.subscribers.lock().unwrap_or_else(|e| e.into_inner()).push(tx);
    drop(hub);
    use std::io::Write;
    // Ends when the session drops its senders or the subscriber lags out.
    for bytes in rx {
        let mut s = writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = s.write_all(&bytes).and_then(|_| s.flush()) {
            debug!("render subscriber gone: {e}");
            break;
        }
    }
    Ok(())
}

struct PendingFrame {
    motion: MotionFrame,
    keypoints: Option<KeypointFrame>,
}

fn paired(k: &KeypointFrame, t: f64, tol: f64) -> bool {
    (k.timestamp - t).abs() <= tol
}

fn run_input_session(
    hello: Envelope,
    reader: &mut PollingReader<'_>,
    writer: Writer,
    shared: &Arc<Shared>,
) -> Result<(), ReadError> {
    let session_id = hello.session;
    let model = match decode_hello(&hello.payload) {
        Ok(m) => m,
        Err(e) => {
            send_error(&writer, session_id, 0, ErrorCode::Protocol, &e.to_string());
            return Ok(());
        }
    };
    if shared.stopping() {
        send_error(&writer, session_id, 0, ErrorCode::ShuttingDown, "server is shutting down");
        return Ok(());
    }
    let session = match shared.factory.create(&model) {
        Ok(s) => s,
        Err(e) => {
            let code = match e {
                RegistryError::UnknownModel(_) => ErrorCode::UnknownModel,
                _ => ErrorCode::Pipeline,
            };
            send_error(&writer, session_id, 0, code, &e.to_string());
            return Ok(());
        }
    };
    let hub = Arc::new(SessionHub::default());
    {
        let mut sessions = shared.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if sessions.contains_key(&session_id) {
            drop(sessions);
            send_error(&writer, session_id, 0, ErrorCode::UnexpectedMessage, "session id already in use");
            return Ok(());
        }
        sessions.insert(session_id, hub.clone());
    }
    shared.stats.sessions_opened.fetch_add(1, Ordering::Relaxed);
    info!("session {} opened with model {model:?}", hex(&session_id));
    send(&writer, &Envelope { kind: Kind::Hello, session: session_id, seq: 0, timestamp_us: 0, payload: model.into_bytes() })?;

    let buffer = Arc::new(FrameBuffer::<PendingFrame>::new());
    let worker = {
        let (buffer, writer, hub, shared) = (buffer.clone(), writer.clone(), hub.clone(), shared.clone());
        std::thread::Builder::new()
            .name(format!("epvr-worker-{}", hex(&session_id)))
            .spawn(move || worker_loop(session, session_id, &buffer, &writer, &hub, &shared))?
    };
    drop(hub);

    let outcome = reader_loop(session_id, reader, &writer, &buffer, shared);
    buffer.close();
    let _ = worker.join();
    shared.stats.frames_dropped.fetch_add(buffer.dropped(), Ordering::Relaxed);
    shared.sessions.lock().unwrap_or_else(|e| e.into_inner()).remove(&session_id);
    info!("session {} closed ({} frames dropped)", hex(&session_id), buffer.dropped());
    outcome
}

fn reader_loop(
    session_id: SessionId,
    reader: &mut PollingReader<'_>,
    writer: &Writer,
    buffer: &FrameBuffer<PendingFrame>,
    shared: &Shared,
) -> Result<(), ReadError> {
    let tol = shared.options.pairing_tolerance;
    let mut last_seq: Option<u64> = None;
    let mut latest_keypoints: Option<KeypointFrame> = None;
    loop {
        let env = match read_envelope(reader) {
            Ok(Some(env)) => env,
            Ok(None) => return Ok(()),
            // The frame was consumed whole, so the stream is still in sync.
            Err(ReadError::Protocol(e @ (ProtocolError::CrcMismatch { .. } | ProtocolError::UnknownKind(_)))) => {
                send_error(writer, session_id, 0, ErrorCode::Protocol, &e.to_string());
                continue;
            }
            Err(ReadError::Protocol(e)) => {
                send_error(writer, session_id, 0, ErrorCode::Protocol, &e.to_string());
                return Err(e.into());
            }
            Err(e) => return Err(e),
        };
        if env.session != session_id {
            send_error(writer, env.session, env.seq, ErrorCode::UnknownSession, "frame for another session");
            continue;
        }
        if matches!(env.kind, Kind::HmdFrame | Kind::KeypointFrame) {
            if last_seq.is_some_and(|s| env.seq <= s) {
                send_error(writer, session_id, env.seq, ErrorCode::Protocol, "sequence number did not increase");
                continue;
            }
            last_seq = Some(env.seq);
        }
        match env.kind {
            Kind::HmdFrame => match decode_hmd(&env.payload) {
                Ok(motion) => {
                    shared.stats.frames_received.fetch_add(1, Ordering::Relaxed);
                    let t = motion.timestamp();
                    let keypoints = latest_keypoints.as_ref().filter(|k| paired(k, t, tol)).cloned();
                    if keypoints.is_some() {
                        latest_keypoints = None;
                    }
                    buffer.push(PendingFrame { motion, keypoints });
                }
                Err(e) => send_error(writer, session_id, env.seq, ErrorCode::Protocol, &e.to_string()),
            },
            Kind::KeypointFrame => match decode_keypoints(&env.payload, env.timestamp()) {
                Ok(k) => {
                    // A late camera frame joins the headset frame still waiting.
                    let attached = buffer.update_pending(|p| {
                        if p.keypoints.is_none() && paired(&k, p.motion.timestamp(), tol) {
                            p.keypoints = Some(k.clone());
                            true
                        } else {
                            false
                        }
                    });
                    if attached != Some(true) {
                        latest_keypoints = Some(k);
                    }
                }
                Err(e) => send_error(writer, session_id, env.seq, ErrorCode::Protocol, &e.to_string()),
            },
            Kind::Ping => send(writer, &Envelope { kind: Kind::Pong, ..env })?,
            other => send_error(writer, session_id, env.seq, ErrorCode::UnexpectedMessage, &format!("{other:?} in session")),
        }
    }
}

fn worker_loop(
    mut session: Session,
    session_id: SessionId,
    buffer: &FrameBuffer<PendingFrame>,
    writer: &Writer,
    hub: &SessionHub,
    shared: &Shared,
) {
    let mut seq = 0u64;
    let mut client_alive = true;
    loop {
        let Some(frame) = buffer.wait_take(shared.options.poll_interval) else {
            if buffer.is_closed() && !buffer.has_pending() {
                break;
            }
            continue;
        };
        match session.process_frame(&frame.motion, frame.keypoints.as_ref()) {
            Ok(result) => {
                seq += 1;
                let env = Envelope::new(Kind::PoseResult, session_id, seq, result.timestamp, encode_pose_result(&result));
                let bytes = Arc::new(env.encode());
                if client_alive {
                    use std::io::Write;
                    let mut s = writer.lock().unwrap_or_else(|e| e.into_inner());
                    if let Err(e) = s.write_all(&bytes).and_then(|_| s.flush()) {
                        debug!("input client gone: {e}");
                        client_alive = false;
                    }
                }
                hub.subscribers.lock().unwrap_or_else(|e| e.into_inner()).retain(|tx| match tx.try_send(bytes.clone()) {
                    Ok(()) => true,
                    Err(TrySendError::Full(_)) => {
                        warn!("render subscriber of {} lagging; disconnecting", hex(&session_id));
                        false
                    }
                    Err(TrySendError::Disconnected(_)) => false,
                });
                shared.stats.results_sent.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                shared.stats.pipeline_errors.fetch_add(1, Ordering::Relaxed);
                warn!("session {}: {e}", hex(&session_id));
                if client_alive {
                    send_error(writer, session_id, seq, ErrorCode::Pipeline, &e.to_string());
                }
            }
        }
    }
    hub.subscribers.lock().unwrap_or_else(|e| e.into_inner()).clear();
}

fn hex(id: &SessionId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}
