//! Real stream transport and test fabric.
//!
//! [`Transport`] is the request/response boundary the server runtime sends
//! through: one in-flight request per connection, framed with the wire
//! header. [`TcpTransport`] talks to live servers; [`InMemoryMesh`] wires
//! runtimes together in-process with optional fault injection and a message
//! trace, so the same server logic drives tests and production alike.

use crate::net::message::{self, Message, HEADER_LEN, MAX_BODY_LEN};
use crate::token::HomeLocation;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect to {0} failed: {1}")]
    Connect(String, std::io::Error),
    #[error("request timed out")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] message::WireError),
}

impl TransportError {
    pub fn is_timeout(&self) -> bool {
        match self {
            TransportError::Timeout => true,
            TransportError::Io(e) => {
                matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                )
            }
            _ => false,
        }
    }
}

/// Sends one request and returns the peer's response.
pub trait Transport: Send + Sync {
    fn request(
        &self,
        from: &HomeLocation,
        to: &HomeLocation,
        msg: &Message,
    ) -> Result<Message, TransportError>;
}

/// Injectable time source; server logic never reads the wall clock itself.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Wall-clock milliseconds since process start.
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Arc<SystemClock> {
        Arc::new(SystemClock {
            origin: Instant::now(),
        })
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Hand-advanced clock for expiry and grace-period tests.
#[derive(Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: u64) -> Arc<ManualClock> {
        Arc::new(ManualClock {
            now: AtomicU64::new(start),
        })
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------
// framing

/// Writes one frame; the encoding already carries the length header.
pub fn write_frame(stream: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    let bytes = message::encode_message(msg);
    stream.write_all(&bytes)?;
    stream.flush()
}

/// Reads exactly one frame and decodes it. Never reads past the declared
/// body length.
pub fn read_frame(stream: &mut impl Read) -> Result<Message, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header)?;
    let body_len = u32::from_be_bytes(header[12..16].try_into().unwrap()) as usize;
    if body_len > MAX_BODY_LEN {
        return Err(TransportError::Protocol(
            message::WireError::LengthMismatch {
                declared: body_len,
                available: 0,
            },
        ));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + body_len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + body_len, 0);
    stream.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(message::decode_message(&frame)?)
}

/// TCP request/response client: one connection per request, bounded by a
/// timeout (default 5 s).
pub struct TcpTransport {
    timeout: Duration,
}

impl TcpTransport {
    pub fn new(timeout: Duration) -> Arc<TcpTransport> {
        Arc::new(TcpTransport { timeout })
    }

    pub fn default_timeout() -> Arc<TcpTransport> {
        Self::new(Duration::from_secs(5))
    }
}

impl Transport for TcpTransport {
    fn request(
        &self,
        _from: &HomeLocation,
        to: &HomeLocation,
        msg: &Message,
    ) -> Result<Message, TransportError> {
        let target = format!("{}:{}", to.host(), to.port());
        let addr = target
            .to_socket_addrs()
            .map_err(|e| TransportError::Connect(target.clone(), e))?
            .next()
            .ok_or_else(|| {
                TransportError::Connect(
                    target.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no address"),
                )
            })?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)
            .map_err(|e| TransportError::Connect(target, e))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        write_frame(&mut stream, msg)?;
        match read_frame(&mut stream) {
            Err(e) if e.is_timeout() => Err(TransportError::Timeout),
            other => other,
        }
    }
}

// ---------------------------------------------------------------------
// in-memory mesh

/// One delivered message in the mesh trace.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub at_ms: u64,
    pub from: HomeLocation,
    pub to: HomeLocation,
    pub type_byte: u8,
    pub token_prefix: String,
}

impl TraceEntry {
    pub fn type_name(&self) -> &'static str {
        message::type_name(self.type_byte)
    }
}

type Responder = dyn Fn(&Message) -> Message + Send + Sync;
type Corruptor = dyn Fn(&mut Message) + Send + Sync;

#[derive(Default)]
struct MeshState {
    handlers: std::collections::HashMap<HomeLocation, Arc<Responder>>,
    drops: std::collections::HashSet<(HomeLocation, HomeLocation)>,
    corrupt: std::collections::HashMap<(HomeLocation, HomeLocation), Arc<Corruptor>>,
    corrupt_reply: std::collections::HashMap<(HomeLocation, HomeLocation), Arc<Corruptor>>,
    trace: Vec<TraceEntry>,
}

/// Synchronous in-process fabric connecting server runtimes, with link
/// fault injection and a full message trace.
pub struct InMemoryMesh {
    state: Mutex<MeshState>,
    origin: Instant,
}

impl InMemoryMesh {
    pub fn new() -> Arc<InMemoryMesh> {
        Arc::new(InMemoryMesh {
            state: Mutex::new(MeshState::default()),
            origin: Instant::now(),
        })
    }

    /// Registers the remote-channel handler for a server address.
    pub fn register(
        &self,
        addr: HomeLocation,
        handler: impl Fn(&Message) -> Message + Send + Sync + 'static,
    ) {
        self.state
            .lock()
            .unwrap()
            .handlers
            .insert(addr, Arc::new(handler));
    }

    pub fn unregister(&self, addr: &HomeLocation) {
        self.state.lock().unwrap().handlers.remove(addr);
    }

    /// Drops every message on the directed link.
    pub fn set_drop(&self, from: HomeLocation, to: HomeLocation, dropped: bool) {
        let mut st = self.state.lock().unwrap();
        if dropped {
            st.drops.insert((from, to));
        } else {
            st.drops.remove(&(from, to));
        }
    }

    /// Mutates requests in flight on the directed link.
    pub fn set_corrupt(
        &self,
        from: HomeLocation,
        to: HomeLocation,
        f: impl Fn(&mut Message) + Send + Sync + 'static,
    ) {
        self.state
            .lock()
            .unwrap()
            .corrupt
            .insert((from, to), Arc::new(f));
    }

    /// Mutates replies flowing back over the directed link (requester, responder).
    pub fn set_corrupt_reply(
        &self,
        requester: HomeLocation,
        responder: HomeLocation,
        f: impl Fn(&mut Message) + Send + Sync + 'static,
    ) {
        self.state
            .lock()
            .unwrap()
            .corrupt_reply
            .insert((requester, responder), Arc::new(f));
    }

    pub fn clear_faults(&self) {
        let mut st = self.state.lock().unwrap();
        st.drops.clear();
        st.corrupt.clear();
        st.corrupt_reply.clear();
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.state.lock().unwrap().trace.clone()
    }

    pub fn trace_len(&self) -> usize {
        self.state.lock().unwrap().trace.len()
    }

    /// Trace entries from `from_index` on.
    pub fn trace_since(&self, from_index: usize) -> Vec<TraceEntry> {
        let st = self.state.lock().unwrap();
        st.trace[from_index.min(st.trace.len())..].to_vec()
    }

    fn record(&self, from: &HomeLocation, to: &HomeLocation, msg: &Message) {
        let entry = TraceEntry {
            at_ms: self.origin.elapsed().as_millis() as u64,
            from: from.clone(),
            to: to.clone(),
            type_byte: msg.body.type_byte(),
            token_prefix: message::message_token(&msg.body)
                .map(|t| t.hash_prefix())
                .unwrap_or_else(|| "-".into()),
        };
        self.state.lock().unwrap().trace.push(entry);
    }
}

impl Transport for InMemoryMesh {
    fn request(
        &self,
        from: &HomeLocation,
        to: &HomeLocation,
        msg: &Message,
    ) -> Result<Message, TransportError> {
        let (handler, corrupt, corrupt_reply) = {
            let st = self.state.lock().unwrap();
            if st.drops.contains(&(from.clone(), to.clone())) {
                return Err(TransportError::Timeout);
            }
            let handler = st.handlers.get(to).cloned();
            let corrupt = st.corrupt.get(&(from.clone(), to.clone())).cloned();
            let corrupt_reply = st.corrupt_reply.get(&(from.clone(), to.clone())).cloned();
            (handler, corrupt, corrupt_reply)
        };
        let handler = handler.ok_or(TransportError::Closed)?;
        let mut delivered = msg.clone();
        if let Some(corrupt) = corrupt {
            corrupt(&mut delivered);
        }
        self.record(from, to, &delivered);
        let mut reply = handler(&delivered);
        if let Some(corrupt_reply) = corrupt_reply {
            corrupt_reply(&mut reply);
        }
        self.record(to, from, &reply);
        Ok(reply)
    }
}
