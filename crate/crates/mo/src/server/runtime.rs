//! Threaded driver around [`ServerNode`] for real deployments and in-process
//! multi-server tests. Handlers run under the node lock; outbound requests
//! are shipped by background sender workers, so the lock is never held across
//! network calls. A ticker drives timers and the expiry sweep.

use crate::config::ServerConfig;
use crate::net::message::{Body, ErrorCode, Message};
use crate::net::transport::{read_frame, write_frame, Clock, Transport, TransportError};
use crate::server::node::{ClientId, Effects, OutboundRequest, ServerNode};
use crate::server::storage::Store;
use crate::token::HomeLocation;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender, SyncSender};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// How often the ticker fires, in real milliseconds.
const TICK_MS: u64 = 20;

/// Application-side channel to the local (trusted) port of an MO server.
pub trait LocalChannel: Send + Sync {
    fn request(&self, msg: &Message) -> Result<Message, TransportError>;
    /// The server's remote-channel address, used as the home location of
    /// newly created objects.
    fn server_addr(&self) -> HomeLocation;
}

pub struct ServerRuntime {
    node: Mutex<ServerNode>,
    addr: HomeLocation,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    work_tx: Mutex<Option<Sender<OutboundRequest>>>,
    waiters: Mutex<HashMap<ClientId, SyncSender<Message>>>,
    next_client: AtomicU64,
    shutdown: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl ServerRuntime {
    /// Builds and starts the runtime: sender worker plus ticker. The store
    /// append file, when configured, is reloaded before serving.
    pub fn start(
        config: ServerConfig,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
    ) -> std::io::Result<Arc<ServerRuntime>> {
        let mut node = ServerNode::new(config.clone());
        if let Some(path) = &config.store_file {
            node.set_store(Store::load_from(path)?);
        }
        let (work_tx, work_rx) = mpsc::channel::<OutboundRequest>();
        let work_rx = Arc::new(Mutex::new(work_rx));
        let runtime = Arc::new(ServerRuntime {
            addr: config.listen.clone(),
            node: Mutex::new(node),
            clock,
            transport,
            work_tx: Mutex::new(Some(work_tx)),
            waiters: Mutex::new(HashMap::new()),
            next_client: AtomicU64::new(1),
            shutdown: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
        });
        let threads = vec![
            spawn_sender(Arc::clone(&runtime), Arc::clone(&work_rx), 0),
            spawn_sender(Arc::clone(&runtime), work_rx, 1),
            spawn_ticker(Arc::clone(&runtime)),
        ];
        *runtime.threads.lock().unwrap() = threads;
        Ok(runtime)
    }

    pub fn addr(&self) -> &HomeLocation {
        &self.addr
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Read access to the node for assertions and snapshots.
    pub fn with_node<R>(&self, f: impl FnOnce(&ServerNode) -> R) -> R {
        f(&self.node.lock().unwrap())
    }

    /// Serves one remote request. Always produces a reply message.
    pub fn handle_remote_blocking(&self, msg: &Message) -> Message {
        let now = self.clock.now_ms();
        let fx = self.node.lock().unwrap().handle_remote(now, msg);
        let reply = fx
            .reply
            .clone()
            .unwrap_or_else(|| Message::error(msg.request_id, ErrorCode::Protocol, "no reply"));
        self.dispatch(fx);
        reply
    }

    /// Serves one local request, blocking until a deferred job completes or
    /// the timeout passes.
    pub fn handle_local_blocking(
        &self,
        msg: &Message,
        timeout: Duration,
    ) -> Result<Message, TransportError> {
        let client = self.next_client.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::sync_channel(1);
        self.waiters.lock().unwrap().insert(client, tx);
        let now = self.clock.now_ms();
        let fx = self.node.lock().unwrap().handle_local(now, client, msg);
        let immediate = fx.reply.clone();
        self.dispatch(fx);
        if let Some(reply) = immediate {
            self.waiters.lock().unwrap().remove(&client);
            return Ok(reply);
        }
        let got = rx.recv_timeout(timeout);
        self.waiters.lock().unwrap().remove(&client);
        got.map_err(|_| TransportError::Timeout)
    }

    fn dispatch(&self, fx: Effects) {
        for (client, msg) in fx.completions {
            if let Some(tx) = self.waiters.lock().unwrap().remove(&client) {
                let _ = tx.send(msg);
            }
        }
        if fx.sends.is_empty() {
            return;
        }
        let guard = self.work_tx.lock().unwrap();
        if let Some(tx) = guard.as_ref() {
            for send in fx.sends {
                let _ = tx.send(send);
            }
        }
    }

    /// Writes the store out to the configured append file.
    pub fn flush_store(&self) -> std::io::Result<()> {
        let node = self.node.lock().unwrap();
        if let Some(path) = &node.config().store_file {
            node.store().flush_to(path)?;
        }
        Ok(())
    }

    /// Stops workers and flushes the store.
    pub fn shutdown(&self) -> std::io::Result<()> {
        self.shutdown.store(true, Ordering::SeqCst);
        // closing the queue stops the sender worker
        *self.work_tx.lock().unwrap() = None;
        let threads = std::mem::take(&mut *self.threads.lock().unwrap());
        for t in threads {
            let _ = t.join();
        }
        self.flush_store()
    }
}

fn spawn_sender(
    runtime: Arc<ServerRuntime>,
    work_rx: Arc<Mutex<Receiver<OutboundRequest>>>,
    lane: usize,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("mo-send{lane}-{}", runtime.addr))
        .spawn(move || {
            loop {
                // hold the lock only while picking up the next request
                let send = match work_rx.lock().unwrap().recv() {
                    Ok(send) => send,
                    Err(_) => break,
                };
                if runtime.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let rid = send.msg.request_id;
                let result = runtime
                    .transport
                    .request(&runtime.addr, &send.to, &send.msg);
                let now = runtime.clock.now_ms();
                let fx = match result {
                    Ok(resp) => runtime
                        .node
                        .lock()
                        .unwrap()
                        .handle_response(now, rid, &resp),
                    Err(e) => {
                        log::debug!("send to {} failed: {e}", send.to);
                        runtime.node.lock().unwrap().handle_send_failure(now, rid)
                    }
                };
                runtime.dispatch(fx);
            }
        })
        .expect("spawn sender")
}

fn spawn_ticker(runtime: Arc<ServerRuntime>) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("mo-tick-{}", runtime.addr))
        .spawn(move || loop {
            std::thread::sleep(Duration::from_millis(TICK_MS));
            if runtime.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let now = runtime.clock.now_ms();
            let due = runtime
                .node
                .lock()
                .unwrap()
                .next_wakeup()
                .is_some_and(|t| t <= now);
            if due {
                let fx = runtime.node.lock().unwrap().on_timer(now);
                runtime.dispatch(fx);
            }
        })
        .expect("spawn ticker")
}

/// Registers a runtime's remote handler on an in-memory mesh.
pub fn join_mesh(runtime: &Arc<ServerRuntime>, mesh: &crate::net::transport::InMemoryMesh) {
    let rt = Arc::clone(runtime);
    mesh.register(runtime.addr.clone(), move |msg| {
        rt.handle_remote_blocking(msg)
    });
}

/// In-process local channel: the lib-server side for tests and tools that
/// share the server's address space.
pub struct InProcessChannel {
    runtime: Arc<ServerRuntime>,
    timeout: Duration,
}

impl InProcessChannel {
    pub fn new(runtime: Arc<ServerRuntime>) -> Arc<InProcessChannel> {
        Arc::new(InProcessChannel {
            runtime,
            timeout: Duration::from_secs(10),
        })
    }
}

impl LocalChannel for InProcessChannel {
    fn request(&self, msg: &Message) -> Result<Message, TransportError> {
        self.runtime.handle_local_blocking(msg, self.timeout)
    }

    fn server_addr(&self) -> HomeLocation {
        self.runtime.addr.clone()
    }
}

/// TCP local channel. Every connection starts with a 16-byte shared-secret
/// preamble; message layouts are identical on both channels.
pub struct TcpLocalChannel {
    local_addr: HomeLocation,
    server_addr: HomeLocation,
    secret: [u8; 16],
    timeout: Duration,
}

impl TcpLocalChannel {
    pub fn new(
        local_addr: HomeLocation,
        server_addr: HomeLocation,
        secret: [u8; 16],
        timeout: Duration,
    ) -> Arc<TcpLocalChannel> {
        Arc::new(TcpLocalChannel {
            local_addr,
            server_addr,
            secret,
            timeout,
        })
    }
}

impl LocalChannel for TcpLocalChannel {
    fn request(&self, msg: &Message) -> Result<Message, TransportError> {
        let target = format!("{}:{}", self.local_addr.host(), self.local_addr.port());
        let mut stream =
            TcpStream::connect(&target).map_err(|e| TransportError::Connect(target, e))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.write_all(&self.secret)?;
        write_frame(&mut stream, msg)?;
        read_frame(&mut stream)
    }

    fn server_addr(&self) -> HomeLocation {
        self.server_addr.clone()
    }
}

/// Listeners for a live server: the remote channel and the secret-gated
/// local channel. Returns the accept-loop handles.
pub struct TcpServer {
    pub remote: std::net::SocketAddr,
    pub local: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind(runtime: Arc<ServerRuntime>) -> std::io::Result<TcpServer> {
        let (cfg_listen, cfg_local, secret) = runtime.with_node(|n| {
            (
                n.config().listen.clone(),
                n.config().local_listen.clone(),
                n.config().secret,
            )
        });
        let remote_listener = TcpListener::bind((cfg_listen.host(), cfg_listen.port()))?;
        let local_listener = TcpListener::bind((cfg_local.host(), cfg_local.port()))?;
        let remote = remote_listener.local_addr()?;
        let local = local_listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));

        let mut handles = Vec::new();
        {
            let runtime = Arc::clone(&runtime);
            let stop = Arc::clone(&stop);
            remote_listener.set_nonblocking(true)?;
            handles.push(std::thread::spawn(move || {
                accept_loop(remote_listener, stop, move |stream| {
                    let runtime = Arc::clone(&runtime);
                    std::thread::spawn(move || serve_remote_conn(stream, runtime));
                })
            }));
        }
        {
            let runtime = Arc::clone(&runtime);
            let stop = Arc::clone(&stop);
            local_listener.set_nonblocking(true)?;
            handles.push(std::thread::spawn(move || {
                accept_loop(local_listener, stop, move |stream| {
                    let runtime = Arc::clone(&runtime);
                    std::thread::spawn(move || serve_local_conn(stream, runtime, secret));
                })
            }));
        }
        Ok(TcpServer {
            remote,
            local,
            stop,
            handles,
        })
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, mut on_conn: impl FnMut(TcpStream)) {
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nodelay(true);
                on_conn(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => return,
        }
    }
}

fn serve_remote_conn(mut stream: TcpStream, runtime: Arc<ServerRuntime>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    loop {
        let msg = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(TransportError::Protocol(e)) => {
                // malformed input gets a structured error, then the
                // connection closes
                let reply = Message::error(0, ErrorCode::Protocol, e.to_string());
                let _ = write_frame(&mut stream, &reply);
                return;
            }
            Err(_) => return,
        };
        let reply = runtime.handle_remote_blocking(&msg);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

fn serve_local_conn(mut stream: TcpStream, runtime: Arc<ServerRuntime>, secret: [u8; 16]) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut preamble = [0u8; 16];
    if stream.read_exact(&mut preamble).is_err() || preamble != secret {
        // wrong secret: refuse without details
        let _ = write_frame(
            &mut stream,
            &Message::error(0, ErrorCode::Untrusted, "bad secret"),
        );
        return;
    }
    loop {
        let msg = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(TransportError::Protocol(e)) => {
                let reply = Message::error(0, ErrorCode::Protocol, e.to_string());
                let _ = write_frame(&mut stream, &reply);
                return;
            }
            Err(_) => return,
        };
        match runtime.handle_local_blocking(&msg, Duration::from_secs(30)) {
            Ok(reply) => {
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
            }
            Err(_) => {
                let reply = Message::error(
                    msg.request_id,
                    ErrorCode::UnreachableHome,
                    "request timed out",
                );
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
            }
        }
    }
}

/// Convenience check used by tools: a local FETCH that reads current state.
pub fn local_read(
    channel: &dyn LocalChannel,
    token: &crate::token::Token,
) -> Result<Option<crate::mobject::DistributedPart>, TransportError> {
    let msg = Message::new(
        0,
        Body::Fetch {
            requester: channel.server_addr(),
            token: token.clone(),
        },
    );
    match channel.request(&msg)?.body {
        Body::FetchResp { part, .. } => Ok(part),
        _ => Ok(None),
    }
}
