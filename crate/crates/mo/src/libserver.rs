//! The lib-server: the application-facing tier, linked into the application's
//! address space. It forwards object lifecycle calls to the local MO server
//! over the trusted channel and runs background threads that watch clusters
//! so applications can subscribe with callbacks or block on waits.
//!
//! Every entry point is thread-safe. Tracker clusters express which tokens
//! the caller already considers old: an empty tracker observes everything,
//! a snapshot of the current cluster observes only future additions.

use crate::cluster::Cluster;
use crate::mobject::{MicroObject, MoError};
use crate::net::message::{Body, ErrorCode, Message, ReplicateOp};
use crate::net::transport::TransportError;
use crate::security::SecurityPolicy;
use crate::server::runtime::LocalChannel;
use crate::token::{ExpireDate, HomeLocation, Token};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("not connected: {0}")]
    Disconnected(#[from] TransportError),
    #[error("server refused: {code:?}: {message}")]
    Server { code: ErrorCode, message: String },
    #[error(transparent)]
    Object(#[from] MoError),
    #[error("cluster security policy does not allow server-level replication")]
    ClusterPolicyUnsupported,
    #[error("unexpected server reply")]
    BadReply,
}

fn server_err(code: ErrorCode, message: String) -> SessionError {
    SessionError::Server { code, message }
}

struct SubQueue {
    pending: std::collections::VecDeque<Token>,
    /// Tokens already delivered or queued; starts as the tracker.
    seen: Cluster,
}

struct SubShared {
    queue: Mutex<SubQueue>,
    cv: Condvar,
    stopped: AtomicBool,
}

/// A live callback registration. Dropping it (or calling
/// [`Subscription::unsubscribe`]) stops deliveries.
pub struct Subscription {
    shared: Arc<SubShared>,
    worker: Option<JoinHandle<()>>,
}

impl Subscription {
    pub fn unsubscribe(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stopped.store(true, Ordering::SeqCst);
        self.shared.cv.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.stop();
    }
}

struct ObjectState {
    mo: MicroObject,
    subs: Vec<Arc<SubShared>>,
}

struct ObjectShared {
    state: Mutex<ObjectState>,
    changed: Condvar,
}

impl ObjectShared {
    /// Absorbs cluster members (and a payload, when newly available) into the
    /// local object, feeding subscriptions and waking waiters.
    fn apply_part(&self, part: &crate::mobject::DistributedPart) {
        let mut st = self.state.lock().unwrap();
        if !st.mo.payload_present() {
            if let Some(sealed) = &part.payload {
                // attach only verifies; a failure leaves the payload absent
                let _ = st.mo.attach_payload(sealed.clone());
            }
        }
        let gained = st
            .mo
            .cluster_mut()
            .absorb(part.cluster.members().iter().cloned());
        if !gained.is_empty() {
            Self::feed_subs(&mut st);
            self.changed.notify_all();
        }
    }

    fn add_local(&self, token: Token) -> bool {
        let mut st = self.state.lock().unwrap();
        let added = st.mo.cluster_mut().insert(token);
        if added {
            Self::feed_subs(&mut st);
            self.changed.notify_all();
        }
        added
    }

    fn feed_subs(st: &mut ObjectState) {
        let cluster = st.mo.cluster().clone();
        st.subs.retain(|s| !s.stopped.load(Ordering::SeqCst));
        for sub in &st.subs {
            let mut q = sub.queue.lock().unwrap();
            let fresh = cluster.new_since(&q.seen);
            if !fresh.is_empty() {
                for t in fresh {
                    q.seen.insert(t.clone());
                    q.pending.push_back(t);
                }
                sub.cv.notify_all();
            }
        }
    }
}

struct SessionShared {
    channel: Arc<dyn LocalChannel>,
    server_addr: HomeLocation,
    objects: Mutex<HashMap<Token, Arc<ObjectShared>>>,
    next_request: AtomicU64,
    stop: AtomicBool,
}

impl SessionShared {
    fn request_id(&self) -> u64 {
        self.next_request.fetch_add(1, Ordering::SeqCst)
    }

    fn call(&self, body: Body) -> Result<Message, SessionError> {
        let msg = Message::new(self.request_id(), body);
        let reply = self.channel.request(&msg)?;
        if let Body::Error { code, message } = reply.body {
            return Err(server_err(code, message));
        }
        Ok(reply)
    }

    /// One poll pass over every registered object.
    fn poll_once(&self) {
        let objects: Vec<(Token, Arc<ObjectShared>)> = self
            .objects
            .lock()
            .unwrap()
            .iter()
            .map(|(t, o)| (t.clone(), Arc::clone(o)))
            .collect();
        for (token, object) in objects {
            let msg = Message::new(
                self.request_id(),
                Body::Fetch {
                    requester: self.server_addr.clone(),
                    token,
                },
            );
            if let Ok(reply) = self.channel.request(&msg) {
                if let Body::FetchResp {
                    part: Some(part), ..
                } = reply.body
                {
                    object.apply_part(&part);
                }
            }
        }
    }
}

/// One session per application address space.
pub struct Session {
    shared: Arc<SessionShared>,
    poller: Option<JoinHandle<()>>,
}

impl Session {
    /// Connects over the given local channel, polling the server for cluster
    /// changes every 100 ms.
    pub fn connect(channel: Arc<dyn LocalChannel>) -> Session {
        Self::with_poll_interval(channel, Duration::from_millis(100))
    }

    pub fn with_poll_interval(channel: Arc<dyn LocalChannel>, poll: Duration) -> Session {
        let server_addr = channel.server_addr();
        let shared = Arc::new(SessionShared {
            channel,
            server_addr,
            objects: Mutex::new(HashMap::new()),
            next_request: AtomicU64::new(1),
            stop: AtomicBool::new(false),
        });
        let poller = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("mo-lib-poll".into())
                .spawn(move || loop {
                    std::thread::sleep(poll);
                    if shared.stop.load(Ordering::SeqCst) {
                        return;
                    }
                    shared.poll_once();
                })
                .expect("spawn poller")
        };
        Session {
            shared,
            poller: Some(poller),
        }
    }

    pub fn server_addr(&self) -> HomeLocation {
        self.shared.server_addr.clone()
    }

    /// Creates a fresh object, asks the local server to adopt it, and
    /// registers it with the session.
    pub fn create_new(
        &self,
        expire: ExpireDate,
        plaintext: &[u8],
        psec: SecurityPolicy,
        csec: SecurityPolicy,
    ) -> Result<MoHandle, SessionError> {
        let mo = MicroObject::new(
            self.shared.server_addr.clone(),
            expire,
            plaintext,
            psec,
            csec,
        )?;
        self.shared.call(Body::Adopt {
            part: mo.part().clone(),
        })?;
        Ok(self.register(mo))
    }

    /// Registers a copy bound to an existing token; the payload is fetched
    /// on first use.
    pub fn from_token(&self, token: Token, psec: SecurityPolicy, csec: SecurityPolicy) -> MoHandle {
        self.register(MicroObject::from_token(token, psec, csec))
    }

    fn register(&self, mo: MicroObject) -> MoHandle {
        let token = mo.token().clone();
        let mut objects = self.shared.objects.lock().unwrap();
        let object = objects.entry(token.clone()).or_insert_with(|| {
            Arc::new(ObjectShared {
                state: Mutex::new(ObjectState {
                    mo,
                    subs: Vec::new(),
                }),
                changed: Condvar::new(),
            })
        });
        MoHandle {
            token,
            object: Arc::clone(object),
            session: Arc::clone(&self.shared),
        }
    }

    /// Immediately refreshes every registered object from the server instead
    /// of waiting for the next poll tick.
    pub fn refresh(&self) {
        self.shared.poll_once();
    }

    /// The local server's view of a token's cluster, without side effects.
    /// Used by graph walks that skip branches the server does not hold.
    pub fn local_cluster_view(&self, token: &Token) -> Option<Cluster> {
        let msg = Message::new(
            self.shared.request_id(),
            Body::Fetch {
                requester: self.shared.server_addr.clone(),
                token: token.clone(),
            },
        );
        match self.shared.channel.request(&msg) {
            Ok(Message {
                body: Body::FetchResp {
                    part: Some(part), ..
                },
                ..
            }) => Some(part.cluster),
            _ => None,
        }
    }

    pub fn close(mut self) {
        self.shut();
    }

    fn shut(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(p) = self.poller.take() {
            let _ = p.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.shut();
    }
}

/// A registered micro object. Cheap to clone.
#[derive(Clone)]
pub struct MoHandle {
    token: Token,
    object: Arc<ObjectShared>,
    session: Arc<SessionShared>,
}

impl std::fmt::Debug for MoHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MoHandle({})", self.token)
    }
}

impl MoHandle {
    pub fn token(&self) -> Token {
        self.token.clone()
    }

    /// Snapshot of the locally known cluster.
    pub fn cluster(&self) -> Cluster {
        self.object.state.lock().unwrap().mo.cluster().clone()
    }

    /// Clusters `child` into this object: appended locally, then an update
    /// is sent to the local server. A server that does not track the object
    /// yet keeps only the local append.
    pub fn add_to_cluster(&self, child: &MoHandle) -> Result<(), SessionError> {
        self.add_token(child.token())
    }

    pub fn add_token(&self, child: Token) -> Result<(), SessionError> {
        self.object.add_local(child.clone());
        match self.session.call(Body::Update {
            token: self.token.clone(),
            add: vec![child],
        }) {
            Ok(_) => Ok(()),
            Err(SessionError::Server {
                code: ErrorCode::UnknownObject,
                ..
            }) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Starts or stops a replication policy on the local server's copy.
    /// Encrypted cluster policies cannot be replicated at server level; the
    /// lib-server would have to carry them itself and refuses for now.
    pub fn put_repl(&self, op: ReplicateOp) -> Result<(), SessionError> {
        let csec_mode = {
            let st = self.object.state.lock().unwrap();
            st.mo.csec().mode()
        };
        if matches!(
            csec_mode,
            crate::security::SecurityMode::Encrypt
                | crate::security::SecurityMode::EncryptAuthenticate
        ) && matches!(op, ReplicateOp::StartFlooding { .. })
        {
            return Err(SessionError::ClusterPolicyUnsupported);
        }
        self.session.call(Body::Replicate {
            token: self.token.clone(),
            op,
        })?;
        Ok(())
    }

    /// The opened plaintext. Fetches the payload through the local server
    /// when it is not present yet; a payload that fails verification is
    /// rejected and not installed.
    pub fn payload(&self) -> Result<Vec<u8>, SessionError> {
        {
            let st = self.object.state.lock().unwrap();
            if st.mo.payload_present() {
                return Ok(st.mo.plaintext()?);
            }
        }
        let reply = self.session.call(Body::RequestPayload {
            token: self.token.clone(),
        })?;
        let Body::LocalResp { part: Some(part) } = reply.body else {
            return Err(SessionError::BadReply);
        };
        let mut st = self.object.state.lock().unwrap();
        if !st.mo.payload_present() {
            let sealed = part.payload.clone().ok_or(SessionError::BadReply)?;
            st.mo.attach_payload(sealed)?;
        }
        let gained = st
            .mo
            .cluster_mut()
            .absorb(part.cluster.members().iter().cloned());
        if !gained.is_empty() {
            ObjectShared::feed_subs(&mut st);
            self.object.changed.notify_all();
        }
        Ok(st.mo.plaintext()?)
    }

    pub fn payload_present(&self) -> bool {
        self.object.state.lock().unwrap().mo.payload_present()
    }

    /// One synchronous pull of the local server's state for this object.
    /// Returns whether the server holds a copy at all.
    pub fn sync_local(&self) -> Result<bool, SessionError> {
        let reply = self.session.call(Body::Fetch {
            requester: self.session.server_addr.clone(),
            token: self.token.clone(),
        })?;
        match reply.body {
            Body::FetchResp {
                part: Some(part), ..
            } => {
                self.object.apply_part(&part);
                Ok(true)
            }
            Body::FetchResp { part: None, .. } => Ok(false),
            _ => Err(SessionError::BadReply),
        }
    }

    /// Runs `callback` once for every token beyond `tracker`: first the
    /// already-present members in token order, then additions in arrival
    /// order. Callbacks for one subscription run serially on a background
    /// thread.
    pub fn subscribe(
        &self,
        tracker: &Cluster,
        callback: impl Fn(Token) + Send + 'static,
    ) -> Subscription {
        let shared = Arc::new(SubShared {
            queue: Mutex::new(SubQueue {
                pending: std::collections::VecDeque::new(),
                seen: tracker.clone(),
            }),
            cv: Condvar::new(),
            stopped: AtomicBool::new(false),
        });
        {
            let mut st = self.object.state.lock().unwrap();
            let current = st.mo.cluster().clone();
            {
                let mut q = shared.queue.lock().unwrap();
                for t in current.new_since(tracker) {
                    q.seen.insert(t.clone());
                    q.pending.push_back(t);
                }
            }
            st.subs.push(Arc::clone(&shared));
        }
        let worker = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("mo-lib-notify".into())
                .spawn(move || {
                    let mut q = shared.queue.lock().unwrap();
                    loop {
                        if shared.stopped.load(Ordering::SeqCst) {
                            return;
                        }
                        if let Some(t) = q.pending.pop_front() {
                            drop(q);
                            callback(t);
                            q = shared.queue.lock().unwrap();
                        } else {
                            let (guard, _) = shared
                                .cv
                                .wait_timeout(q, Duration::from_millis(50))
                                .unwrap();
                            q = guard;
                        }
                    }
                })
                .expect("spawn notify worker")
        };
        Subscription {
            shared,
            worker: Some(worker),
        }
    }

    /// Blocks until the cluster holds a token outside `tracker` and returns
    /// the least such token. The caller is expected to add it to its tracker.
    pub fn wait(&self, tracker: &Cluster) -> Result<Token, SessionError> {
        loop {
            if let Some(t) = self.try_wait(tracker, Duration::from_millis(200))? {
                return Ok(t);
            }
        }
    }

    /// Like [`Self::wait`] but gives up after waiting at least `at_least`.
    pub fn try_wait(
        &self,
        tracker: &Cluster,
        at_least: Duration,
    ) -> Result<Option<Token>, SessionError> {
        let deadline = Instant::now() + at_least;
        let mut st = self.object.state.lock().unwrap();
        loop {
            if let Some(t) = st.mo.cluster().new_since(tracker).into_iter().next() {
                return Ok(Some(t));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let (guard, _) = self
                .object
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap();
            st = guard;
        }
    }
}
