//! The MO server as a deterministic state machine.
//!
//! Handlers take the current time and a decoded message and return
//! [`Effects`]: an optional immediate reply, outbound requests to peers, and
//! deferred completions for local clients. A driver (the simulated network
//! or the threaded runtime) owns delivery, so the same logic runs unmodified
//! over both. No wall-clock reads happen here; time is always injected.

use crate::cluster::Cluster;
use crate::config::ServerConfig;
use crate::dao::{subgraph_scan, SubgraphScope};
use crate::mobject::{DistributedPart, PolicyKind, ReplicationData, ReplicationPolicy};
use crate::net::message::{Body, ErrorCode, Message, ReplicateOp};
use crate::security::SealedBuffer;
use crate::server::storage::{Cache, Store, StoreEntry};
use crate::token::{ExpireDate, HomeLocation, Token};
use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

/// Identifies a local client connection; assigned by the driver.
pub type ClientId = u64;

/// Upper bound on payloads attached to one assent; anything beyond is
/// fetched on demand by the receiver.
const MAX_ASSENT_ATTACHMENTS: usize = 256;

/// A request this node wants delivered to a peer. The driver routes the
/// eventual response (or failure) back through [`ServerNode::handle_response`]
/// / [`ServerNode::handle_send_failure`] keyed by the message's request id.
#[derive(Debug, Clone)]
pub struct OutboundRequest {
    pub to: HomeLocation,
    pub msg: Message,
}

/// Everything a handler wants done.
#[derive(Debug, Default)]
pub struct Effects {
    /// Immediate reply on the channel the request came in on.
    pub reply: Option<Message>,
    /// Requests to send to peers.
    pub sends: Vec<OutboundRequest>,
    /// Deferred replies to local clients, keyed by driver-assigned id.
    pub completions: Vec<(ClientId, Message)>,
}

impl Effects {
    fn reply(msg: Message) -> Effects {
        Effects {
            reply: Some(msg),
            ..Effects::default()
        }
    }

    fn none() -> Effects {
        Effects::default()
    }

    fn extend(&mut self, other: Effects) {
        debug_assert!(other.reply.is_none());
        self.sends.extend(other.sends);
        self.completions.extend(other.completions);
    }
}

#[derive(Debug, Default, Clone)]
struct PeerState {
    last_contact: u64,
    /// Cluster revision the peer is known to have caught up to.
    harmonized_rev: u64,
    /// Revision we last attempted to push.
    attempted_rev: u64,
    last_attempt: u64,
    inflight: bool,
    /// Peer answered not-found: it holds no copy, so it does not take part
    /// in replication for this token until it assents to us.
    unwilling: bool,
}

#[derive(Debug, Default)]
struct TokenMeta {
    /// Bumped whenever the local cluster gains members.
    rev: u64,
    policies: Vec<ReplicationPolicy>,
    peers: HashMap<HomeLocation, PeerState>,
    /// Servers that recently fetched this token and got it, most recent first.
    ditto: VecDeque<HomeLocation>,
    /// Fetch arrivals within the busy window.
    recent_fetches: VecDeque<(u64, HomeLocation)>,
}

#[derive(Debug)]
enum Pending {
    Assent {
        token: Token,
        peer: HomeLocation,
        /// Cluster revision the assent's sample covered.
        sent_rev: u64,
    },
    JobFetch {
        job_id: u64,
        peer: HomeLocation,
    },
}

#[derive(Debug)]
struct FetchJob {
    client: ClientId,
    origin_request: u64,
    token: Token,
    home: Option<HomeLocation>,
    home_attempts: u32,
    backoff_ms: u64,
    retry_at: Option<u64>,
    queue: VecDeque<HomeLocation>,
    tried: HashSet<HomeLocation>,
    saw_busy: bool,
    saw_not_found: bool,
}

pub struct ServerNode {
    addr: HomeLocation,
    config: ServerConfig,
    store: Store,
    cache: Cache,
    meta: HashMap<Token, TokenMeta>,
    pending: HashMap<u64, Pending>,
    jobs: HashMap<u64, FetchJob>,
    next_id: u64,
    /// Earliest time the anti-stale flood scan should run, if any peer lags.
    flood_scan_at: Option<u64>,
}

impl ServerNode {
    pub fn new(config: ServerConfig) -> ServerNode {
        let addr = config.listen.clone();
        ServerNode {
            addr,
            cache: Cache::new(config.cache_capacity),
            config,
            store: Store::new(),
            meta: HashMap::new(),
            pending: HashMap::new(),
            jobs: HashMap::new(),
            next_id: 1,
            flood_scan_at: None,
        }
    }

    pub fn addr(&self) -> &HomeLocation {
        &self.addr
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Replaces the store, e.g. when reloading the append file at startup.
    pub fn set_store(&mut self, store: Store) {
        self.store = store;
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    // ------------------------------------------------------------------
    // inspection (used by drivers, scripts and tests)

    /// Locally held distributed part, store first, without touching recency.
    pub fn local_part(&self, token: &Token) -> Option<DistributedPart> {
        if let Some(e) = self.store.get(token) {
            return Some(e.part.clone());
        }
        self.cache.peek(token).cloned()
    }

    pub fn local_cluster(&self, token: &Token) -> Option<Cluster> {
        self.local_part(token).map(|p| p.cluster)
    }

    pub fn has_payload(&self, token: &Token) -> bool {
        self.local_part(token)
            .map(|p| p.payload.is_some())
            .unwrap_or(false)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// The openly shared replication data of a local copy.
    pub fn replication_of(&self, token: &Token) -> ReplicationData {
        let mut data = ReplicationData::default();
        if let Some(m) = self.meta.get(token) {
            for p in &m.policies {
                data.put(*p);
            }
            for (peer, st) in &m.peers {
                data.peers.insert(peer.clone(), st.last_contact);
            }
        }
        data
    }

    /// Everyone this server can contact: explicit per-object peers plus the
    /// home links of every held token and cluster member.
    pub fn known_peers(&self) -> BTreeSet<HomeLocation> {
        let mut peers = BTreeSet::new();
        for m in self.meta.values() {
            peers.extend(m.peers.keys().cloned());
        }
        let mut add_part = |part: &DistributedPart| {
            peers.insert(part.token.home().clone());
            for t in part.cluster.members() {
                peers.insert(t.home().clone());
            }
        };
        for (_, e) in self.store.iter() {
            add_part(&e.part);
        }
        for t in self.cache.tokens() {
            if let Some(p) = self.cache.peek(t) {
                add_part(p);
            }
        }
        peers.remove(&self.addr);
        peers
    }

    // ------------------------------------------------------------------
    // remote channel

    pub fn handle_remote(&mut self, now: u64, msg: &Message) -> Effects {
        if !msg.body.valid_on_remote_channel() {
            return Effects::reply(Message::error(
                msg.request_id,
                ErrorCode::Untrusted,
                "local request on remote channel",
            ));
        }
        match &msg.body {
            Body::Fetch { requester, token } => {
                self.remote_fetch(now, msg.request_id, requester, token)
            }
            Body::Assent {
                sender,
                token,
                digest,
                sample_is_full: _,
                sample,
                attachments,
            } => self.remote_assent(
                now,
                msg.request_id,
                sender,
                token,
                digest,
                sample,
                attachments,
            ),
            _ => Effects::reply(Message::error(
                msg.request_id,
                ErrorCode::Protocol,
                "unexpected message type",
            )),
        }
    }

    fn remote_fetch(
        &mut self,
        now: u64,
        request_id: u64,
        requester: &HomeLocation,
        token: &Token,
    ) -> Effects {
        let window = self.config.busy_window_ms;
        let threshold = self.config.busy_threshold;
        let ditto_max = self.config.ditto_max;
        let meta = self.meta.entry(token.clone()).or_default();
        let cutoff = now.saturating_sub(window);
        while meta
            .recent_fetches
            .front()
            .is_some_and(|(t, _)| *t < cutoff)
        {
            meta.recent_fetches.pop_front();
        }
        meta.recent_fetches.push_back((now, requester.clone()));
        // the current request counts as in flight too
        let inflight = meta.recent_fetches.len();
        let ditto: Vec<HomeLocation> = meta
            .ditto
            .iter()
            .filter(|a| *a != requester)
            .take(ditto_max)
            .cloned()
            .collect();
        if inflight > threshold {
            return Effects::reply(Message::new(request_id, Body::Busy { ditto }));
        }
        let part = self.serve_part(token);
        match part {
            Some(part) => {
                // a served requester will hold a copy: a good ditto candidate
                let meta = self.meta.entry(token.clone()).or_default();
                if requester != &self.addr {
                    meta.ditto.retain(|a| a != requester);
                    meta.ditto.push_front(requester.clone());
                    meta.ditto.truncate(ditto_max);
                }
                Effects::reply(Message::new(
                    request_id,
                    Body::FetchResp {
                        part: Some(part),
                        ditto,
                    },
                ))
            }
            None => Effects::reply(Message::new(
                request_id,
                Body::FetchResp { part: None, ditto },
            )),
        }
    }

    /// A part that can satisfy a fetch: payload present. Cache reads count
    /// as accesses.
    fn serve_part(&mut self, token: &Token) -> Option<DistributedPart> {
        if let Some(e) = self.store.get(token) {
            if e.part.payload.is_some() {
                return Some(e.part.clone());
            }
        }
        if let Some(p) = self.cache.get(token) {
            if p.payload.is_some() {
                return Some(p.clone());
            }
        }
        None
    }

    #[allow(clippy::too_many_arguments)]
    fn remote_assent(
        &mut self,
        now: u64,
        request_id: u64,
        sender: &HomeLocation,
        token: &Token,
        digest: &crate::cluster::ClusterDigest,
        sample: &[Token],
        attachments: &[(Token, SealedBuffer)],
    ) -> Effects {
        if !self.holds(token) {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::NotFound,
                "no local copy",
            ));
        }
        let gained = self
            .with_entry_cluster(token, |c| c.absorb(sample.iter().cloned()))
            .unwrap_or_default();
        let local = self.entry_cluster(token).unwrap_or_default();
        let missing = local.diff(digest, sample);
        {
            let meta = self.meta.entry(token.clone()).or_default();
            if !gained.is_empty() {
                meta.rev += 1;
            }
            let rev = meta.rev;
            let ps = meta.peers.entry(sender.clone()).or_default();
            ps.last_contact = now;
            // after this exchange the peer holds the union too
            ps.harmonized_rev = rev;
            ps.unwilling = false;
        }
        for (t, sealed) in attachments {
            self.ingest_pushed_payload(t, sealed);
        }
        let mut effects = Effects::reply(Message::new(request_id, Body::AssentResp { missing }));
        if !gained.is_empty() {
            effects.extend(self.eval_policies_after_change(now, token));
        }
        effects
    }

    fn holds(&self, token: &Token) -> bool {
        self.store.contains(token) || self.cache.contains(token)
    }

    fn entry_cluster(&self, token: &Token) -> Option<Cluster> {
        if let Some(e) = self.store.get(token) {
            return Some(e.part.cluster.clone());
        }
        self.cache.peek(token).map(|p| p.cluster.clone())
    }

    fn with_entry_cluster<R>(
        &mut self,
        token: &Token,
        f: impl FnOnce(&mut Cluster) -> R,
    ) -> Option<R> {
        if let Some(e) = self.store.get_mut(token) {
            return Some(f(&mut e.part.cluster));
        }
        self.cache.get_mut(token).map(|p| f(&mut p.cluster))
    }

    /// Accepts a payload pushed alongside an assent. Verified against its
    /// token; anything bogus is dropped. Pushed foreign objects land in the
    /// cache, never the store.
    fn ingest_pushed_payload(&mut self, token: &Token, sealed: &SealedBuffer) {
        if sealed.encoded_len() > self.config.max_payload_size {
            return;
        }
        let candidate = DistributedPart {
            token: token.clone(),
            payload: Some(sealed.clone()),
            cluster: Cluster::new(),
        };
        if !candidate.payload_verifies() {
            return;
        }
        if let Some(e) = self.store.get_mut(token) {
            if e.part.payload.is_none() {
                e.part.payload = Some(sealed.clone());
            }
            return;
        }
        if let Some(p) = self.cache.get_mut(token) {
            if p.payload.is_none() {
                p.payload = Some(sealed.clone());
            }
            return;
        }
        self.cache.insert(candidate);
    }

    // ------------------------------------------------------------------
    // local channel

    pub fn handle_local(&mut self, now: u64, client: ClientId, msg: &Message) -> Effects {
        match &msg.body {
            Body::Fetch { token, .. } => {
                // local read of current state; no ditto or busy accounting
                let part = if let Some(e) = self.store.get(token) {
                    Some(e.part.clone())
                } else {
                    self.cache.get(token).cloned()
                };
                Effects::reply(Message::new(
                    msg.request_id,
                    Body::FetchResp {
                        part,
                        ditto: vec![],
                    },
                ))
            }
            Body::RequestPayload { token } => {
                self.local_request_payload(now, client, msg.request_id, token)
            }
            Body::Adopt { part } => self.local_adopt(now, msg.request_id, part),
            Body::Replicate { token, op } => self.local_replicate(now, msg.request_id, token, *op),
            Body::Update { token, add } => self.local_update(now, msg.request_id, token, add),
            _ => Effects::reply(Message::error(
                msg.request_id,
                ErrorCode::Protocol,
                "unexpected message type",
            )),
        }
    }

    fn local_adopt(&mut self, now: u64, request_id: u64, part: &DistributedPart) -> Effects {
        if part.token.home() != &self.addr {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::WrongHome,
                format!("token names {} as home", part.token.home()),
            ));
        }
        let Some(sealed) = &part.payload else {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::VerifyFailed,
                "adopt requires a payload",
            ));
        };
        if sealed.encoded_len() > self.config.max_payload_size {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::Oversize,
                "payload too large",
            ));
        }
        if !part.payload_verifies() {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::VerifyFailed,
                "payload does not match token",
            ));
        }
        let gained = self.store_insert_merging(part.clone(), now, None);
        if !gained.is_empty() {
            self.meta.entry(part.token.clone()).or_default().rev += 1;
        }
        let mut effects = Effects::reply(Message::new(request_id, Body::LocalResp { part: None }));
        if !gained.is_empty() {
            effects.extend(self.eval_policies_after_change(now, &part.token));
        }
        effects
    }

    /// Inserts into the store, merging any existing store or cache entry for
    /// the same token. Returns cluster members gained by the merge.
    fn store_insert_merging(
        &mut self,
        mut part: DistributedPart,
        now: u64,
        sustain_until: Option<u64>,
    ) -> Vec<Token> {
        let token = part.token.clone();
        let cached = self.cache.remove(&token);
        let mut gained = Vec::new();
        if let Some(cached) = cached {
            if part.payload.is_none() {
                part.payload = cached.payload;
            }
            gained.extend(
                part.cluster
                    .absorb(cached.cluster.members().iter().cloned()),
            );
        }
        match self.store.get_mut(&token) {
            Some(existing) => {
                if existing.part.payload.is_none() {
                    existing.part.payload = part.payload;
                }
                let newly = existing
                    .part
                    .cluster
                    .absorb(part.cluster.members().iter().cloned());
                gained.extend(newly);
                if let Some(s) = sustain_until {
                    existing.sustain_until = Some(existing.sustain_until.unwrap_or(0).max(s));
                }
            }
            None => {
                // everything already in `part` counts as preexisting, not gained
                self.store.insert(StoreEntry {
                    part,
                    adopted_at: now,
                    sustain_until,
                });
            }
        }
        gained
    }

    fn local_replicate(
        &mut self,
        now: u64,
        request_id: u64,
        token: &Token,
        op: ReplicateOp,
    ) -> Effects {
        match op {
            ReplicateOp::StartFlooding { level } => {
                self.pin_to_store(token, now);
                {
                    let meta = self.meta.entry(token.clone()).or_default();
                    meta.policies.retain(|p| p.kind() != PolicyKind::Flooding);
                    meta.policies.push(ReplicationPolicy::Flooding { level });
                }
                // announce to never-harmonized peers right away: this is how
                // willingness is indicated, and the assent reply backfills
                // additions made before activation
                let scope = self.scan(token, level);
                let sends = self.flood_step(now, &token.clone(), level, &scope);
                let mut effects =
                    Effects::reply(Message::new(request_id, Body::LocalResp { part: None }));
                effects.sends = sends;
                return effects;
            }
            ReplicateOp::StartSustain { until_ms } => {
                if until_ms == 0 {
                    return Effects::reply(Message::error(
                        request_id,
                        ErrorCode::UnknownPolicy,
                        "sustain requires a finite future date",
                    ));
                }
                self.pin_to_store(token, now);
                if let Some(e) = self.store.get_mut(token) {
                    e.sustain_until = Some(e.sustain_until.unwrap_or(0).max(until_ms));
                }
                let meta = self.meta.entry(token.clone()).or_default();
                meta.policies.retain(|p| p.kind() != PolicyKind::Sustain);
                if let Ok(until) = ExpireDate::from_millis(until_ms) {
                    meta.policies.push(ReplicationPolicy::Sustain { until });
                }
            }
            ReplicateOp::StopFlooding => {
                if let Some(meta) = self.meta.get_mut(token) {
                    meta.policies.retain(|p| p.kind() != PolicyKind::Flooding);
                }
            }
            ReplicateOp::StopSustain => {
                if let Some(meta) = self.meta.get_mut(token) {
                    meta.policies.retain(|p| p.kind() != PolicyKind::Sustain);
                }
                if let Some(e) = self.store.get_mut(token) {
                    e.sustain_until = None;
                }
            }
        }
        Effects::reply(Message::new(request_id, Body::LocalResp { part: None }))
    }

    /// Replication threads have store access: policies pin their object into
    /// the store so cache cleanup cannot drop it. Foreign objects are allowed.
    fn pin_to_store(&mut self, token: &Token, now: u64) {
        if self.store.contains(token) {
            return;
        }
        let part = self
            .cache
            .remove(token)
            .unwrap_or_else(|| DistributedPart::token_only(token.clone()));
        if !part.cluster.is_empty() {
            // a copy that arrived with members counts as revised once, so
            // never-harmonized peers still see it as worth pushing
            let meta = self.meta.entry(token.clone()).or_default();
            meta.rev = meta.rev.max(1);
        }
        self.store.insert(StoreEntry {
            part,
            adopted_at: now,
            sustain_until: None,
        });
    }

    fn local_update(&mut self, now: u64, request_id: u64, token: &Token, add: &[Token]) -> Effects {
        if !self.holds(token) {
            return Effects::reply(Message::error(
                request_id,
                ErrorCode::UnknownObject,
                "no local copy to update",
            ));
        }
        let gained = self
            .with_entry_cluster(token, |c| c.absorb(add.iter().cloned()))
            .unwrap_or_default();
        let mut effects = Effects::reply(Message::new(request_id, Body::LocalResp { part: None }));
        if !gained.is_empty() {
            self.meta.entry(token.clone()).or_default().rev += 1;
            effects.extend(self.eval_policies_after_change(now, token));
        }
        effects
    }

    fn local_request_payload(
        &mut self,
        now: u64,
        client: ClientId,
        request_id: u64,
        token: &Token,
    ) -> Effects {
        if let Some(part) = self.serve_part(token) {
            return Effects::reply(Message::new(
                request_id,
                Body::LocalResp { part: Some(part) },
            ));
        }
        // proxy: fetch remotely, home first, then ditto candidates
        let home = (token.home() != &self.addr).then(|| token.home().clone());
        let known_ditto: VecDeque<HomeLocation> = self
            .meta
            .get(token)
            .map(|m| {
                m.ditto
                    .iter()
                    .filter(|a| *a != &self.addr)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        let job_id = self.fresh_id();
        let job = FetchJob {
            client,
            origin_request: request_id,
            token: token.clone(),
            home: home.clone(),
            home_attempts: 0,
            backoff_ms: self.config.rto_ms,
            retry_at: None,
            queue: known_ditto,
            tried: HashSet::new(),
            saw_busy: false,
            saw_not_found: false,
        };
        self.jobs.insert(job_id, job);
        let mut effects = Effects::none();
        match home {
            Some(home) => {
                self.jobs.get_mut(&job_id).unwrap().home_attempts = 1;
                let send = self.job_fetch_send(job_id, home);
                effects.sends.push(send);
            }
            None => {
                // we are home; the store has no copy, so only dittos remain
                effects.extend(self.job_advance(now, job_id));
            }
        }
        effects
    }

    fn job_fetch_send(&mut self, job_id: u64, peer: HomeLocation) -> OutboundRequest {
        let rid = self.fresh_id();
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        job.tried.insert(peer.clone());
        let msg = Message::new(
            rid,
            Body::Fetch {
                requester: self.addr.clone(),
                token: job.token.clone(),
            },
        );
        self.pending.insert(
            rid,
            Pending::JobFetch {
                job_id,
                peer: peer.clone(),
            },
        );
        OutboundRequest { to: peer, msg }
    }

    /// Moves a fetch job forward: next untried ditto candidate, or failure.
    fn job_advance(&mut self, _now: u64, job_id: u64) -> Effects {
        if !self.jobs.contains_key(&job_id) {
            return Effects::none();
        }
        let mut next = None;
        {
            let addr = self.addr.clone();
            let job = self.jobs.get_mut(&job_id).unwrap();
            while let Some(candidate) = job.queue.pop_front() {
                if !job.tried.contains(&candidate) && candidate != addr {
                    next = Some(candidate);
                    break;
                }
            }
        }
        if let Some(peer) = next {
            let send = self.job_fetch_send(job_id, peer);
            return Effects {
                sends: vec![send],
                ..Effects::default()
            };
        }
        let job = self.jobs.remove(&job_id).expect("job exists");
        let code = if job.saw_busy && !job.saw_not_found {
            ErrorCode::BusyExhausted
        } else if job.saw_not_found || job.home.is_none() {
            // we are the home and hold nothing: the object is simply gone
            ErrorCode::NotFoundAnywhere
        } else {
            ErrorCode::UnreachableHome
        };
        Effects {
            completions: vec![(
                job.client,
                Message::error(
                    job.origin_request,
                    code,
                    format!("fetch of {} failed", job.token),
                ),
            )],
            ..Effects::default()
        }
    }

    // ------------------------------------------------------------------
    // responses and failures for our own outbound requests

    pub fn handle_response(&mut self, now: u64, request_id: u64, msg: &Message) -> Effects {
        match self.pending.remove(&request_id) {
            Some(Pending::Assent {
                token,
                peer,
                sent_rev,
            }) => self.assent_response(now, &token, &peer, sent_rev, msg),
            Some(Pending::JobFetch { job_id, peer }) => self.job_response(now, job_id, &peer, msg),
            None => Effects::none(),
        }
    }

    pub fn handle_send_failure(&mut self, now: u64, request_id: u64) -> Effects {
        match self.pending.remove(&request_id) {
            Some(Pending::Assent { token, peer, .. }) => {
                if let Some(ps) = self
                    .meta
                    .get_mut(&token)
                    .and_then(|m| m.peers.get_mut(&peer))
                {
                    ps.inflight = false;
                }
                self.schedule_flood_scan(now + self.config.flood_interval_ms);
                Effects::none()
            }
            Some(Pending::JobFetch { job_id, peer }) => {
                let Some(job) = self.jobs.get_mut(&job_id) else {
                    return Effects::none();
                };
                let is_home = job.home.as_ref() == Some(&peer);
                if is_home && job.home_attempts < self.config.fetch_retries {
                    // retry the home with doubling delay before any ditto
                    job.retry_at = Some(now + job.backoff_ms);
                    job.backoff_ms = job.backoff_ms.saturating_mul(2);
                    job.tried.remove(&peer);
                    Effects::none()
                } else {
                    self.job_advance(now, job_id)
                }
            }
            None => Effects::none(),
        }
    }

    fn assent_response(
        &mut self,
        now: u64,
        token: &Token,
        peer: &HomeLocation,
        sent_rev: u64,
        msg: &Message,
    ) -> Effects {
        if let Some(ps) = self.meta.get_mut(token).and_then(|m| m.peers.get_mut(peer)) {
            ps.inflight = false;
            ps.last_contact = now;
        }
        match &msg.body {
            Body::AssentResp { missing } => {
                let pre_rev = self.meta.get(token).map(|m| m.rev).unwrap_or(0);
                let gained = self
                    .with_entry_cluster(token, |c| c.absorb(missing.iter().cloned()))
                    .unwrap_or_default();
                let meta = self.meta.entry(token.clone()).or_default();
                if !gained.is_empty() {
                    meta.rev += 1;
                }
                // the peer holds the union of the exchange; when nothing
                // changed here since the send, that is exactly our current
                // state, otherwise only what the sample covered
                let harmonized = if pre_rev == sent_rev {
                    meta.rev
                } else {
                    sent_rev
                };
                if let Some(ps) = meta.peers.get_mut(peer) {
                    ps.harmonized_rev = ps.harmonized_rev.max(harmonized);
                }
                if !gained.is_empty() {
                    self.eval_policies_after_change(now, token)
                } else {
                    Effects::none()
                }
            }
            Body::Busy { .. } => {
                self.schedule_flood_scan(now + self.config.flood_interval_ms);
                Effects::none()
            }
            Body::Error { code, .. } => {
                if *code == ErrorCode::NotFound {
                    if let Some(ps) = self.meta.get_mut(token).and_then(|m| m.peers.get_mut(peer)) {
                        ps.unwilling = true;
                    }
                } else {
                    self.schedule_flood_scan(now + self.config.flood_interval_ms);
                }
                Effects::none()
            }
            _ => Effects::none(),
        }
    }

    fn job_response(
        &mut self,
        now: u64,
        job_id: u64,
        _peer: &HomeLocation,
        msg: &Message,
    ) -> Effects {
        if !self.jobs.contains_key(&job_id) {
            return Effects::none();
        }
        match &msg.body {
            Body::FetchResp {
                part: Some(part),
                ditto,
            } => {
                let ok = {
                    let job = &self.jobs[&job_id];
                    part.token == job.token
                        && part.payload_verifies()
                        && part
                            .payload
                            .as_ref()
                            .is_some_and(|p| p.encoded_len() <= self.config.max_payload_size)
                };
                if !ok {
                    // bogus or damaged response: do not cache, keep looking
                    let job = self.jobs.get_mut(&job_id).unwrap();
                    job.saw_not_found = true;
                    job.queue.extend(ditto.iter().cloned());
                    return self.job_advance(now, job_id);
                }
                let job = self.jobs.remove(&job_id).expect("job exists");
                let gained = self.ingest_fetched_part(part);
                let local = self.local_part(&job.token).unwrap_or_else(|| part.clone());
                let mut effects = Effects {
                    completions: vec![(
                        job.client,
                        Message::new(job.origin_request, Body::LocalResp { part: Some(local) }),
                    )],
                    ..Effects::default()
                };
                if !gained.is_empty() {
                    self.meta.entry(job.token.clone()).or_default().rev += 1;
                    effects.extend(self.eval_policies_after_change(now, &job.token));
                }
                effects
            }
            Body::FetchResp { part: None, ditto } => {
                let job = self.jobs.get_mut(&job_id).unwrap();
                job.saw_not_found = true;
                job.queue.extend(ditto.iter().cloned());
                self.job_advance(now, job_id)
            }
            Body::Busy { ditto } => {
                let job = self.jobs.get_mut(&job_id).unwrap();
                job.saw_busy = true;
                job.queue.extend(ditto.iter().cloned());
                self.job_advance(now, job_id)
            }
            Body::Error { .. } => {
                let job = self.jobs.get_mut(&job_id).unwrap();
                job.saw_not_found = true;
                self.job_advance(now, job_id)
            }
            _ => self.job_advance(now, job_id),
        }
    }

    /// Merges a remotely fetched part into local state. The proxy puts it in
    /// its cache unless the store already tracks the token.
    fn ingest_fetched_part(&mut self, part: &DistributedPart) -> Vec<Token> {
        let token = &part.token;
        if let Some(e) = self.store.get_mut(token) {
            if e.part.payload.is_none() {
                e.part.payload = part.payload.clone();
            }
            return e
                .part
                .cluster
                .absorb(part.cluster.members().iter().cloned());
        }
        if let Some(existing) = self.cache.get_mut(token) {
            if existing.payload.is_none() {
                existing.payload = part.payload.clone();
            }
            return existing
                .cluster
                .absorb(part.cluster.members().iter().cloned());
        }
        self.cache.insert(part.clone());
        Vec::new()
    }

    // ------------------------------------------------------------------
    // replication policy engine

    /// Re-evaluates active flooding policies after `changed` gained cluster
    /// members. Policies whose replication scope contains the changed token
    /// push assents to their peers.
    fn eval_policies_after_change(&mut self, now: u64, changed: &Token) -> Effects {
        let mut flooding: Vec<(Token, u32)> = self
            .meta
            .iter()
            .filter_map(|(t, m)| m.flooding_level().map(|lv| (t.clone(), lv)))
            .collect();
        flooding.sort();
        let mut effects = Effects::none();
        for (root, level) in flooding {
            let scope = self.scan(&root, level);
            if scope.cluster_in_scope(changed) {
                effects
                    .sends
                    .extend(self.flood_step(now, &root, level, &scope));
            }
        }
        effects
    }

    fn scan(&self, root: &Token, level: u32) -> SubgraphScope {
        subgraph_scan(root, level, |t| {
            self.store
                .get(t)
                .map(|e| e.part.cluster.clone())
                .or_else(|| self.cache.peek(t).map(|p| p.cluster.clone()))
        })
    }

    /// Peers that may take part in replicating `root`: everyone we have
    /// assented with on it, its home server, and the home servers of its
    /// cluster members.
    fn flood_peers(&self, root: &Token) -> Vec<HomeLocation> {
        let mut peers: BTreeSet<HomeLocation> = BTreeSet::new();
        peers.insert(root.home().clone());
        if let Some(m) = self.meta.get(root) {
            peers.extend(m.peers.keys().cloned());
        }
        if let Some(c) = self.entry_cluster(root) {
            for t in c.members() {
                peers.insert(t.home().clone());
            }
        }
        peers.remove(&self.addr);
        peers.into_iter().collect()
    }

    /// One flood step for a root policy: an assent to every known peer whose
    /// last harmonization is stale, up to the fanout, covering each in-scope
    /// token with a locally known cluster.
    fn flood_step(
        &mut self,
        now: u64,
        root: &Token,
        _level: u32,
        scope: &SubgraphScope,
    ) -> Vec<OutboundRequest> {
        let peers = self.flood_peers(root);
        let fanout = self.config.flood_fanout.unwrap_or(usize::MAX);
        let mut scoped: Vec<Token> = scope.cluster_tokens().cloned().collect();
        scoped.sort();
        let mut sends = Vec::new();
        let mut stale_left = false;
        let mut contacted = 0usize;
        for peer in peers {
            // the fanout bounds peers actually contacted in this step, so
            // later peers still get their turn on following steps
            if contacted >= fanout {
                stale_left = true;
                break;
            }
            let before = sends.len();
            for s in &scoped {
                if !self.holds(s) {
                    continue;
                }
                let rev = self.meta.get(s).map(|m| m.rev).unwrap_or(0);
                let state = self
                    .meta
                    .get(s)
                    .and_then(|m| m.peers.get(&peer))
                    .cloned()
                    .unwrap_or_default();
                // a peer we have never exchanged with counts as stale
                let never_exchanged = state.last_contact == 0 && state.last_attempt == 0;
                if state.unwilling || (!never_exchanged && state.harmonized_rev >= rev) {
                    continue;
                }
                if state.inflight {
                    stale_left = true;
                    continue;
                }
                // resend immediately when there is new information, otherwise
                // wait out the anti-stale interval
                if state.last_attempt > 0
                    && state.attempted_rev >= rev
                    && now < state.last_attempt + self.config.flood_interval_ms
                {
                    stale_left = true;
                    continue;
                }
                let body = self.build_assent(s, scope);
                let rid = self.fresh_id();
                self.pending.insert(
                    rid,
                    Pending::Assent {
                        token: s.clone(),
                        peer: peer.clone(),
                        sent_rev: rev,
                    },
                );
                let meta = self.meta.entry(s.clone()).or_default();
                let ps = meta.peers.entry(peer.clone()).or_default();
                ps.inflight = true;
                ps.last_attempt = now;
                ps.attempted_rev = rev;
                sends.push(OutboundRequest {
                    to: peer.clone(),
                    msg: Message::new(rid, body),
                });
            }
            if sends.len() > before {
                contacted += 1;
            }
        }
        if stale_left {
            self.schedule_flood_scan(now + self.config.flood_interval_ms);
        }
        sends
    }

    fn build_assent(&self, token: &Token, scope: &SubgraphScope) -> Body {
        let cluster = self.entry_cluster(token).unwrap_or_default();
        let mut attachments = Vec::new();
        for m in cluster.members() {
            if attachments.len() >= MAX_ASSENT_ATTACHMENTS {
                break;
            }
            if scope.payload_in_scope(m) {
                if let Some(part) = self.local_part(m) {
                    if let Some(sealed) = part.payload {
                        attachments.push((m.clone(), sealed));
                    }
                }
            }
        }
        Body::Assent {
            sender: self.addr.clone(),
            token: token.clone(),
            digest: cluster.digest(),
            sample_is_full: true,
            sample: cluster.members().to_vec(),
            attachments,
        }
    }

    fn schedule_flood_scan(&mut self, at: u64) {
        self.flood_scan_at = Some(self.flood_scan_at.map_or(at, |cur| cur.min(at)));
    }

    // ------------------------------------------------------------------
    // timers and cleanup

    /// Earliest time this node wants [`Self::on_timer`] called, if any.
    pub fn next_wakeup(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        let mut fold = |t: Option<u64>| {
            next = match (next, t) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        };
        fold(self.flood_scan_at);
        fold(self.jobs.values().filter_map(|j| j.retry_at).min());
        fold(self.store.next_removal(self.config.grace_period_ms));
        next
    }

    pub fn on_timer(&mut self, now: u64) -> Effects {
        let mut effects = Effects::none();

        // due home retries, in a stable order so traces stay reproducible
        let mut due: Vec<u64> = self
            .jobs
            .iter()
            .filter(|(_, j)| j.retry_at.is_some_and(|t| t <= now))
            .map(|(id, _)| *id)
            .collect();
        due.sort_unstable();
        for job_id in due {
            let home = {
                let job = self.jobs.get_mut(&job_id).unwrap();
                job.retry_at = None;
                job.home_attempts += 1;
                job.home.clone()
            };
            if let Some(home) = home {
                let send = self.job_fetch_send(job_id, home);
                effects.sends.push(send);
            } else {
                effects.extend(self.job_advance(now, job_id));
            }
        }

        // anti-stale flood scan
        if self.flood_scan_at.is_some_and(|t| t <= now) {
            self.flood_scan_at = None;
            let mut flooding: Vec<(Token, u32)> = self
                .meta
                .iter()
                .filter_map(|(t, m)| m.flooding_level().map(|lv| (t.clone(), lv)))
                .collect();
            flooding.sort();
            for (root, level) in flooding {
                let scope = self.scan(&root, level);
                let sends = self.flood_step(now, &root, level, &scope);
                effects.sends.extend(sends);
            }
        }

        self.gc_sweep(now);
        effects
    }

    /// Store sweep: entries leave only after max(expire, sustain) plus grace.
    /// The cache is capacity-managed and untouched here.
    pub fn gc_sweep(&mut self, now: u64) -> Vec<Token> {
        let removed = self.store.remove_due(now, self.config.grace_period_ms);
        for t in &removed {
            if !self.cache.contains(t) {
                self.meta.remove(t);
            }
        }
        removed
    }
}

impl TokenMeta {
    fn flooding_level(&self) -> Option<u32> {
        self.policies.iter().find_map(|p| match p {
            ReplicationPolicy::Flooding { level } => Some(*level),
            _ => None,
        })
    }
}
