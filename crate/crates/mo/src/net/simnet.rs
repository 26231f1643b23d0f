//! Deterministic discrete-event network simulator.
//!
//! Servers are plain [`ServerNode`] state machines; the simulator owns the
//! clock, the event queue, per-link latency and drop behavior, partitions,
//! and the trace. Identical seed and script yield a bit-identical trace.
//!
//! Scripts are line oriented:
//!
//! ```text
//! servers alice bob clare
//! config busy_threshold=4
//! at 0   alice create M 600000 payload=news-board
//! at 100 bob   fetch M
//! at 300 bob   replicate M flooding 0
//! at 410 bob   add M N1
//! at 500 alice expect cluster M = N1
//! at 500 alice expect knows = bob
//! at 900 bob   expect has N1
//! at 950 -     snapshot
//! end 2000
//! ```

use crate::config::ServerConfig;
use crate::mobject::MicroObject;
use crate::net::message::{self, Body, Message, ReplicateOp};
use crate::security::SecurityPolicy;
use crate::server::{ClientId, Effects, OutboundRequest, ServerNode};
use crate::token::{ExpireDate, HomeLocation, Token};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn bad(line: usize, reason: impl Into<String>) -> ScriptError {
    ScriptError::Malformed {
        line,
        reason: reason.into(),
    }
}

/// The built-in three-server dissemination scenario: a shared board `M` under
/// flooding, one item added at `bob`, one at `clare`, converging to all
/// copies holding both tokens with the peer-knowledge graph complete.
pub const ABC_SCRIPT: &str = "\
servers alice bob clare
# Alice creates the shared board M; Bob and Clare retrieve their copies.
at 0    alice create M 600000 payload=news-board
at 100  bob   fetch M
at 200  clare fetch M
# state (a): only the home links encoded in M's token are known
at 250  alice expect knows = empty
at 250  bob   expect knows = alice
at 250  clare expect knows = alice
# everyone opts into flooding; activation announces interest to known peers
at 300  alice replicate M flooding 0
at 310  bob   replicate M flooding 0
at 320  clare replicate M flooding 0
at 390  alice expect knows = bob,clare
# (b) Bob creates N1 and clusters it into his copy of M
at 400  bob   create N1 500000 payload=item-one
at 410  bob   add M N1
at 415  bob   expect cluster M = N1
at 415  alice expect cluster M = empty
# (c) Bob's flood reaches Alice, who forwards to the other willing peer
at 500  alice expect cluster M = N1
at 500  clare expect cluster M = N1
# (d) Clare creates N2 and clusters it into her copy
at 600  clare create N2 500000 payload=item-two
at 610  clare add M N2
at 615  clare expect cluster M = N1,N2
at 615  alice expect cluster M = N1
# (e) Clare's flood reaches Alice
at 700  alice expect cluster M = N1,N2
at 700  alice expect knows = bob,clare
# (f) Alice floods the union to Bob, who learns about Clare via N2's home
at 800  bob   expect cluster M = N1,N2
at 800  bob   expect knows = alice,clare
# (g) Bob's flood reaches Clare directly; the graph is complete
at 900  clare expect knows = alice,bob
at 900  alice expect cluster M = N1,N2
at 900  bob   expect cluster M = N1,N2
at 900  clare expect cluster M = N1,N2
at 950  alice expect has M
end 2000
";

#[derive(Debug, Clone)]
enum Check {
    Cluster { name: String, members: Vec<String> },
    Knows { actors: Vec<String> },
    Has { name: String },
    Lacks { name: String },
}

#[derive(Debug, Clone)]
enum Action {
    Create {
        actor: String,
        name: String,
        expire_ms: u64,
        payload: Vec<u8>,
    },
    Fetch {
        actor: String,
        name: String,
    },
    Add {
        actor: String,
        parent: String,
        child: String,
    },
    Replicate {
        actor: String,
        name: String,
        op: ReplicateOp,
    },
    Drop {
        a: String,
        b: String,
        prob: f64,
    },
    Partition {
        groups: Vec<BTreeSet<String>>,
    },
    Heal,
    Expect {
        actor: String,
        check: Check,
    },
    Snapshot,
}

#[derive(Debug, Clone)]
pub struct Script {
    servers: Vec<String>,
    config_overrides: Vec<(String, String)>,
    actions: Vec<(u64, usize, Action)>,
    end_ms: Option<u64>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut script = Script {
            servers: Vec::new(),
            config_overrides: Vec::new(),
            actions: Vec::new(),
            end_ms: None,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "servers" => {
                    if words.len() < 2 {
                        return Err(bad(line_no, "servers needs at least one name"));
                    }
                    script
                        .servers
                        .extend(words[1..].iter().map(|s| s.to_string()));
                }
                "config" => {
                    let rest = line["config".len()..].trim();
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| bad(line_no, "config needs key=value"))?;
                    // validate against a throwaway config so errors surface here
                    let mut probe = ServerConfig::with_listen(
                        HomeLocation::new("probe", 1).unwrap(),
                        HomeLocation::new("probe", 2).unwrap(),
                    );
                    probe
                        .apply(k.trim(), v.trim())
                        .map_err(|e| bad(line_no, e.to_string()))?;
                    script
                        .config_overrides
                        .push((k.trim().to_string(), v.trim().to_string()));
                }
                "end" => {
                    let ms: u64 = words
                        .get(1)
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| bad(line_no, "end needs a time"))?;
                    script.end_ms = Some(ms);
                }
                "at" => {
                    let ms: u64 = words
                        .get(1)
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| bad(line_no, "at needs a time"))?;
                    let actor = words.get(2).ok_or_else(|| bad(line_no, "missing actor"))?;
                    let action = Self::parse_action(line_no, actor, &words[3..])?;
                    script.actions.push((ms, line_no, action));
                }
                other => return Err(bad(line_no, format!("unknown directive {other}"))),
            }
        }
        script.actions.sort_by_key(|(ms, line, _)| (*ms, *line));
        Ok(script)
    }

    fn parse_action(line: usize, actor: &str, words: &[&str]) -> Result<Action, ScriptError> {
        let verb = words.first().ok_or_else(|| bad(line, "missing action"))?;
        let actor = actor.to_string();
        match *verb {
            "create" => {
                let name = words
                    .get(1)
                    .ok_or_else(|| bad(line, "create needs a name"))?;
                let expire_ms: u64 = words
                    .get(2)
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| bad(line, "create needs an expire time"))?;
                let payload = words
                    .get(3)
                    .map(|w| {
                        w.strip_prefix("payload=")
                            .map(|p| p.as_bytes().to_vec())
                            .ok_or_else(|| bad(line, "expected payload=<text>"))
                    })
                    .transpose()?
                    .unwrap_or_default();
                Ok(Action::Create {
                    actor,
                    name: name.to_string(),
                    expire_ms,
                    payload,
                })
            }
            "fetch" => Ok(Action::Fetch {
                actor,
                name: words
                    .get(1)
                    .ok_or_else(|| bad(line, "fetch needs a name"))?
                    .to_string(),
            }),
            "add" => Ok(Action::Add {
                actor,
                parent: words
                    .get(1)
                    .ok_or_else(|| bad(line, "add needs a parent"))?
                    .to_string(),
                child: words
                    .get(2)
                    .ok_or_else(|| bad(line, "add needs a child"))?
                    .to_string(),
            }),
            "replicate" => {
                let name = words
                    .get(1)
                    .ok_or_else(|| bad(line, "replicate needs a name"))?;
                let op = match words.get(2).copied() {
                    Some("flooding") => ReplicateOp::StartFlooding {
                        level: words
                            .get(3)
                            .and_then(|w| w.parse().ok())
                            .ok_or_else(|| bad(line, "flooding needs a level"))?,
                    },
                    Some("sustain") => ReplicateOp::StartSustain {
                        until_ms: words
                            .get(3)
                            .and_then(|w| w.parse().ok())
                            .ok_or_else(|| bad(line, "sustain needs a time"))?,
                    },
                    Some("stop") => ReplicateOp::StopFlooding,
                    _ => return Err(bad(line, "replicate needs flooding|sustain|stop")),
                };
                Ok(Action::Replicate {
                    actor,
                    name: name.to_string(),
                    op,
                })
            }
            "drop" => Ok(Action::Drop {
                a: words
                    .get(1)
                    .ok_or_else(|| bad(line, "drop needs two servers"))?
                    .to_string(),
                b: words
                    .get(2)
                    .ok_or_else(|| bad(line, "drop needs two servers"))?
                    .to_string(),
                prob: words
                    .get(3)
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| bad(line, "drop needs a probability"))?,
            }),
            "partition" => {
                let spec = words
                    .get(1)
                    .ok_or_else(|| bad(line, "partition needs groups"))?;
                let groups = spec
                    .split('|')
                    .map(|g| g.split(',').map(|s| s.to_string()).collect::<BTreeSet<_>>())
                    .collect();
                Ok(Action::Partition { groups })
            }
            "heal" => Ok(Action::Heal),
            "snapshot" => Ok(Action::Snapshot),
            "expect" => {
                let what = words
                    .get(1)
                    .ok_or_else(|| bad(line, "expect needs a check"))?;
                let check = match *what {
                    "cluster" => {
                        let name = words
                            .get(2)
                            .ok_or_else(|| bad(line, "expect cluster needs a name"))?;
                        if words.get(3) != Some(&"=") {
                            return Err(bad(line, "expect cluster needs ="));
                        }
                        let members = parse_name_list(words.get(4).copied());
                        Check::Cluster {
                            name: name.to_string(),
                            members,
                        }
                    }
                    "knows" => {
                        if words.get(2) != Some(&"=") {
                            return Err(bad(line, "expect knows needs ="));
                        }
                        Check::Knows {
                            actors: parse_name_list(words.get(3).copied()),
                        }
                    }
                    "has" => Check::Has {
                        name: words
                            .get(2)
                            .ok_or_else(|| bad(line, "expect has needs a name"))?
                            .to_string(),
                    },
                    "lacks" => Check::Lacks {
                        name: words
                            .get(2)
                            .ok_or_else(|| bad(line, "expect lacks needs a name"))?
                            .to_string(),
                    },
                    other => return Err(bad(line, format!("unknown expectation {other}"))),
                };
                Ok(Action::Expect { actor, check })
            }
            other => Err(bad(line, format!("unknown action {other}"))),
        }
    }
}

fn parse_name_list(word: Option<&str>) -> Vec<String> {
    match word {
        None | Some("empty") => Vec::new(),
        Some(list) => list.split(',').map(|s| s.to_string()).collect(),
    }
}

/// What one simulation run produced.
#[derive(Debug, Default)]
pub struct SimOutcome {
    /// One line per delivered message: `<ms> <from> <to> <type> <token-prefix>`.
    pub trace: Vec<String>,
    /// Failed expectations and failed scripted fetches.
    pub failures: Vec<String>,
    /// Rendered server-state snapshots at scripted checkpoints.
    pub snapshots: Vec<String>,
}

impl SimOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn trace_text(&self) -> String {
        let mut s = self.trace.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

#[derive(Debug)]
enum EventKind {
    Action(usize),
    Request {
        from: HomeLocation,
        to: HomeLocation,
        msg: Message,
    },
    Response {
        from: HomeLocation,
        to: HomeLocation,
        msg: Message,
    },
    Failure {
        node: HomeLocation,
        request_id: u64,
    },
    Timer {
        node: HomeLocation,
    },
}

struct Event {
    at: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Deterministic simulation of a set of MO servers under a script.
pub struct SimNet {
    nodes: BTreeMap<HomeLocation, ServerNode>,
    actor_of: BTreeMap<HomeLocation, String>,
    addr_of: BTreeMap<String, HomeLocation>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    rng: ChaCha8Rng,
    drop_prob: HashMap<(HomeLocation, HomeLocation), f64>,
    partitions: Vec<BTreeSet<HomeLocation>>,
    latency_base: u64,
    latency_jitter: u64,
    horizon: u64,
    script: Script,
    tokens: HashMap<String, Token>,
    /// Outstanding scripted fetches: client id to (actor, object name).
    waiting_fetch: HashMap<ClientId, (String, String)>,
    next_client: ClientId,
    timer_scheduled: HashMap<HomeLocation, u64>,
    outcome: SimOutcome,
}

impl SimNet {
    pub fn new(script: Script, seed: u64) -> SimNet {
        let mut nodes = BTreeMap::new();
        let mut actor_of = BTreeMap::new();
        let mut addr_of = BTreeMap::new();
        for name in &script.servers {
            let addr = HomeLocation::new(name, 7000).expect("valid actor name");
            let local = HomeLocation::new(name, 7001).expect("valid actor name");
            let mut config = ServerConfig::with_listen(addr.clone(), local);
            for (k, v) in &script.config_overrides {
                // validated at parse time
                let _ = config.apply(k, v);
            }
            nodes.insert(addr.clone(), ServerNode::new(config));
            actor_of.insert(addr.clone(), name.clone());
            addr_of.insert(name.clone(), addr);
        }
        let last_action = script.actions.last().map(|(ms, _, _)| *ms).unwrap_or(0);
        let horizon = script.end_ms.unwrap_or(last_action + 60_000);
        let mut queue = BinaryHeap::new();
        let mut seq = 0;
        for (i, (ms, _, _)) in script.actions.iter().enumerate() {
            queue.push(Reverse(Event {
                at: *ms,
                seq,
                kind: EventKind::Action(i),
            }));
            seq += 1;
        }
        SimNet {
            nodes,
            actor_of,
            addr_of,
            queue,
            seq,
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drop_prob: HashMap::new(),
            partitions: Vec::new(),
            latency_base: 10,
            latency_jitter: 5,
            horizon,
            script,
            tokens: HashMap::new(),
            waiting_fetch: HashMap::new(),
            next_client: 1,
            timer_scheduled: HashMap::new(),
            outcome: SimOutcome::default(),
        }
    }

    pub fn node(&self, actor: &str) -> Option<&ServerNode> {
        self.addr_of.get(actor).and_then(|a| self.nodes.get(a))
    }

    pub fn token_of(&self, name: &str) -> Option<&Token> {
        self.tokens.get(name)
    }

    /// Runs one step; false when the queue is exhausted.
    fn step(&mut self) -> bool {
        let Some(Reverse(event)) = self.queue.pop() else {
            return false;
        };
        if event.at > self.horizon {
            return true;
        }
        self.now = event.at;
        match event.kind {
            EventKind::Action(i) => self.run_action(i),
            EventKind::Request { from, to, msg } => {
                self.trace_line(&from, &to, &msg);
                let fx = self
                    .nodes
                    .get_mut(&to)
                    .map(|n| n.handle_remote(self.now, &msg))
                    .unwrap_or_default();
                let reply = fx.reply.clone();
                self.apply_effects(&to, fx);
                if let Some(reply) = reply {
                    self.send_response(&to, &from, reply);
                }
                self.schedule_timer(&to);
            }
            EventKind::Response { from, to, msg } => {
                self.trace_line(&from, &to, &msg);
                let fx = self
                    .nodes
                    .get_mut(&to)
                    .map(|n| n.handle_response(self.now, msg.request_id, &msg))
                    .unwrap_or_default();
                self.apply_effects(&to, fx);
                self.schedule_timer(&to);
            }
            EventKind::Failure { node, request_id } => {
                let fx = self
                    .nodes
                    .get_mut(&node)
                    .map(|n| n.handle_send_failure(self.now, request_id))
                    .unwrap_or_default();
                self.apply_effects(&node, fx);
                self.schedule_timer(&node);
            }
            EventKind::Timer { node } => {
                self.timer_scheduled.remove(&node);
                let fx = self
                    .nodes
                    .get_mut(&node)
                    .map(|n| n.on_timer(self.now))
                    .unwrap_or_default();
                self.apply_effects(&node, fx);
                self.schedule_timer(&node);
            }
        }
        true
    }

    /// Runs to quiescence or the horizon and returns the outcome.
    pub fn run(mut self) -> SimOutcome {
        while self.step() {}
        self.outcome
    }

    /// Like [`Self::run`] but keeps the simulator alive for inspection.
    pub fn run_in_place(&mut self) {
        while self.step() {}
    }

    pub fn outcome(&self) -> &SimOutcome {
        &self.outcome
    }

    fn fail(&mut self, text: String) {
        self.outcome
            .failures
            .push(format!("{}ms: {}", self.now, text));
    }

    fn run_action(&mut self, index: usize) {
        let (_, line, action) = self.script.actions[index].clone();
        match action {
            Action::Create {
                actor,
                name,
                expire_ms,
                payload,
            } => {
                let Some(addr) = self.addr_of.get(&actor).cloned() else {
                    return self.fail(format!("line {line}: unknown actor {actor}"));
                };
                let expire = match ExpireDate::from_millis(expire_ms) {
                    Ok(e) => e,
                    Err(e) => return self.fail(format!("line {line}: {e}")),
                };
                let mo = match MicroObject::new(
                    addr.clone(),
                    expire,
                    &payload,
                    SecurityPolicy::none(),
                    SecurityPolicy::none(),
                ) {
                    Ok(mo) => mo,
                    Err(e) => return self.fail(format!("line {line}: {e}")),
                };
                self.tokens.insert(name.clone(), mo.token().clone());
                let msg = Message::new(
                    line as u64,
                    Body::Adopt {
                        part: mo.part().clone(),
                    },
                );
                self.local_call(&actor, &addr, &msg, None);
            }
            Action::Fetch { actor, name } => {
                let Some(addr) = self.addr_of.get(&actor).cloned() else {
                    return self.fail(format!("line {line}: unknown actor {actor}"));
                };
                let Some(token) = self.tokens.get(&name).cloned() else {
                    return self.fail(format!("line {line}: unknown object {name}"));
                };
                let msg = Message::new(line as u64, Body::RequestPayload { token });
                self.local_call(&actor, &addr, &msg, Some(name));
            }
            Action::Add {
                actor,
                parent,
                child,
            } => {
                let Some(addr) = self.addr_of.get(&actor).cloned() else {
                    return self.fail(format!("line {line}: unknown actor {actor}"));
                };
                let (Some(parent_t), Some(child_t)) = (
                    self.tokens.get(&parent).cloned(),
                    self.tokens.get(&child).cloned(),
                ) else {
                    return self.fail(format!("line {line}: unknown object"));
                };
                let msg = Message::new(
                    line as u64,
                    Body::Update {
                        token: parent_t,
                        add: vec![child_t],
                    },
                );
                self.local_call(&actor, &addr, &msg, None);
            }
            Action::Replicate { actor, name, op } => {
                let Some(addr) = self.addr_of.get(&actor).cloned() else {
                    return self.fail(format!("line {line}: unknown actor {actor}"));
                };
                let Some(token) = self.tokens.get(&name).cloned() else {
                    return self.fail(format!("line {line}: unknown object {name}"));
                };
                let msg = Message::new(line as u64, Body::Replicate { token, op });
                self.local_call(&actor, &addr, &msg, None);
            }
            Action::Drop { a, b, prob } => {
                if let (Some(a), Some(b)) =
                    (self.addr_of.get(&a).cloned(), self.addr_of.get(&b).cloned())
                {
                    self.drop_prob.insert((a.clone(), b.clone()), prob);
                    self.drop_prob.insert((b, a), prob);
                }
            }
            Action::Partition { groups } => {
                self.partitions = groups
                    .iter()
                    .map(|g| {
                        g.iter()
                            .filter_map(|name| self.addr_of.get(name).cloned())
                            .collect()
                    })
                    .collect();
            }
            Action::Heal => {
                self.partitions.clear();
                self.drop_prob.clear();
            }
            Action::Snapshot => self.snapshot(),
            Action::Expect { actor, check } => self.run_expect(line, &actor, &check),
        }
    }

    fn local_call(
        &mut self,
        actor: &str,
        addr: &HomeLocation,
        msg: &Message,
        fetch_of: Option<String>,
    ) {
        let client = self.next_client;
        self.next_client += 1;
        if let Some(name) = fetch_of {
            self.waiting_fetch.insert(client, (actor.to_string(), name));
        }
        let fx = self
            .nodes
            .get_mut(addr)
            .map(|n| n.handle_local(self.now, client, msg))
            .unwrap_or_default();
        if let Some(reply) = &fx.reply {
            self.settle_local_reply(client, reply.clone());
        }
        self.apply_effects(addr, fx);
        self.schedule_timer(addr);
    }

    fn settle_local_reply(&mut self, client: ClientId, reply: Message) {
        let fetch = self.waiting_fetch.remove(&client);
        if let Body::Error { code, message } = &reply.body {
            match fetch {
                Some((actor, name)) => self.fail(format!(
                    "fetch of {name} at {actor} failed: {code:?} {message}"
                )),
                None => self.fail(format!("local request failed: {code:?} {message}")),
            }
        }
    }

    fn apply_effects(&mut self, node: &HomeLocation, fx: Effects) {
        for (client, msg) in fx.completions {
            self.settle_local_reply(client, msg);
        }
        for send in fx.sends {
            self.send_request(node, send);
        }
    }

    fn rto_of(&self, node: &HomeLocation) -> u64 {
        self.nodes
            .get(node)
            .map(|n| n.config().rto_ms)
            .unwrap_or(1000)
    }

    fn link_delivers(&mut self, from: &HomeLocation, to: &HomeLocation) -> bool {
        if !self.nodes.contains_key(to) {
            return false;
        }
        if !self.partitions.is_empty() {
            let ga = self.partitions.iter().position(|g| g.contains(from));
            let gb = self.partitions.iter().position(|g| g.contains(to));
            if ga != gb {
                return false;
            }
        }
        let p = *self
            .drop_prob
            .get(&(from.clone(), to.clone()))
            .unwrap_or(&0.0);
        !(p > 0.0 && self.rng.random_range(0.0..1.0) < p)
    }

    fn latency(&mut self) -> u64 {
        self.latency_base + self.rng.random_range(0..=self.latency_jitter)
    }

    fn push(&mut self, at: u64, kind: EventKind) {
        if at > self.horizon {
            return;
        }
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Event { at, seq, kind }));
    }

    fn send_request(&mut self, from: &HomeLocation, send: OutboundRequest) {
        let OutboundRequest { to, msg } = send;
        if self.link_delivers(from, &to) {
            let at = self.now + self.latency();
            self.push(
                at,
                EventKind::Request {
                    from: from.clone(),
                    to,
                    msg,
                },
            );
        } else {
            let at = self.now + self.rto_of(from);
            self.push(
                at,
                EventKind::Failure {
                    node: from.clone(),
                    request_id: msg.request_id,
                },
            );
        }
    }

    fn send_response(&mut self, from: &HomeLocation, to: &HomeLocation, msg: Message) {
        if self.link_delivers(from, to) {
            let at = self.now + self.latency();
            self.push(
                at,
                EventKind::Response {
                    from: from.clone(),
                    to: to.clone(),
                    msg,
                },
            );
        } else {
            // requester times out waiting for the lost response
            let at = self.now + self.rto_of(to);
            self.push(
                at,
                EventKind::Failure {
                    node: to.clone(),
                    request_id: msg.request_id,
                },
            );
        }
    }

    fn schedule_timer(&mut self, node: &HomeLocation) {
        let Some(next) = self.nodes.get(node).and_then(|n| n.next_wakeup()) else {
            return;
        };
        let at = next.max(self.now);
        if self.timer_scheduled.get(node).is_some_and(|t| *t <= at) {
            return;
        }
        self.timer_scheduled.insert(node.clone(), at);
        self.push(at, EventKind::Timer { node: node.clone() });
    }

    fn trace_line(&mut self, from: &HomeLocation, to: &HomeLocation, msg: &Message) {
        let token = message::message_token(&msg.body)
            .map(|t| t.hash_prefix())
            .unwrap_or_else(|| "-".into());
        let from = self
            .actor_of
            .get(from)
            .cloned()
            .unwrap_or_else(|| from.to_string());
        let to = self
            .actor_of
            .get(to)
            .cloned()
            .unwrap_or_else(|| to.to_string());
        let kind = message::type_name(msg.body.type_byte());
        self.outcome
            .trace
            .push(format!("{} {} {} {} {}", self.now, from, to, kind, token));
    }

    fn snapshot(&mut self) {
        let mut lines = vec![format!("snapshot @{}ms", self.now)];
        let named: BTreeMap<&String, &Token> = self.tokens.iter().collect();
        for (addr, node) in &self.nodes {
            let actor = &self.actor_of[addr];
            let mut objects: Vec<String> = Vec::new();
            for (name, token) in &named {
                if let Some(cluster) = node.local_cluster(token) {
                    let members: Vec<String> = cluster
                        .members()
                        .iter()
                        .map(|m| self.name_of_token(m).unwrap_or_else(|| m.hash_prefix()))
                        .collect();
                    let payload = if node.has_payload(token) { "+" } else { "-" };
                    objects.push(format!("{name}{payload}{{{}}}", members.join(",")));
                }
            }
            let knows: Vec<String> = node
                .known_peers()
                .iter()
                .map(|p| {
                    self.actor_of
                        .get(p)
                        .cloned()
                        .unwrap_or_else(|| p.to_string())
                })
                .collect();
            lines.push(format!(
                "  {actor}: objects=[{}] knows=[{}]",
                objects.join(" "),
                knows.join(",")
            ));
        }
        self.outcome.snapshots.push(lines.join("\n"));
    }

    fn name_of_token(&self, token: &Token) -> Option<String> {
        self.tokens
            .iter()
            .find(|(_, t)| *t == token)
            .map(|(n, _)| n.clone())
    }

    fn run_expect(&mut self, line: usize, actor: &str, check: &Check) {
        let Some(addr) = self.addr_of.get(actor).cloned() else {
            return self.fail(format!("line {line}: unknown actor {actor}"));
        };
        let node = &self.nodes[&addr];
        match check {
            Check::Cluster { name, members } => {
                let Some(token) = self.tokens.get(name) else {
                    return self.fail(format!("line {line}: unknown object {name}"));
                };
                let Some(cluster) = node.local_cluster(token) else {
                    return self.fail(format!("line {line}: {actor} holds no copy of {name}"));
                };
                let mut expected: Vec<Token> = Vec::new();
                for m in members {
                    match self.tokens.get(m) {
                        Some(t) => expected.push(t.clone()),
                        None => return self.fail(format!("line {line}: unknown object {m}")),
                    }
                }
                expected.sort();
                if cluster.members() != expected {
                    let got: Vec<String> = cluster
                        .members()
                        .iter()
                        .map(|t| self.name_of_token(t).unwrap_or_else(|| t.hash_prefix()))
                        .collect();
                    self.fail(format!(
                        "line {line}: {actor} cluster {name} = [{}], expected [{}]",
                        got.join(","),
                        members.join(",")
                    ));
                }
            }
            Check::Knows { actors } => {
                let known = node.known_peers();
                let mut expected = BTreeSet::new();
                for a in actors {
                    match self.addr_of.get(a) {
                        Some(addr) => {
                            expected.insert(addr.clone());
                        }
                        None => return self.fail(format!("line {line}: unknown actor {a}")),
                    }
                }
                if known != expected {
                    let got: Vec<String> = known
                        .iter()
                        .map(|p| {
                            self.actor_of
                                .get(p)
                                .cloned()
                                .unwrap_or_else(|| p.to_string())
                        })
                        .collect();
                    self.fail(format!(
                        "line {line}: {actor} knows [{}], expected [{}]",
                        got.join(","),
                        actors.join(",")
                    ));
                }
            }
            Check::Has { name } => {
                let Some(token) = self.tokens.get(name) else {
                    return self.fail(format!("line {line}: unknown object {name}"));
                };
                if !node.has_payload(token) {
                    self.fail(format!("line {line}: {actor} lacks the payload of {name}"));
                }
            }
            Check::Lacks { name } => {
                let Some(token) = self.tokens.get(name) else {
                    return self.fail(format!("line {line}: unknown object {name}"));
                };
                if node.has_payload(token) {
                    self.fail(format!("line {line}: {actor} unexpectedly holds {name}"));
                }
            }
        }
    }
}

/// Parses and runs a script with the given seed.
pub fn run_script(text: &str, seed: u64) -> Result<SimOutcome, ScriptError> {
    let script = Script::parse(text)?;
    Ok(SimNet::new(script, seed).run())
}
