//! Distributed application objects (DAOs): application-level mutable objects
//! realized as a single micro object rooting a graph of further objects.
//!
//! The replication level bounds how far into the subgraph a policy extends.
//! Level accounting: the root's cluster is level 0; crossing from a cluster
//! to a member object (its payload) costs one; crossing from an object to its
//! cluster costs one. So members of the root's cluster have their payloads at
//! level 1 and their clusters at level 2, their members' payloads at level 3,
//! and so on.

use crate::cluster::Cluster;
use crate::libserver::{MoHandle, Session, SessionError};
use crate::security::SecurityPolicy;
use crate::token::{ExpireDate, Token};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

/// Parts of a DAO subgraph within a replication level, resolved against
/// locally known clusters only. Unknown branches are skipped, not fetched.
#[derive(Debug, Default)]
pub struct SubgraphScope {
    cluster_level: HashMap<Token, u32>,
    payload_level: HashMap<Token, u32>,
}

impl SubgraphScope {
    pub fn cluster_in_scope(&self, token: &Token) -> bool {
        self.cluster_level.contains_key(token)
    }

    pub fn payload_in_scope(&self, token: &Token) -> bool {
        self.payload_level.contains_key(token)
    }

    /// Tokens whose cluster participates, i.e. candidates for assent.
    pub fn cluster_tokens(&self) -> impl Iterator<Item = &Token> {
        self.cluster_level.keys()
    }

    /// The public shape: one entry per token in scope, flagged when its
    /// payload should be replicated too.
    pub fn entries(&self) -> Vec<(Token, bool)> {
        let mut out: Vec<(Token, bool)> = Vec::new();
        for t in self.cluster_level.keys() {
            out.push((t.clone(), self.payload_level.contains_key(t)));
        }
        for t in self.payload_level.keys() {
            if !self.cluster_level.contains_key(t) {
                out.push((t.clone(), true));
            }
        }
        out.sort();
        out
    }
}

/// Walks the locally known graph from `root` down to `level`, assigning the
/// scope each part falls in. `lookup` resolves a token to its locally known
/// cluster; `None` skips the branch.
pub fn subgraph_scan(
    root: &Token,
    level: u32,
    lookup: impl Fn(&Token) -> Option<Cluster>,
) -> SubgraphScope {
    let mut scope = SubgraphScope::default();
    scope.cluster_level.insert(root.clone(), 0);
    let mut queue: VecDeque<(Token, u32)> = VecDeque::new();
    queue.push_back((root.clone(), 0));
    while let Some((token, cluster_lv)) = queue.pop_front() {
        let Some(cluster) = lookup(&token) else {
            continue;
        };
        let member_payload_lv = cluster_lv + 1;
        let member_cluster_lv = cluster_lv + 2;
        for member in cluster.members() {
            if member_payload_lv <= level {
                let e = scope
                    .payload_level
                    .entry(member.clone())
                    .or_insert(member_payload_lv);
                *e = (*e).min(member_payload_lv);
            }
            if member_cluster_lv <= level {
                let prev = scope.cluster_level.get(member).copied();
                if prev.is_none_or(|p| member_cluster_lv < p) {
                    scope
                        .cluster_level
                        .insert(member.clone(), member_cluster_lv);
                    queue.push_back((member.clone(), member_cluster_lv));
                }
            }
        }
    }
    scope
}

#[derive(Debug, Error)]
pub enum DaoError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("block index {index} out of range ({count} blocks)")]
    BlockIndexOutOfRange { index: usize, count: usize },
    #[error("cannot compute an expire date later than every current member")]
    ExpireOrderViolation,
    #[error("content unreachable: {0}")]
    UnreachableContent(String),
}

/// Lifetime granted to freshly written blocks and content objects.
const DEFAULT_DAO_LIFETIME_MS: u64 = 30 * 24 * 3600 * 1000;

/// A distributed file realized purely from clusters: the file object's
/// cluster lists block objects ordered by expire date; each block's content
/// is the payload of the last content object in its cluster, again by expire
/// date. The file is fully mutable even though every object involved is
/// immutable: writes append a fresh content object with a later expire date.
pub struct FileDao {
    root: MoHandle,
    psec: SecurityPolicy,
    csec: SecurityPolicy,
}

impl FileDao {
    /// Creates an empty file homed at the session's server.
    pub fn create(
        session: &Session,
        expire: ExpireDate,
        psec: SecurityPolicy,
        csec: SecurityPolicy,
    ) -> Result<FileDao, DaoError> {
        let root = session.create_new(expire, b"file", psec.clone(), csec.clone())?;
        Ok(FileDao { root, psec, csec })
    }

    /// Opens a file by its root token. A file DAO is a single micro object:
    /// the token is the whole identity.
    pub fn open(
        session: &Session,
        token: Token,
        psec: SecurityPolicy,
        csec: SecurityPolicy,
    ) -> FileDao {
        let root = session.from_token(token, psec.clone(), csec.clone());
        FileDao { root, psec, csec }
    }

    pub fn token(&self) -> Token {
        self.root.token()
    }

    pub fn root(&self) -> &MoHandle {
        &self.root
    }

    fn node(&self, session: &Session, token: Token) -> MoHandle {
        session.from_token(token, self.psec.clone(), self.csec.clone())
    }

    /// Pulls the freshest local-server state for a handle; fetches remotely
    /// through the server only when it holds nothing at all.
    fn ensure_state(&self, session: &Session, handle: &MoHandle) -> Result<(), DaoError> {
        if !handle.sync_local()? {
            // not held locally: a payload fetch retrieves the whole
            // distributed part and caches it at the server
            handle
                .payload()
                .map_err(|e| DaoError::UnreachableContent(e.to_string()))?;
        }
        let _ = session;
        Ok(())
    }

    /// Current block tokens in expire order.
    pub fn blocks(&self, session: &Session) -> Result<Vec<Token>, DaoError> {
        self.ensure_state(session, &self.root)?;
        Ok(self.root.cluster().members().to_vec())
    }

    /// The file content: the concatenation of every block's content, blocks
    /// ordered by expire date. A block's content is the payload of the last
    /// content object in its cluster; a block with an empty cluster
    /// contributes nothing.
    pub fn read(&self, session: &Session) -> Result<Vec<u8>, DaoError> {
        let mut out = Vec::new();
        for block_token in self.blocks(session)? {
            let block = self.node(session, block_token);
            self.ensure_state(session, &block)?;
            let Some(winner) = block.cluster().members().last().cloned() else {
                continue;
            };
            let content = self.node(session, winner);
            let bytes = content
                .payload()
                .map_err(|e| DaoError::UnreachableContent(e.to_string()))?;
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    /// Writes a block: a fresh content object with a later expire date than
    /// every current member is created, adopted locally, and added to the
    /// block's cluster. Writing at index == block count appends a new block.
    /// Returns the new content object's token.
    pub fn write_block(
        &self,
        session: &Session,
        block_index: usize,
        content: &[u8],
    ) -> Result<Token, DaoError> {
        let blocks = self.blocks(session)?;
        let block = if block_index < blocks.len() {
            let handle = self.node(session, blocks[block_index].clone());
            self.ensure_state(session, &handle)?;
            handle
        } else if block_index == blocks.len() {
            // fresh blocks must sort after every existing block
            let floor = blocks
                .iter()
                .map(|t| t.expire().millis())
                .max()
                .unwrap_or(0);
            let expire = next_expire(floor)?;
            let handle =
                session.create_new(expire, b"block", self.psec.clone(), self.csec.clone())?;
            self.root.add_to_cluster(&handle)?;
            handle
        } else {
            return Err(DaoError::BlockIndexOutOfRange {
                index: block_index,
                count: blocks.len(),
            });
        };

        let floor = block
            .cluster()
            .members()
            .iter()
            .map(|t| t.expire().millis())
            .max()
            .unwrap_or(0);
        let expire = next_expire(floor)?;
        let fresh = session.create_new(expire, content, self.psec.clone(), self.csec.clone())?;
        block.add_to_cluster(&fresh)?;
        Ok(fresh.token())
    }

    /// The parts of this file's subgraph a replication policy at `level`
    /// covers, resolved against the local server's knowledge.
    pub fn subgraph_tokens(
        &self,
        session: &Session,
        level: u32,
    ) -> Result<Vec<(Token, bool)>, DaoError> {
        self.ensure_state(session, &self.root)?;
        let scope = subgraph_scan(&self.root.token(), level, |t| session.local_cluster_view(t));
        Ok(scope.entries())
    }
}

/// Next expire date strictly above `floor`, never earlier than a default
/// lifetime from the wall clock.
fn next_expire(floor: u64) -> Result<ExpireDate, DaoError> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let base = floor.max(now.saturating_add(DEFAULT_DAO_LIFETIME_MS));
    let millis = base.checked_add(1).ok_or(DaoError::ExpireOrderViolation)?;
    ExpireDate::from_millis(millis).map_err(|_| DaoError::ExpireOrderViolation)
}
