//! Append-only token sets sorted by copy-expire date, plus digest-based
//! diffing so two servers can detect cluster differences cheaply during an
//! assent exchange.

use crate::token::{Token, TokenError};
use std::collections::HashSet;

/// Maximum number of contiguous runs in a digest.
pub const MAX_DIGEST_RANGES: usize = 64;

/// Grow-only set of tokens, strictly ascending under the token order.
/// There is an add operation but no remove.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Cluster {
    members: Vec<Token>,
}

/// Outcome of merging two clusters.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    /// Union of both clusters.
    pub merged: Cluster,
    /// Tokens present in the other cluster but not in self (self gained these).
    pub only_in_other: Vec<Token>,
    /// Tokens present in self but not in the other cluster.
    pub only_in_self: Vec<Token>,
}

impl Cluster {
    pub fn new() -> Self {
        Cluster::default()
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = Token>) -> Self {
        let mut c = Cluster::new();
        for t in tokens {
            c.insert(t);
        }
        c
    }

    /// Adds a token, keeping the sorted no-duplicate invariant.
    /// Returns false when the token was already a member.
    pub fn insert(&mut self, token: Token) -> bool {
        match self.members.binary_search(&token) {
            Ok(_) => false,
            Err(at) => {
                self.members.insert(at, token);
                true
            }
        }
    }

    /// Value-style add: a new cluster containing all of self plus `token`.
    pub fn with(&self, token: Token) -> (Cluster, bool) {
        let mut next = self.clone();
        let added = next.insert(token);
        (next, added)
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.members.binary_search(token).is_ok()
    }

    pub fn members(&self) -> &[Token] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Merges two clusters, reporting what each side was missing.
    /// Commutative up to swapping the two missing lists.
    pub fn merge(&self, other: &Cluster) -> MergeOutcome {
        let mut merged = Vec::with_capacity(self.members.len() + other.members.len());
        let mut only_in_self = Vec::new();
        let mut only_in_other = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.members.len() && j < other.members.len() {
            match self.members[i].cmp(&other.members[j]) {
                std::cmp::Ordering::Less => {
                    only_in_self.push(self.members[i].clone());
                    merged.push(self.members[i].clone());
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    only_in_other.push(other.members[j].clone());
                    merged.push(other.members[j].clone());
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    merged.push(self.members[i].clone());
                    i += 1;
                    j += 1;
                }
            }
        }
        only_in_self.extend_from_slice(&self.members[i..]);
        merged.extend_from_slice(&self.members[i..]);
        only_in_other.extend_from_slice(&other.members[j..]);
        merged.extend_from_slice(&other.members[j..]);
        MergeOutcome {
            merged: Cluster { members: merged },
            only_in_other,
            only_in_self,
        }
    }

    /// Absorbs `tokens`, returning those that were actually new.
    pub fn absorb(&mut self, tokens: impl IntoIterator<Item = Token>) -> Vec<Token> {
        let mut gained = Vec::new();
        for t in tokens {
            if self.insert(t.clone()) {
                gained.push(t);
            }
        }
        gained
    }

    /// Tokens in self that are missing from `tracker`, in token order.
    /// An empty tracker returns every member.
    pub fn new_since(&self, tracker: &Cluster) -> Vec<Token> {
        self.members
            .iter()
            .filter(|t| !tracker.contains(t))
            .cloned()
            .collect()
    }

    /// Summarizes the cluster as up to [`MAX_DIGEST_RANGES`] contiguous runs,
    /// balanced by member count, each carrying an xor-fold of member hashes.
    /// Runs never split a group of equal expire dates, so a token's run can
    /// be located from its expire date alone.
    pub fn digest(&self) -> ClusterDigest {
        let total = self.members.len();
        if total == 0 {
            return ClusterDigest {
                total_count: 0,
                ranges: Vec::new(),
            };
        }
        let n_ranges = total.min(MAX_DIGEST_RANGES);
        let target = total.div_ceil(n_ranges);
        let mut ranges = Vec::with_capacity(n_ranges);
        let mut start = 0;
        while start < total {
            let mut end = (start + target).min(total);
            // extend to the end of an equal-expire run
            while end < total && self.members[end].expire() == self.members[end - 1].expire() {
                end += 1;
            }
            let slice = &self.members[start..end];
            ranges.push(DigestRange {
                expire_lo: slice.first().unwrap().expire().millis(),
                expire_hi: slice.last().unwrap().expire().millis(),
                count: slice.len() as u32,
                fold: xor_fold(slice),
            });
            start = end;
        }
        ClusterDigest {
            total_count: total as u32,
            ranges,
        }
    }

    /// Tokens to send so the remote side converges to the union.
    ///
    /// `remote_sample` is a subset of the remote cluster, possibly complete.
    /// Superset-safe: every local token the remote lacks is included; ranges
    /// whose fold and count match the remote digest are assumed synchronized
    /// and skipped, so the result may over-send but never under-sends beyond
    /// a fold collision.
    pub fn diff(&self, remote_digest: &ClusterDigest, remote_sample: &[Token]) -> Vec<Token> {
        let sample: HashSet<&Token> = remote_sample.iter().collect();
        if remote_sample.len() as u32 == remote_digest.total_count {
            // full sample: exact difference
            return self
                .members
                .iter()
                .filter(|t| !sample.contains(t))
                .cloned()
                .collect();
        }
        let mut out = Vec::new();
        let mut idx = 0;
        for range in &remote_digest.ranges {
            // members below the range can't be in the remote cluster's run
            while idx < self.members.len() && self.members[idx].expire().millis() < range.expire_lo
            {
                if !sample.contains(&self.members[idx]) {
                    out.push(self.members[idx].clone());
                }
                idx += 1;
            }
            let slice_start = idx;
            while idx < self.members.len() && self.members[idx].expire().millis() <= range.expire_hi
            {
                idx += 1;
            }
            let slice = &self.members[slice_start..idx];
            if slice.len() as u32 == range.count && xor_fold(slice) == range.fold {
                continue; // synchronized run
            }
            for t in slice {
                if !sample.contains(t) {
                    out.push(t.clone());
                }
            }
        }
        for t in &self.members[idx..] {
            if !sample.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }

    /// Wire form: count(4, big-endian) | concatenated canonical token encodings.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.members.len() as u32).to_be_bytes());
        for t in &self.members {
            t.encode_into(out);
        }
    }

    pub fn decode_prefix(buf: &[u8]) -> Result<(Cluster, usize), TokenError> {
        if buf.len() < 4 {
            return Err(TokenError::Malformed("short cluster header"));
        }
        let count = u32::from_be_bytes(buf[0..4].try_into().unwrap()) as usize;
        let mut members = Vec::with_capacity(count.min(4096));
        let mut at = 4;
        for _ in 0..count {
            let (t, used) = Token::decode_prefix(&buf[at..])?;
            members.push(t);
            at += used;
        }
        let cluster = Cluster::from_tokens(members);
        Ok((cluster, at))
    }
}

fn xor_fold(tokens: &[Token]) -> [u8; 32] {
    let mut fold = [0u8; 32];
    for t in tokens {
        for (f, b) in fold.iter_mut().zip(t.hash()) {
            *f ^= b;
        }
    }
    fold
}

/// One contiguous run of a digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigestRange {
    pub expire_lo: u64,
    pub expire_hi: u64,
    pub count: u32,
    pub fold: [u8; 32],
}

/// Compact cluster summary exchanged during assent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterDigest {
    pub total_count: u32,
    pub ranges: Vec<DigestRange>,
}

impl ClusterDigest {
    /// Wire form: total_count(4) | range_count(1) |
    /// per range [expire_lo(8) | expire_hi(8) | count(4) | fold(32)].
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.total_count.to_be_bytes());
        out.push(self.ranges.len() as u8);
        for r in &self.ranges {
            out.extend_from_slice(&r.expire_lo.to_be_bytes());
            out.extend_from_slice(&r.expire_hi.to_be_bytes());
            out.extend_from_slice(&r.count.to_be_bytes());
            out.extend_from_slice(&r.fold);
        }
    }

    pub fn decode_prefix(buf: &[u8]) -> Result<(ClusterDigest, usize), TokenError> {
        if buf.len() < 5 {
            return Err(TokenError::Malformed("short digest header"));
        }
        let total_count = u32::from_be_bytes(buf[0..4].try_into().unwrap());
        let range_count = buf[4] as usize;
        if range_count > MAX_DIGEST_RANGES {
            return Err(TokenError::Malformed("too many digest ranges"));
        }
        let mut at = 5;
        let mut ranges = Vec::with_capacity(range_count);
        for _ in 0..range_count {
            if buf.len() < at + 8 + 8 + 4 + 32 {
                return Err(TokenError::Malformed("short digest range"));
            }
            let expire_lo = u64::from_be_bytes(buf[at..at + 8].try_into().unwrap());
            let expire_hi = u64::from_be_bytes(buf[at + 8..at + 16].try_into().unwrap());
            let count = u32::from_be_bytes(buf[at + 16..at + 20].try_into().unwrap());
            let mut fold = [0u8; 32];
            fold.copy_from_slice(&buf[at + 20..at + 52]);
            ranges.push(DigestRange {
                expire_lo,
                expire_hi,
                count,
                fold,
            });
            at += 52;
        }
        Ok((
            ClusterDigest {
                total_count,
                ranges,
            },
            at,
        ))
    }
}
