//! Store and cache. They differ mainly in how they clean up: store entries
//! may be removed only after max(expire, sustain_until) plus the grace
//! period; cache entries may be evicted at any time, LRU first.

use crate::mobject::DistributedPart;
use crate::token::{Token, TokenError};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

/// A micro object at home (or sustained) at this server.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub part: DistributedPart,
    pub adopted_at: u64,
    pub sustain_until: Option<u64>,
}

impl StoreEntry {
    /// First instant at which the entry may be removed.
    pub fn removable_at(&self, grace_ms: u64) -> u64 {
        let keep_until = self
            .part
            .token
            .expire()
            .millis()
            .max(self.sustain_until.unwrap_or(0));
        keep_until.saturating_add(grace_ms)
    }
}

#[derive(Debug, Default)]
pub struct Store {
    entries: HashMap<Token, StoreEntry>,
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn get(&self, token: &Token) -> Option<&StoreEntry> {
        self.entries.get(token)
    }

    pub fn get_mut(&mut self, token: &Token) -> Option<&mut StoreEntry> {
        self.entries.get_mut(token)
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.entries.contains_key(token)
    }

    pub fn insert(&mut self, entry: StoreEntry) {
        self.entries.insert(entry.part.token.clone(), entry);
    }

    pub fn remove(&mut self, token: &Token) -> Option<StoreEntry> {
        self.entries.remove(token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Token, &StoreEntry)> {
        self.entries.iter()
    }

    /// Removes every entry whose removal time has passed. An entry with a
    /// future expire date is never removed.
    pub fn remove_due(&mut self, now: u64, grace_ms: u64) -> Vec<Token> {
        let due: Vec<Token> = self
            .entries
            .iter()
            .filter(|(_, e)| now > e.removable_at(grace_ms))
            .map(|(t, _)| t.clone())
            .collect();
        for t in &due {
            self.entries.remove(t);
        }
        due
    }

    /// Earliest future removal time, for sweep scheduling.
    pub fn next_removal(&self, grace_ms: u64) -> Option<u64> {
        self.entries
            .values()
            .map(|e| e.removable_at(grace_ms).saturating_add(1))
            .min()
    }

    /// Serializes all entries to an append-style record file. The file is
    /// rewritten whole; on load the last record per token wins, so a partial
    /// rewrite merely duplicates records.
    pub fn flush_to(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        for entry in self.entries.values() {
            let rec = encode_record(entry);
            f.write_all(&(rec.len() as u32).to_be_bytes())?;
            f.write_all(&rec)?;
        }
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_from(path: &Path) -> std::io::Result<Store> {
        let mut store = Store::new();
        if !path.exists() {
            return Ok(store);
        }
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut at = 0;
        while at + 4 <= buf.len() {
            let len = u32::from_be_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            if at + len > buf.len() {
                break; // torn tail record
            }
            if let Ok(entry) = decode_record(&buf[at..at + len]) {
                store.insert(entry); // last record per token wins
            }
            at += len;
        }
        Ok(store)
    }
}

fn encode_record(entry: &StoreEntry) -> Vec<u8> {
    let mut out = Vec::new();
    entry.part.encode_into(&mut out);
    out.extend_from_slice(&entry.adopted_at.to_be_bytes());
    match entry.sustain_until {
        Some(until) => {
            out.push(1);
            out.extend_from_slice(&until.to_be_bytes());
        }
        None => out.push(0),
    }
    out
}

fn decode_record(buf: &[u8]) -> Result<StoreEntry, TokenError> {
    let (part, at) = DistributedPart::decode_prefix(buf)?;
    if buf.len() < at + 9 {
        return Err(TokenError::Malformed("short store record"));
    }
    let adopted_at = u64::from_be_bytes(buf[at..at + 8].try_into().unwrap());
    let sustain_until = match buf[at + 8] {
        0 => None,
        1 => {
            if buf.len() < at + 17 {
                return Err(TokenError::Malformed("short sustain field"));
            }
            Some(u64::from_be_bytes(buf[at + 9..at + 17].try_into().unwrap()))
        }
        _ => return Err(TokenError::Malformed("bad sustain flag")),
    };
    Ok(StoreEntry {
        part,
        adopted_at,
        sustain_until,
    })
}

/// LRU cache of distributed parts, capacity counted in objects.
#[derive(Debug)]
pub struct Cache {
    capacity: usize,
    entries: HashMap<Token, (DistributedPart, u64)>,
    recency: BTreeMap<u64, Token>,
    counter: u64,
}

impl Cache {
    pub fn new(capacity: usize) -> Self {
        Cache {
            capacity,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
            counter: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.entries.contains_key(token)
    }

    /// Read without disturbing recency; used by background policy work.
    pub fn peek(&self, token: &Token) -> Option<&DistributedPart> {
        self.entries.get(token).map(|(p, _)| p)
    }

    /// Read as an access: marks the entry most-recently used.
    pub fn get(&mut self, token: &Token) -> Option<&DistributedPart> {
        self.touch(token);
        self.entries.get(token).map(|(p, _)| p)
    }

    /// Mutable access to an entry, marking it most-recently used.
    pub fn get_mut(&mut self, token: &Token) -> Option<&mut DistributedPart> {
        self.touch(token);
        self.entries.get_mut(token).map(|(p, _)| p)
    }

    fn touch(&mut self, token: &Token) {
        if let Some((_, stamp)) = self.entries.get_mut(token) {
            self.recency.remove(stamp);
            self.counter += 1;
            *stamp = self.counter;
            self.recency.insert(self.counter, token.clone());
        }
    }

    /// Inserts or replaces an entry and evicts down to capacity.
    /// Returns evicted tokens, least recently used first.
    pub fn insert(&mut self, part: DistributedPart) -> Vec<Token> {
        let token = part.token.clone();
        if let Some((slot, stamp)) = self.entries.get_mut(&token) {
            *slot = part;
            self.recency.remove(stamp);
            self.counter += 1;
            *stamp = self.counter;
            self.recency.insert(self.counter, token);
        } else {
            self.counter += 1;
            self.entries.insert(token.clone(), (part, self.counter));
            self.recency.insert(self.counter, token);
        }
        self.evict_over_capacity()
    }

    pub fn remove(&mut self, token: &Token) -> Option<DistributedPart> {
        let (part, stamp) = self.entries.remove(token)?;
        self.recency.remove(&stamp);
        Some(part)
    }

    fn evict_over_capacity(&mut self) -> Vec<Token> {
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            let (&stamp, token) = self.recency.iter().next().expect("recency tracks entries");
            let token = token.clone();
            self.recency.remove(&stamp);
            self.entries.remove(&token);
            evicted.push(token);
        }
        evicted
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.entries.keys()
    }
}
