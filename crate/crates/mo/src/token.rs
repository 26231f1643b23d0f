//! Tokens: self-verifying object identifiers embedding the home location,
//! the copy-expire date and a content hash.
//!
//! A token can be computed locally from the object's sealed payload; no
//! communication is needed. The hash binds the token to exactly one payload,
//! so any copy of the object can be verified without keys.

use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::fmt;
use thiserror::Error;

/// Digest used for token hashes. A single named constant so the primitive is
/// recorded in one place.
pub const TOKEN_HASH_LEN: usize = 32;

/// Token wire layout version.
pub const TOKEN_VERSION: u8 = 1;

/// Default upper bound on (sealed) payload size in bytes.
pub const DEFAULT_MAX_PAYLOAD_SIZE: usize = 65536;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TokenError {
    #[error("payload too large: {len} bytes exceeds limit {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("invalid expire date: zero is reserved")]
    InvalidExpire,
    #[error("invalid home location: {0}")]
    InvalidHome(&'static str),
    #[error("malformed token: {0}")]
    Malformed(&'static str),
}

/// Contact address of an object's home server, also used as the address of
/// any MO server on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HomeLocation {
    host: String,
    port: u16,
}

impl HomeLocation {
    /// Builds a canonical home location: lowercase host, no trailing dot.
    pub fn new(host: &str, port: u16) -> Result<Self, TokenError> {
        let host = host.trim_end_matches('.').to_ascii_lowercase();
        if host.is_empty() {
            return Err(TokenError::InvalidHome("empty host"));
        }
        if host.len() > 255 {
            return Err(TokenError::InvalidHome("host longer than 255 bytes"));
        }
        if port == 0 {
            return Err(TokenError::InvalidHome("port zero"));
        }
        Ok(HomeLocation { host, port })
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Canonical encoding: host_len(1) | host | port(2, big-endian).
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.host.len() as u8);
        out.extend_from_slice(self.host.as_bytes());
        out.extend_from_slice(&self.port.to_be_bytes());
    }

    pub fn decode(buf: &[u8]) -> Result<(Self, usize), TokenError> {
        let host_len = *buf.first().ok_or(TokenError::Malformed("empty buffer"))? as usize;
        if buf.len() < 1 + host_len + 2 {
            return Err(TokenError::Malformed("short home location"));
        }
        let host = std::str::from_utf8(&buf[1..1 + host_len])
            .map_err(|_| TokenError::Malformed("host not utf-8"))?;
        let port = u16::from_be_bytes([buf[1 + host_len], buf[2 + host_len]]);
        let loc = HomeLocation::new(host, port)?;
        if loc.host != host {
            return Err(TokenError::Malformed("host not canonical"));
        }
        Ok((loc, 3 + host_len))
    }
}

impl fmt::Display for HomeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl std::str::FromStr for HomeLocation {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, TokenError> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or(TokenError::InvalidHome("expected host:port"))?;
        let port: u16 = port
            .parse()
            .map_err(|_| TokenError::InvalidHome("bad port"))?;
        HomeLocation::new(host, port)
    }
}

/// Copy-expire date in milliseconds UTC since the epoch. Zero is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpireDate(u64);

impl ExpireDate {
    pub fn from_millis(millis: u64) -> Result<Self, TokenError> {
        if millis == 0 {
            return Err(TokenError::InvalidExpire);
        }
        Ok(ExpireDate(millis))
    }

    pub fn millis(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ExpireDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Immutable octet buffer carried by a micro object. Contents never change
/// after creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    bytes: Vec<u8>,
}

impl Payload {
    pub fn new(bytes: Vec<u8>) -> Result<Self, TokenError> {
        Self::with_limit(bytes, DEFAULT_MAX_PAYLOAD_SIZE)
    }

    pub fn with_limit(bytes: Vec<u8>, max: usize) -> Result<Self, TokenError> {
        if bytes.len() > max {
            return Err(TokenError::PayloadTooLarge {
                len: bytes.len(),
                max,
            });
        }
        Ok(Payload { bytes })
    }

    pub fn empty() -> Self {
        Payload { bytes: Vec::new() }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Systemwide unique, self-verifying object identifier.
///
/// The hash covers the home location, copy-expire date, the aux tag and the
/// payload bytes, so a token is uniquely associated with its payload. Two
/// tokens are equal iff all fields are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    version: u8,
    home: HomeLocation,
    expire: ExpireDate,
    aux: u16,
    hash: [u8; TOKEN_HASH_LEN],
}

impl Token {
    /// Computes the token for a payload. Deterministic: identical inputs
    /// yield identical tokens.
    pub fn create(home: HomeLocation, expire: ExpireDate, aux: u16, payload: &Payload) -> Token {
        let hash = token_digest(TOKEN_VERSION, &home, expire, aux, payload.bytes());
        Token {
            version: TOKEN_VERSION,
            home,
            expire,
            aux,
            hash,
        }
    }

    /// True iff the recomputed digest over `payload` equals the stored hash.
    pub fn verify(&self, payload: &Payload) -> bool {
        let recomputed = token_digest(
            self.version,
            &self.home,
            self.expire,
            self.aux,
            payload.bytes(),
        );
        recomputed == self.hash
    }

    pub fn home(&self) -> &HomeLocation {
        &self.home
    }

    pub fn expire(&self) -> ExpireDate {
        self.expire
    }

    pub fn aux(&self) -> u16 {
        self.aux
    }

    pub fn hash(&self) -> &[u8; TOKEN_HASH_LEN] {
        &self.hash
    }

    /// Short hex prefix of the hash, used in traces and logs.
    pub fn hash_prefix(&self) -> String {
        self.hash[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Canonical encoding:
    /// version(1) | host_len(1) | host | port(2) | expire(8) | aux(2) | hash(32),
    /// all integers big-endian. One byte string per token.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.version);
        self.home.encode_into(out);
        out.extend_from_slice(&self.expire.millis().to_be_bytes());
        out.extend_from_slice(&self.aux.to_be_bytes());
        out.extend_from_slice(&self.hash);
    }

    pub fn encoded_len(&self) -> usize {
        1 + 1 + self.home.host.len() + 2 + 8 + 2 + TOKEN_HASH_LEN
    }

    pub fn decode(buf: &[u8]) -> Result<Token, TokenError> {
        let (token, used) = Token::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(TokenError::Malformed("trailing bytes"));
        }
        Ok(token)
    }

    /// Decodes a token from the front of `buf`, returning the byte count
    /// consumed. Used when tokens are concatenated on the wire.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Token, usize), TokenError> {
        let version = *buf.first().ok_or(TokenError::Malformed("empty buffer"))?;
        if version != TOKEN_VERSION {
            return Err(TokenError::Malformed("unsupported version"));
        }
        let (home, home_len) = HomeLocation::decode(&buf[1..])?;
        let rest = &buf[1 + home_len..];
        if rest.len() < 8 + 2 + TOKEN_HASH_LEN {
            return Err(TokenError::Malformed("short buffer"));
        }
        let expire = u64::from_be_bytes(rest[0..8].try_into().unwrap());
        let expire =
            ExpireDate::from_millis(expire).map_err(|_| TokenError::Malformed("zero expire"))?;
        let aux = u16::from_be_bytes(rest[8..10].try_into().unwrap());
        let mut hash = [0u8; TOKEN_HASH_LEN];
        hash.copy_from_slice(&rest[10..10 + TOKEN_HASH_LEN]);
        let used = 1 + home_len + 10 + TOKEN_HASH_LEN;
        Ok((
            Token {
                version,
                home,
                expire,
                aux,
                hash,
            },
            used,
        ))
    }
}

/// Total order on tokens: copy-expire date ascending, ties broken by hash
/// bytes, then by the remaining canonical-encoding fields. Equal only for
/// identical tokens.
impl Ord for Token {
    fn cmp(&self, other: &Self) -> Ordering {
        self.expire
            .cmp(&other.expire)
            .then_with(|| self.hash.cmp(&other.hash))
            // Remaining fields in canonical-encoding order; a length-prefixed
            // host compares as (len, bytes).
            .then_with(|| self.version.cmp(&other.version))
            .then_with(|| self.home.host.len().cmp(&other.home.host.len()))
            .then_with(|| self.home.host.cmp(&other.home.host))
            .then_with(|| self.home.port.cmp(&other.home.port))
            .then_with(|| self.aux.cmp(&other.aux))
    }
}

impl PartialOrd for Token {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}#{}", self.hash_prefix(), self.home, self.expire)
    }
}

fn token_digest(
    version: u8,
    home: &HomeLocation,
    expire: ExpireDate,
    aux: u16,
    payload: &[u8],
) -> [u8; TOKEN_HASH_LEN] {
    let mut hasher = Sha256::new();
    hasher.update([version]);
    let mut home_bytes = Vec::with_capacity(3 + home.host.len());
    home.encode_into(&mut home_bytes);
    hasher.update(&home_bytes);
    hasher.update(expire.millis().to_be_bytes());
    hasher.update(aux.to_be_bytes());
    hasher.update(payload);
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn home(name: &str) -> HomeLocation {
        HomeLocation::new(name, 7000).unwrap()
    }

    fn token(host: &str, expire: u64, aux: u16, payload: &[u8]) -> Token {
        Token::create(
            home(host),
            ExpireDate::from_millis(expire).unwrap(),
            aux,
            &Payload::new(payload.to_vec()).unwrap(),
        )
    }

    #[test]
    fn create_is_deterministic() {
        let a = token("a.example", 1000, 0, b"");
        let b = token("a.example", 1000, 0, b"");
        assert_eq!(a, b);
    }

    #[test]
    fn payload_byte_flip_changes_hash() {
        let base = token("a.example", 1000, 0, b"hello world");
        for i in 0..11 {
            let mut altered = b"hello world".to_vec();
            altered[i] ^= 0x01;
            let other = token("a.example", 1000, 0, &altered);
            assert_ne!(base.hash(), other.hash(), "flip at byte {i}");
        }
    }

    #[test]
    fn random_triples_are_distinct() {
        // Oracle: brute-force pairwise equality over the generated set,
        // realized as a hash-set insert per token.
        use rand::{Rng, RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut seen = HashSet::new();
        for i in 0..10_000u64 {
            let host = format!("h{}.example", rng.random_range(0..64u32));
            let expire = rng.random_range(1..u64::MAX);
            let mut payload = vec![0u8; rng.random_range(0..64usize)];
            rng.fill_bytes(&mut payload);
            payload.extend_from_slice(&i.to_be_bytes());
            let t = token(&host, expire, 0, &payload);
            assert!(seen.insert(t.encode()), "duplicate token at {i}");
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn verify_roundtrip_and_mismatch() {
        let payload = Payload::new(b"news item".to_vec()).unwrap();
        let t = Token::create(
            home("srv"),
            ExpireDate::from_millis(99).unwrap(),
            7,
            &payload,
        );
        assert!(t.verify(&payload));

        let mut flipped = payload.bytes().to_vec();
        flipped[0] ^= 0x80;
        assert!(!t.verify(&Payload::new(flipped).unwrap()));
    }

    #[test]
    fn verify_rejects_truncation() {
        // Independent oracle: recompute the digest over the truncated bytes
        // with a local sha256 of the documented layout and compare.
        let payload = Payload::new(b"0123456789".to_vec()).unwrap();
        let t = Token::create(
            home("srv"),
            ExpireDate::from_millis(5).unwrap(),
            1,
            &payload,
        );
        let truncated = Payload::new(payload.bytes()[..payload.len() - 1].to_vec()).unwrap();
        assert!(!t.verify(&truncated));

        let mut hasher = Sha256::new();
        hasher.update([TOKEN_VERSION]);
        let mut hb = Vec::new();
        home("srv").encode_into(&mut hb);
        hasher.update(&hb);
        hasher.update(5u64.to_be_bytes());
        hasher.update(1u16.to_be_bytes());
        hasher.update(truncated.bytes());
        let independent: [u8; 32] = hasher.finalize().into();
        assert_ne!(&independent, t.hash());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let t = token("node.example", 123456, 99, b"payload");
        let bytes = t.encode();
        assert_eq!(Token::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn decode_rejects_empty_and_truncated() {
        assert!(matches!(Token::decode(&[]), Err(TokenError::Malformed(_))));
        let bytes = token("n.example", 9, 0, b"x").encode();
        for cut in 0..bytes.len() {
            assert!(
                Token::decode(&bytes[..cut]).is_err(),
                "truncation to {cut} bytes must fail"
            );
        }
    }

    #[test]
    fn decode_rejects_bad_version_and_port() {
        let mut bytes = token("n.example", 9, 0, b"x").encode();
        bytes[0] = 2;
        assert!(Token::decode(&bytes).is_err());

        let mut bytes = token("n.example", 9, 0, b"x").encode();
        // zero the port field
        let port_at = 2 + "n.example".len();
        bytes[port_at] = 0;
        bytes[port_at + 1] = 0;
        assert!(Token::decode(&bytes).is_err());
    }

    #[test]
    fn fuzz_roundtrip_and_truncations() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let host = format!("h{}.test", rng.random_range(0..1000u32));
            let t = token(
                &host,
                rng.random_range(1..u64::MAX),
                rng.random_range(0..=u16::MAX),
                &rng.random_range(0..32u8).to_be_bytes(),
            );
            let bytes = t.encode();
            assert_eq!(Token::decode(&bytes).unwrap(), t);
            let cut = rng.random_range(0..bytes.len());
            assert!(Token::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn cross_payload_verify_rejected_in_ten_thousand_trials() {
        use rand::{Rng, RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        for i in 0..10_000u32 {
            let mut p = vec![0u8; rng.random_range(1..96usize)];
            let mut q = vec![0u8; rng.random_range(1..96usize)];
            rng.fill_bytes(&mut p);
            rng.fill_bytes(&mut q);
            p.extend_from_slice(&i.to_be_bytes());
            q.extend_from_slice(&(!i).to_be_bytes());
            let t = token("x.example", 1 + i as u64, 0, &p);
            assert!(!t.verify(&Payload::new(q).unwrap()), "trial {i}");
        }
    }

    #[test]
    fn wire_layout_is_pinned() {
        // version(1) | host_len(1) | host | port(2) | expire(8) | aux(2) | hash(32)
        let t = Token::create(
            HomeLocation::new("ab.cd", 0x1234).unwrap(),
            ExpireDate::from_millis(0x0102030405060708).unwrap(),
            0xBEEF,
            &Payload::new(b"xyz".to_vec()).unwrap(),
        );
        let bytes = t.encode();
        assert_eq!(bytes.len(), 1 + 1 + 5 + 2 + 8 + 2 + 32);
        assert_eq!(bytes[0], 1, "version");
        assert_eq!(bytes[1], 5, "host length");
        assert_eq!(&bytes[2..7], b"ab.cd");
        assert_eq!(&bytes[7..9], &[0x12, 0x34], "port big-endian");
        assert_eq!(
            &bytes[9..17],
            &[1, 2, 3, 4, 5, 6, 7, 8],
            "expire big-endian"
        );
        assert_eq!(&bytes[17..19], &[0xBE, 0xEF], "aux big-endian");
        assert_eq!(&bytes[19..51], t.hash());
    }

    #[test]
    fn order_examples() {
        let early = token("a.example", 100, 0, b"x");
        let late = token("a.example", 200, 0, b"x");
        assert_eq!(early.cmp(&late), Ordering::Less);
        assert_eq!(early.cmp(&early.clone()), Ordering::Equal);

        // equal expire: hash bytes decide
        let p = token("a.example", 100, 0, b"p");
        let q = token("a.example", 100, 0, b"q");
        let expected = p.hash().cmp(q.hash());
        assert_eq!(p.cmp(&q), expected);
        assert_ne!(expected, Ordering::Equal);
    }

    #[test]
    fn host_is_canonicalized() {
        let a = HomeLocation::new("Node.Example.", 80).unwrap();
        assert_eq!(a.host(), "node.example");
        assert!(HomeLocation::new("", 80).is_err());
        assert!(HomeLocation::new("x", 0).is_err());
    }

    #[test]
    fn payload_size_limit() {
        assert!(Payload::new(vec![0; DEFAULT_MAX_PAYLOAD_SIZE]).is_ok());
        assert!(matches!(
            Payload::new(vec![0; DEFAULT_MAX_PAYLOAD_SIZE + 1]),
            Err(TokenError::PayloadTooLarge { .. })
        ));
    }

    #[test]
    fn expire_zero_is_invalid() {
        assert_eq!(ExpireDate::from_millis(0), Err(TokenError::InvalidExpire));
    }

    proptest! {
        // Total order: antisymmetric, transitive, total over random sets.
        #[test]
        fn order_is_total(seed in any::<u64>()) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<Token> = (0..24)
                .map(|i| {
                    token(
                        &format!("h{}.t", rng.random_range(0..4u8)),
                        rng.random_range(1..8u64),
                        0,
                        &[i as u8 % 3],
                    )
                })
                .collect();
            for a in &tokens {
                for b in &tokens {
                    match a.cmp(b) {
                        Ordering::Equal => prop_assert_eq!(a, b),
                        ord => prop_assert_eq!(b.cmp(a), ord.reverse()),
                    }
                    for c in &tokens {
                        if a.cmp(b) != Ordering::Greater && b.cmp(c) != Ordering::Greater {
                            prop_assert_ne!(a.cmp(c), Ordering::Greater);
                        }
                    }
                }
            }
        }

        #[test]
        fn verify_accepts_own_payload(data in proptest::collection::vec(any::<u8>(), 0..256),
                                      expire in 1..u64::MAX,
                                      aux in any::<u16>()) {
            let payload = Payload::new(data).unwrap();
            let t = Token::create(home("prop.example"), ExpireDate::from_millis(expire).unwrap(), aux, &payload);
            prop_assert!(t.verify(&payload));
        }

        #[test]
        fn verify_rejects_other_payload(data in proptest::collection::vec(any::<u8>(), 1..256),
                                        other in proptest::collection::vec(any::<u8>(), 1..256)) {
            prop_assume!(data != other);
            let t = Token::create(home("prop.example"), ExpireDate::from_millis(1).unwrap(), 0, &Payload::new(data).unwrap());
            prop_assert!(!t.verify(&Payload::new(other).unwrap()));
        }

        // Canonical encoding: injective over random tokens.
        #[test]
        fn encoding_is_injective(seed in any::<u64>()) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut by_encoding: HashSet<Vec<u8>> = HashSet::new();
            let mut tokens = Vec::new();
            for _ in 0..64 {
                let t = token(
                    &format!("h{}.t", rng.random_range(0..8u8)),
                    rng.random_range(1..1000u64),
                    rng.random_range(0..4u16),
                    &[rng.random_range(0..=255u8)],
                );
                if !tokens.contains(&t) {
                    prop_assert!(by_encoding.insert(t.encode()));
                    tokens.push(t);
                }
            }
        }
    }
}
