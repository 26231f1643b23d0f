//! The micro object: an immutable token+payload, a grow-only cluster, and the
//! nondistributed control data (security policies and replication data) that
//! stays on the local machine.

use crate::cluster::Cluster;
use crate::security::{self, SealedBuffer, SecurityError, SecurityPolicy};
use crate::token::{ExpireDate, HomeLocation, Payload, Token, TokenError};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum MoError {
    #[error("payload absent; fetch it first")]
    PayloadAbsent,
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Security(#[from] SecurityError),
}

/// The part of a micro object that is copied between servers: token, sealed
/// payload (possibly not yet fetched) and cluster. Never carries keys or
/// replication data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributedPart {
    pub token: Token,
    pub payload: Option<SealedBuffer>,
    pub cluster: Cluster,
}

impl DistributedPart {
    pub fn token_only(token: Token) -> Self {
        DistributedPart {
            token,
            payload: None,
            cluster: Cluster::new(),
        }
    }

    /// True when a payload is present and matches the token hash.
    pub fn payload_verifies(&self) -> bool {
        match &self.payload {
            Some(sealed) => match Payload::with_limit(sealed.encode(), usize::MAX) {
                Ok(p) => self.token.verify(&p),
                Err(_) => false,
            },
            None => false,
        }
    }

    /// Wire form: token | payload_len(4) | sealed payload | cluster.
    /// A zero payload length means the payload is absent.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        self.token.encode_into(out);
        match &self.payload {
            Some(sealed) => {
                let bytes = sealed.encode();
                out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(&bytes);
            }
            None => out.extend_from_slice(&0u32.to_be_bytes()),
        }
        self.cluster.encode_into(out);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode_prefix(buf: &[u8]) -> Result<(DistributedPart, usize), TokenError> {
        let (token, mut at) = Token::decode_prefix(buf)?;
        if buf.len() < at + 4 {
            return Err(TokenError::Malformed("short payload length"));
        }
        let payload_len = u32::from_be_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        let payload = if payload_len == 0 {
            None
        } else {
            if buf.len() < at + payload_len {
                return Err(TokenError::Malformed("short payload"));
            }
            let sealed = SealedBuffer::decode(&buf[at..at + payload_len])
                .map_err(|_| TokenError::Malformed("bad sealed payload"))?;
            at += payload_len;
            Some(sealed)
        };
        let (cluster, used) = Cluster::decode_prefix(&buf[at..])?;
        Ok((
            DistributedPart {
                token,
                payload,
                cluster,
            },
            at + used,
        ))
    }
}

/// One replication policy active on a local copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplicationPolicy {
    /// Proactively push cluster additions to known peers, descending `level`
    /// steps into the object graph.
    Flooding { level: u32 },
    /// Keep the local copy stored past its copy-expire date, for a limited
    /// time but not forever.
    Sustain { until: ExpireDate },
}

impl ReplicationPolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            ReplicationPolicy::Flooding { .. } => PolicyKind::Flooding,
            ReplicationPolicy::Sustain { .. } => PolicyKind::Sustain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Flooding,
    Sustain,
}

/// Openly shared, per-local-copy replication state. Shareable by nature but
/// never transmitted: every copy keeps its own.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplicationData {
    policies: Vec<ReplicationPolicy>,
    /// Known peer servers for this object, with last-contact times (ms).
    pub peers: HashMap<HomeLocation, u64>,
}

impl ReplicationData {
    /// Adds or replaces the policy of the same kind. Several kinds can be
    /// active at the same time.
    pub fn put(&mut self, policy: ReplicationPolicy) {
        self.policies.retain(|p| p.kind() != policy.kind());
        self.policies.push(policy);
    }

    pub fn stop(&mut self, kind: PolicyKind) -> bool {
        let before = self.policies.len();
        self.policies.retain(|p| p.kind() != kind);
        before != self.policies.len()
    }

    pub fn policies(&self) -> &[ReplicationPolicy] {
        &self.policies
    }

    pub fn flooding_level(&self) -> Option<u32> {
        self.policies.iter().find_map(|p| match p {
            ReplicationPolicy::Flooding { level } => Some(*level),
            _ => None,
        })
    }

    pub fn sustain_until(&self) -> Option<ExpireDate> {
        self.policies.iter().find_map(|p| match p {
            ReplicationPolicy::Sustain { until } => Some(*until),
            _ => None,
        })
    }
}

/// A local micro object: the distributed part plus the closed-shared section
/// (payload and cluster security policies) and the openly shared replication
/// data.
#[derive(Debug, Clone)]
pub struct MicroObject {
    part: DistributedPart,
    psec: SecurityPolicy,
    csec: SecurityPolicy,
    pub repl: ReplicationData,
}

impl MicroObject {
    /// Creates a fresh object: seals the plaintext, computes the token over
    /// the sealed bytes, starts with an empty cluster.
    pub fn new(
        home: HomeLocation,
        expire: ExpireDate,
        plaintext: &[u8],
        psec: SecurityPolicy,
        csec: SecurityPolicy,
    ) -> Result<MicroObject, MoError> {
        Self::new_with_limit(
            home,
            expire,
            plaintext,
            psec,
            csec,
            crate::token::DEFAULT_MAX_PAYLOAD_SIZE,
        )
    }

    pub fn new_with_limit(
        home: HomeLocation,
        expire: ExpireDate,
        plaintext: &[u8],
        psec: SecurityPolicy,
        csec: SecurityPolicy,
        max_payload: usize,
    ) -> Result<MicroObject, MoError> {
        let sealed = security::seal_with_limit(&psec, plaintext, max_payload)?;
        let payload = Payload::with_limit(sealed.encode(), max_payload)?;
        let token = Token::create(home, expire, 0, &payload);
        Ok(MicroObject {
            part: DistributedPart {
                token,
                payload: Some(sealed),
                cluster: Cluster::new(),
            },
            psec,
            csec,
            repl: ReplicationData::default(),
        })
    }

    /// A copy bound to an existing token; the payload is fetched on demand.
    pub fn from_token(token: Token, psec: SecurityPolicy, csec: SecurityPolicy) -> MicroObject {
        MicroObject {
            part: DistributedPart::token_only(token),
            psec,
            csec,
            repl: ReplicationData::default(),
        }
    }

    /// Opens the sealed payload. A verification failure here signals a bogus
    /// object; it can only be detected at this level, not by servers.
    pub fn plaintext(&self) -> Result<Vec<u8>, MoError> {
        let sealed = self.part.payload.as_ref().ok_or(MoError::PayloadAbsent)?;
        Ok(security::open(&self.psec, sealed)?)
    }

    pub fn token(&self) -> &Token {
        &self.part.token
    }

    pub fn home(&self) -> &HomeLocation {
        self.part.token.home()
    }

    pub fn cluster(&self) -> &Cluster {
        &self.part.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.part.cluster
    }

    pub fn payload_present(&self) -> bool {
        self.part.payload.is_some()
    }

    /// Installs a fetched payload after checking it against the token.
    pub fn attach_payload(&mut self, sealed: SealedBuffer) -> Result<(), MoError> {
        let payload = Payload::with_limit(sealed.encode(), usize::MAX)?;
        if !self.part.token.verify(&payload) {
            return Err(MoError::Security(SecurityError::AuthenticationFailure));
        }
        self.part.payload = Some(sealed);
        Ok(())
    }

    pub fn part(&self) -> &DistributedPart {
        &self.part
    }

    pub fn part_mut(&mut self) -> &mut DistributedPart {
        &mut self.part
    }

    pub fn psec(&self) -> &SecurityPolicy {
        &self.psec
    }

    pub fn csec(&self) -> &SecurityPolicy {
        &self.csec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::SecurityMode;

    fn home() -> HomeLocation {
        HomeLocation::new("mo.test", 7100).unwrap()
    }

    fn expire(ms: u64) -> ExpireDate {
        ExpireDate::from_millis(ms).unwrap()
    }

    #[test]
    fn new_object_has_empty_cluster_and_verifies() {
        let mo = MicroObject::new(
            home(),
            expire(1000),
            b"",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        assert!(mo.payload_present());
        assert!(mo.cluster().is_empty());
        assert!(mo.part().payload_verifies());
        assert!(mo.repl.policies().is_empty());
    }

    #[test]
    fn creation_is_deterministic() {
        let a = MicroObject::new(
            home(),
            expire(5),
            b"news board",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        let b = MicroObject::new(
            home(),
            expire(5),
            b"news board",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        assert_eq!(a.token(), b.token());
    }

    #[test]
    fn plaintext_roundtrip_all_modes() {
        for psec in [
            SecurityPolicy::none(),
            SecurityPolicy::authenticate([1; 32]),
            SecurityPolicy::encrypt([2; 32]),
            SecurityPolicy::encrypt_authenticate([3; 32]),
        ] {
            let mo =
                MicroObject::new(home(), expire(9), b"item", psec, SecurityPolicy::none()).unwrap();
            assert_eq!(mo.plaintext().unwrap(), b"item");
        }
    }

    #[test]
    fn from_token_has_no_payload() {
        let original = MicroObject::new(
            home(),
            expire(7),
            b"data",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        let copy = MicroObject::from_token(
            original.token().clone(),
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        );
        assert!(!copy.payload_present());
        assert_eq!(copy.home(), &home());
        assert_eq!(copy.plaintext(), Err(MoError::PayloadAbsent));
    }

    #[test]
    fn attach_payload_verifies_token() {
        let original = MicroObject::new(
            home(),
            expire(7),
            b"data",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        let mut copy = MicroObject::from_token(
            original.token().clone(),
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        );
        copy.attach_payload(original.part().payload.clone().unwrap())
            .unwrap();
        assert_eq!(copy.plaintext().unwrap(), b"data");

        let mut bogus = MicroObject::from_token(
            original.token().clone(),
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        );
        let tampered = SealedBuffer::decode(&[0, b'x']).unwrap();
        assert!(bogus.attach_payload(tampered).is_err());
    }

    #[test]
    fn tampered_body_fails_authentication() {
        let psec = SecurityPolicy::encrypt_authenticate([9; 32]);
        let mo = MicroObject::new(
            home(),
            expire(3),
            b"secret",
            psec.clone(),
            SecurityPolicy::none(),
        )
        .unwrap();
        let mut bytes = mo.part().payload.as_ref().unwrap().encode();
        *bytes.last_mut().unwrap() ^= 1;
        let tampered = SealedBuffer::decode(&bytes).unwrap();
        let broken = MicroObject {
            part: DistributedPart {
                token: mo.token().clone(),
                payload: Some(tampered),
                cluster: Cluster::new(),
            },
            psec,
            csec: SecurityPolicy::none(),
            repl: ReplicationData::default(),
        };
        assert_eq!(
            broken.plaintext(),
            Err(MoError::Security(SecurityError::AuthenticationFailure))
        );
    }

    #[test]
    fn part_wire_roundtrip() {
        let mut mo = MicroObject::new(
            home(),
            expire(44),
            b"payload",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        let child = MicroObject::new(
            home(),
            expire(45),
            b"child",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        mo.cluster_mut().insert(child.token().clone());

        let bytes = mo.part().encode();
        let (back, used) = DistributedPart::decode_prefix(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(&back, mo.part());

        // token-only parts roundtrip with payload_len = 0
        let token_only = DistributedPart::token_only(child.token().clone());
        let bytes = token_only.encode();
        let (back, _) = DistributedPart::decode_prefix(&bytes).unwrap();
        assert_eq!(back, token_only);
    }

    #[test]
    fn replication_data_single_policy_per_kind() {
        let mut repl = ReplicationData::default();
        repl.put(ReplicationPolicy::Flooding { level: 0 });
        repl.put(ReplicationPolicy::Flooding { level: 3 });
        repl.put(ReplicationPolicy::Sustain { until: expire(10) });
        assert_eq!(repl.policies().len(), 2);
        assert_eq!(repl.flooding_level(), Some(3));
        assert_eq!(repl.sustain_until(), Some(expire(10)));
        assert!(repl.stop(PolicyKind::Flooding));
        assert!(!repl.stop(PolicyKind::Flooding));
        assert_eq!(repl.flooding_level(), None);
    }

    #[test]
    fn psec_mode_is_carried_not_transmitted() {
        // the distributed part's encoding must not depend on the policies
        let a = MicroObject::new(
            home(),
            expire(2),
            b"x",
            SecurityPolicy::none(),
            SecurityPolicy::none(),
        )
        .unwrap();
        assert_eq!(a.psec().mode(), SecurityMode::None);
        let encoded = a.part().encode();
        let (decoded, _) = DistributedPart::decode_prefix(&encoded).unwrap();
        assert_eq!(decoded, *a.part());
    }
}
