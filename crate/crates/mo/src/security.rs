//! End-to-end sealing of payloads: encryption and/or authentication under a
//! shared 32-byte secret. Keys never travel; they arrive out of band through
//! configuration.
//!
//! Sealing is deterministic: the cipher nonce is derived from the key and the
//! content, so re-sealing identical content yields identical bytes and
//! therefore identical tokens.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

const TAG_LEN: usize = 32;
const NONCE_LEN: usize = 12;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum SecurityError {
    #[error("sealed buffer exceeds payload limit: {len} > {max}")]
    OversizeAfterSeal { len: usize, max: usize },
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("sealed mode {sealed} does not match policy mode {policy}")]
    ModeMismatch { sealed: u8, policy: u8 },
    #[error("malformed sealed buffer: {0}")]
    Malformed(&'static str),
    #[error("policy requires a key")]
    MissingKey,
    #[error("policy mode none must not carry a key")]
    UnexpectedKey,
}

/// How a buffer is protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecurityMode {
    None,
    Authenticate,
    Encrypt,
    EncryptAuthenticate,
}

impl SecurityMode {
    pub fn tag(self) -> u8 {
        match self {
            SecurityMode::None => 0,
            SecurityMode::Authenticate => 1,
            SecurityMode::Encrypt => 2,
            SecurityMode::EncryptAuthenticate => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<SecurityMode> {
        match tag {
            0 => Some(SecurityMode::None),
            1 => Some(SecurityMode::Authenticate),
            2 => Some(SecurityMode::Encrypt),
            3 => Some(SecurityMode::EncryptAuthenticate),
            _ => None,
        }
    }

    fn authenticated(self) -> bool {
        matches!(
            self,
            SecurityMode::Authenticate | SecurityMode::EncryptAuthenticate
        )
    }

    fn encrypted(self) -> bool {
        matches!(
            self,
            SecurityMode::Encrypt | SecurityMode::EncryptAuthenticate
        )
    }
}

/// Mode plus key. The key is present iff the mode is not `None`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecurityPolicy {
    mode: SecurityMode,
    key: Option<[u8; 32]>,
}

impl std::fmt::Debug for SecurityPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // never print key material
        f.debug_struct("SecurityPolicy")
            .field("mode", &self.mode)
            .finish()
    }
}

impl SecurityPolicy {
    pub fn none() -> Self {
        SecurityPolicy {
            mode: SecurityMode::None,
            key: None,
        }
    }

    pub fn new(mode: SecurityMode, key: Option<[u8; 32]>) -> Result<Self, SecurityError> {
        match (mode, key) {
            (SecurityMode::None, None) => Ok(SecurityPolicy { mode, key: None }),
            (SecurityMode::None, Some(_)) => Err(SecurityError::UnexpectedKey),
            (_, None) => Err(SecurityError::MissingKey),
            (mode, Some(k)) => Ok(SecurityPolicy { mode, key: Some(k) }),
        }
    }

    pub fn authenticate(key: [u8; 32]) -> Self {
        SecurityPolicy {
            mode: SecurityMode::Authenticate,
            key: Some(key),
        }
    }

    pub fn encrypt(key: [u8; 32]) -> Self {
        SecurityPolicy {
            mode: SecurityMode::Encrypt,
            key: Some(key),
        }
    }

    pub fn encrypt_authenticate(key: [u8; 32]) -> Self {
        SecurityPolicy {
            mode: SecurityMode::EncryptAuthenticate,
            key: Some(key),
        }
    }

    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    fn subkey(&self, label: &[u8]) -> [u8; 32] {
        let key = self.key.as_ref().expect("mode none has no subkeys");
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(key).unwrap();
        mac.update(label);
        mac.finalize().into_bytes().into()
    }
}

/// A payload after sealing: one mode byte followed by the mode-specific body.
/// In authenticate modes the body starts with a 32-byte tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBuffer {
    mode: SecurityMode,
    body: Vec<u8>,
}

impl SealedBuffer {
    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    /// Layout: mode(1) | body.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.body.len());
        out.push(self.mode.tag());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<SealedBuffer, SecurityError> {
        let tag = *buf
            .first()
            .ok_or(SecurityError::Malformed("empty buffer"))?;
        let mode =
            SecurityMode::from_tag(tag).ok_or(SecurityError::Malformed("unknown mode tag"))?;
        Ok(SealedBuffer {
            mode,
            body: buf[1..].to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        1 + self.body.len()
    }
}

/// Seals `plaintext` under `policy`, bounded by the default payload limit.
pub fn seal(policy: &SecurityPolicy, plaintext: &[u8]) -> Result<SealedBuffer, SecurityError> {
    seal_with_limit(policy, plaintext, crate::token::DEFAULT_MAX_PAYLOAD_SIZE)
}

pub fn seal_with_limit(
    policy: &SecurityPolicy,
    plaintext: &[u8],
    max_payload: usize,
) -> Result<SealedBuffer, SecurityError> {
    let body = match policy.mode {
        SecurityMode::None => plaintext.to_vec(),
        SecurityMode::Authenticate => {
            let tag = auth_tag(policy, plaintext);
            let mut body = Vec::with_capacity(TAG_LEN + plaintext.len());
            body.extend_from_slice(&tag);
            body.extend_from_slice(plaintext);
            body
        }
        SecurityMode::Encrypt => {
            let (nonce, ct) = encrypt(policy, plaintext);
            let mut body = Vec::with_capacity(NONCE_LEN + ct.len());
            body.extend_from_slice(&nonce);
            body.extend_from_slice(&ct);
            body
        }
        SecurityMode::EncryptAuthenticate => {
            let (nonce, ct) = encrypt(policy, plaintext);
            let mut inner = Vec::with_capacity(NONCE_LEN + ct.len());
            inner.extend_from_slice(&nonce);
            inner.extend_from_slice(&ct);
            let tag = auth_tag(policy, &inner);
            let mut body = Vec::with_capacity(TAG_LEN + inner.len());
            body.extend_from_slice(&tag);
            body.extend_from_slice(&inner);
            body
        }
    };
    let sealed = SealedBuffer {
        mode: policy.mode,
        body,
    };
    if sealed.encoded_len() > max_payload {
        return Err(SecurityError::OversizeAfterSeal {
            len: sealed.encoded_len(),
            max: max_payload,
        });
    }
    Ok(sealed)
}

/// Inverse of [`seal`] under the same policy. In authenticate modes any
/// bit flip in the body is rejected.
pub fn open(policy: &SecurityPolicy, sealed: &SealedBuffer) -> Result<Vec<u8>, SecurityError> {
    if sealed.mode != policy.mode {
        return Err(SecurityError::ModeMismatch {
            sealed: sealed.mode.tag(),
            policy: policy.mode.tag(),
        });
    }
    let body = &sealed.body;
    let inner = if policy.mode.authenticated() {
        if body.len() < TAG_LEN {
            return Err(SecurityError::Malformed("body shorter than tag"));
        }
        let (tag, inner) = body.split_at(TAG_LEN);
        verify_tag(policy, inner, tag)?;
        inner
    } else {
        body.as_slice()
    };
    if policy.mode.encrypted() {
        if inner.len() < NONCE_LEN {
            return Err(SecurityError::Malformed("body shorter than nonce"));
        }
        let (nonce, ct) = inner.split_at(NONCE_LEN);
        let mut pt = ct.to_vec();
        cipher(policy, nonce.try_into().unwrap()).apply_keystream(&mut pt);
        Ok(pt)
    } else {
        Ok(inner.to_vec())
    }
}

fn auth_tag(policy: &SecurityPolicy, data: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&policy.subkey(b"mo.mac")).unwrap();
    mac.update(data);
    mac.finalize().into_bytes().into()
}

fn verify_tag(policy: &SecurityPolicy, data: &[u8], tag: &[u8]) -> Result<(), SecurityError> {
    let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&policy.subkey(b"mo.mac")).unwrap();
    mac.update(data);
    mac.verify_slice(tag)
        .map_err(|_| SecurityError::AuthenticationFailure)
}

fn encrypt(policy: &SecurityPolicy, plaintext: &[u8]) -> ([u8; NONCE_LEN], Vec<u8>) {
    // content-derived nonce keeps sealing deterministic
    let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&policy.subkey(b"mo.nonce")).unwrap();
    mac.update(plaintext);
    let full: [u8; 32] = mac.finalize().into_bytes().into();
    let nonce: [u8; NONCE_LEN] = full[..NONCE_LEN].try_into().unwrap();
    let mut ct = plaintext.to_vec();
    cipher(policy, &nonce).apply_keystream(&mut ct);
    (nonce, ct)
}

fn cipher(policy: &SecurityPolicy, nonce: &[u8; NONCE_LEN]) -> ChaCha20 {
    let key = policy.subkey(b"mo.enc");
    ChaCha20::new(&key.into(), nonce.into())
}
