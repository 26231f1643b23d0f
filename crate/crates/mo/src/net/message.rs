//! Wire protocol: tagged, length-prefixed frames carrying the remote and
//! local request taxonomy.
//!
//! Frame layout (big-endian):
//! magic(2)=0x4D4F | version(1) | type(1) | request_id(8) | body_len(4) | body.
//! Types 16..=20 are valid only on the local channel.

use crate::cluster::ClusterDigest;
use crate::mobject::DistributedPart;
use crate::security::SealedBuffer;
use crate::token::{HomeLocation, Token, TokenError};
use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x4D, 0x4F];
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on body length; larger frames are rejected before allocation.
pub const MAX_BODY_LEN: usize = 16 * 1024 * 1024;

pub const TYPE_FETCH: u8 = 1;
pub const TYPE_FETCH_RESP: u8 = 2;
pub const TYPE_ASSENT: u8 = 3;
pub const TYPE_ASSENT_RESP: u8 = 4;
pub const TYPE_BUSY: u8 = 5;
pub const TYPE_REQUEST_PAYLOAD: u8 = 16;
pub const TYPE_ADOPT: u8 = 17;
pub const TYPE_REPLICATE: u8 = 18;
pub const TYPE_UPDATE: u8 = 19;
pub const TYPE_LOCAL_RESP: u8 = 20;
pub const TYPE_ERROR: u8 = 255;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("body length mismatch: declared {declared}, available {available}")]
    LengthMismatch { declared: usize, available: usize },
    #[error("truncated frame")]
    Truncated,
    #[error("malformed body: {0}")]
    Malformed(&'static str),
}

impl From<TokenError> for WireError {
    fn from(_: TokenError) -> Self {
        WireError::Malformed("bad token field")
    }
}

/// Protocol error codes carried by ERROR replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    MalformedToken = 1,
    NotFound = 2,
    WrongHome = 3,
    VerifyFailed = 4,
    UnknownObject = 5,
    UnknownPolicy = 6,
    UnreachableHome = 7,
    BusyExhausted = 8,
    NotFoundAnywhere = 9,
    Untrusted = 10,
    Protocol = 11,
    Oversize = 12,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Option<ErrorCode> {
        Some(match v {
            1 => ErrorCode::MalformedToken,
            2 => ErrorCode::NotFound,
            3 => ErrorCode::WrongHome,
            4 => ErrorCode::VerifyFailed,
            5 => ErrorCode::UnknownObject,
            6 => ErrorCode::UnknownPolicy,
            7 => ErrorCode::UnreachableHome,
            8 => ErrorCode::BusyExhausted,
            9 => ErrorCode::NotFoundAnywhere,
            10 => ErrorCode::Untrusted,
            11 => ErrorCode::Protocol,
            12 => ErrorCode::Oversize,
            _ => return None,
        })
    }
}

/// Start/stop a replication policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicateOp {
    StartFlooding { level: u32 },
    StartSustain { until_ms: u64 },
    StopFlooding,
    StopSustain,
}

/// Message body, one variant per wire type.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Fetch {
        requester: HomeLocation,
        token: Token,
    },
    FetchResp {
        part: Option<DistributedPart>,
        ditto: Vec<HomeLocation>,
    },
    Assent {
        sender: HomeLocation,
        token: Token,
        digest: ClusterDigest,
        sample_is_full: bool,
        sample: Vec<Token>,
        /// Payloads pushed alongside the cluster when a flooding level
        /// covers subgraph members.
        attachments: Vec<(Token, SealedBuffer)>,
    },
    AssentResp {
        missing: Vec<Token>,
    },
    Busy {
        ditto: Vec<HomeLocation>,
    },
    RequestPayload {
        token: Token,
    },
    Adopt {
        part: DistributedPart,
    },
    Replicate {
        token: Token,
        op: ReplicateOp,
    },
    Update {
        token: Token,
        add: Vec<Token>,
    },
    LocalResp {
        part: Option<DistributedPart>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Body {
    pub fn type_byte(&self) -> u8 {
        match self {
            Body::Fetch { .. } => TYPE_FETCH,
            Body::FetchResp { .. } => TYPE_FETCH_RESP,
            Body::Assent { .. } => TYPE_ASSENT,
            Body::AssentResp { .. } => TYPE_ASSENT_RESP,
            Body::Busy { .. } => TYPE_BUSY,
            Body::RequestPayload { .. } => TYPE_REQUEST_PAYLOAD,
            Body::Adopt { .. } => TYPE_ADOPT,
            Body::Replicate { .. } => TYPE_REPLICATE,
            Body::Update { .. } => TYPE_UPDATE,
            Body::LocalResp { .. } => TYPE_LOCAL_RESP,
            Body::Error { .. } => TYPE_ERROR,
        }
    }

    /// True for request types a remote peer may send.
    pub fn valid_on_remote_channel(&self) -> bool {
        !matches!(self.type_byte(), 16..=20)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub request_id: u64,
    pub body: Body,
}

impl Message {
    pub fn new(request_id: u64, body: Body) -> Self {
        Message { request_id, body }
    }

    pub fn error(request_id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Message {
            request_id,
            body: Body::Error {
                code,
                message: message.into(),
            },
        }
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    encode_body(&msg.body, &mut body);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(msg.body.type_byte());
    out.extend_from_slice(&msg.request_id.to_be_bytes());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one complete frame. The body is never read past the declared
/// length, and a declared length beyond the buffer is rejected.
pub fn decode_message(buf: &[u8]) -> Result<Message, WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if buf[0..2] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if buf[2] != PROTOCOL_VERSION {
        return Err(WireError::BadVersion(buf[2]));
    }
    let type_byte = buf[3];
    let request_id = u64::from_be_bytes(buf[4..12].try_into().unwrap());
    let body_len = u32::from_be_bytes(buf[12..16].try_into().unwrap()) as usize;
    if body_len > MAX_BODY_LEN || buf.len() != HEADER_LEN + body_len {
        return Err(WireError::LengthMismatch {
            declared: body_len,
            available: buf.len().saturating_sub(HEADER_LEN),
        });
    }
    let body = decode_body(type_byte, &buf[HEADER_LEN..])?;
    Ok(Message { request_id, body })
}

fn encode_body(body: &Body, out: &mut Vec<u8>) {
    match body {
        Body::Fetch { requester, token } => {
            requester.encode_into(out);
            token.encode_into(out);
        }
        Body::FetchResp { part, ditto } => {
            match part {
                Some(p) => {
                    out.push(0);
                    p.encode_into(out);
                }
                None => out.push(1),
            }
            encode_addrs(ditto, out);
        }
        Body::Assent {
            sender,
            token,
            digest,
            sample_is_full,
            sample,
            attachments,
        } => {
            sender.encode_into(out);
            token.encode_into(out);
            digest.encode_into(out);
            out.push(u8::from(*sample_is_full));
            encode_tokens(sample, out);
            out.extend_from_slice(&(attachments.len() as u16).to_be_bytes());
            for (t, sealed) in attachments {
                t.encode_into(out);
                let bytes = sealed.encode();
                out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(&bytes);
            }
        }
        Body::AssentResp { missing } => encode_tokens(missing, out),
        Body::Busy { ditto } => encode_addrs(ditto, out),
        Body::RequestPayload { token } => token.encode_into(out),
        Body::Adopt { part } => part.encode_into(out),
        Body::Replicate { token, op } => {
            token.encode_into(out);
            match op {
                ReplicateOp::StartFlooding { level } => {
                    out.push(1);
                    out.extend_from_slice(&level.to_be_bytes());
                }
                ReplicateOp::StartSustain { until_ms } => {
                    out.push(2);
                    out.extend_from_slice(&until_ms.to_be_bytes());
                }
                ReplicateOp::StopFlooding => out.push(3),
                ReplicateOp::StopSustain => out.push(4),
            }
        }
        Body::Update { token, add } => {
            token.encode_into(out);
            encode_tokens(add, out);
        }
        Body::LocalResp { part } => match part {
            Some(p) => {
                out.push(1);
                p.encode_into(out);
            }
            None => out.push(0),
        },
        Body::Error { code, message } => {
            out.push(*code as u8);
            let bytes = message.as_bytes();
            let len = bytes.len().min(u16::MAX as usize);
            out.extend_from_slice(&(len as u16).to_be_bytes());
            out.extend_from_slice(&bytes[..len]);
        }
    }
}

fn decode_body(type_byte: u8, buf: &[u8]) -> Result<Body, WireError> {
    let mut r = Reader { buf, at: 0 };
    let body = match type_byte {
        TYPE_FETCH => Body::Fetch {
            requester: r.addr()?,
            token: r.token()?,
        },
        TYPE_FETCH_RESP => {
            let status = r.byte()?;
            let part = match status {
                0 => Some(r.part()?),
                1 => None,
                _ => return Err(WireError::Malformed("bad fetch status")),
            };
            Body::FetchResp {
                part,
                ditto: r.addrs()?,
            }
        }
        TYPE_ASSENT => {
            let sender = r.addr()?;
            let token = r.token()?;
            let digest = r.digest()?;
            let sample_is_full = match r.byte()? {
                0 => false,
                1 => true,
                _ => return Err(WireError::Malformed("bad sample flag")),
            };
            let sample = r.tokens()?;
            let attach_count = r.u16()? as usize;
            let mut attachments = Vec::with_capacity(attach_count.min(1024));
            for _ in 0..attach_count {
                let t = r.token()?;
                let len = r.u32()? as usize;
                let bytes = r.take(len)?;
                let sealed = SealedBuffer::decode(bytes)
                    .map_err(|_| WireError::Malformed("bad attachment"))?;
                attachments.push((t, sealed));
            }
            Body::Assent {
                sender,
                token,
                digest,
                sample_is_full,
                sample,
                attachments,
            }
        }
        TYPE_ASSENT_RESP => Body::AssentResp {
            missing: r.tokens()?,
        },
        TYPE_BUSY => Body::Busy { ditto: r.addrs()? },
        TYPE_REQUEST_PAYLOAD => Body::RequestPayload { token: r.token()? },
        TYPE_ADOPT => Body::Adopt { part: r.part()? },
        TYPE_REPLICATE => {
            let token = r.token()?;
            let op = match r.byte()? {
                1 => ReplicateOp::StartFlooding { level: r.u32()? },
                2 => ReplicateOp::StartSustain { until_ms: r.u64()? },
                3 => ReplicateOp::StopFlooding,
                4 => ReplicateOp::StopSustain,
                _ => return Err(WireError::Malformed("bad replicate op")),
            };
            Body::Replicate { token, op }
        }
        TYPE_UPDATE => Body::Update {
            token: r.token()?,
            add: r.tokens()?,
        },
        TYPE_LOCAL_RESP => {
            let part = match r.byte()? {
                0 => None,
                1 => Some(r.part()?),
                _ => return Err(WireError::Malformed("bad local resp flag")),
            };
            Body::LocalResp { part }
        }
        TYPE_ERROR => {
            let code =
                ErrorCode::from_u8(r.byte()?).ok_or(WireError::Malformed("bad error code"))?;
            let len = r.u16()? as usize;
            let bytes = r.take(len)?;
            let message = String::from_utf8(bytes.to_vec())
                .map_err(|_| WireError::Malformed("error not utf-8"))?;
            Body::Error { code, message }
        }
        other => return Err(WireError::UnknownType(other)),
    };
    if r.at != buf.len() {
        return Err(WireError::Malformed("trailing bytes in body"));
    }
    Ok(body)
}

fn encode_addrs(addrs: &[HomeLocation], out: &mut Vec<u8>) {
    out.push(addrs.len().min(255) as u8);
    for a in addrs.iter().take(255) {
        a.encode_into(out);
    }
}

fn encode_tokens(tokens: &[Token], out: &mut Vec<u8>) {
    out.extend_from_slice(&(tokens.len() as u32).to_be_bytes());
    for t in tokens {
        t.encode_into(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < self.at + n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn addr(&mut self) -> Result<HomeLocation, WireError> {
        let (a, used) = HomeLocation::decode(&self.buf[self.at..])?;
        self.at += used;
        Ok(a)
    }

    fn addrs(&mut self) -> Result<Vec<HomeLocation>, WireError> {
        let count = self.byte()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(self.addr()?);
        }
        Ok(out)
    }

    fn token(&mut self) -> Result<Token, WireError> {
        let (t, used) = Token::decode_prefix(&self.buf[self.at..])?;
        self.at += used;
        Ok(t)
    }

    fn tokens(&mut self) -> Result<Vec<Token>, WireError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            out.push(self.token()?);
        }
        Ok(out)
    }

    fn part(&mut self) -> Result<DistributedPart, WireError> {
        let (p, used) = DistributedPart::decode_prefix(&self.buf[self.at..])?;
        self.at += used;
        Ok(p)
    }

    fn digest(&mut self) -> Result<ClusterDigest, WireError> {
        let (d, used) = ClusterDigest::decode_prefix(&self.buf[self.at..])?;
        self.at += used;
        Ok(d)
    }
}

/// Token carried by a message, if any; used for trace lines.
pub fn message_token(body: &Body) -> Option<&Token> {
    match body {
        Body::Fetch { token, .. }
        | Body::Assent { token, .. }
        | Body::RequestPayload { token }
        | Body::Replicate { token, .. }
        | Body::Update { token, .. } => Some(token),
        Body::Adopt { part } => Some(&part.token),
        Body::FetchResp {
            part: Some(part), ..
        } => Some(&part.token),
        Body::AssentResp { missing } => missing.first(),
        _ => None,
    }
}

/// Human-readable type name for traces.
pub fn type_name(type_byte: u8) -> &'static str {
    match type_byte {
        TYPE_FETCH => "FETCH",
        TYPE_FETCH_RESP => "FETCH_RESP",
        TYPE_ASSENT => "ASSENT",
        TYPE_ASSENT_RESP => "ASSENT_RESP",
        TYPE_BUSY => "BUSY",
        TYPE_REQUEST_PAYLOAD => "REQUEST_PAYLOAD",
        TYPE_ADOPT => "ADOPT",
        TYPE_REPLICATE => "REPLICATE",
        TYPE_UPDATE => "UPDATE",
        TYPE_LOCAL_RESP => "LOCAL_RESP",
        TYPE_ERROR => "ERROR",
        _ => "UNKNOWN",
    }
}
