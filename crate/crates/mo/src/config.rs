//! Server configuration, read from a `key=value` text file and overridable
//! by CLI flags.

use crate::token::HomeLocation;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    BadLine(usize),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("grace_period_ms ({grace}) must exceed clock_skew_ms ({skew})")]
    GraceNotAboveSkew { grace: u64, skew: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    /// Remote channel listen address.
    pub listen: HomeLocation,
    /// Local (trusted) channel listen address.
    pub local_listen: HomeLocation,
    /// Shared secret required on the local channel.
    pub secret: [u8; 16],
    /// Cache capacity in objects.
    pub cache_capacity: usize,
    /// Grace period T* kept past expiry; must exceed the clock skew bound T.
    pub grace_period_ms: u64,
    /// Clock skew bound T.
    pub clock_skew_ms: u64,
    /// A fetch is refused busy when more identical fetches than this arrived
    /// within the busy window.
    pub busy_threshold: usize,
    pub busy_window_ms: u64,
    /// Maximum addresses on a ditto list.
    pub ditto_max: usize,
    /// Peers contacted per flood step; `None` means unlimited.
    pub flood_fanout: Option<usize>,
    /// Anti-stale re-flood interval.
    pub flood_interval_ms: u64,
    /// Remote request retransmit timeout before a send is considered failed.
    pub rto_ms: u64,
    /// Attempts against the home server before consulting the ditto list.
    pub fetch_retries: u32,
    pub max_payload_size: usize,
    /// Append-file backing the store; `None` keeps the store in memory only.
    pub store_file: Option<std::path::PathBuf>,
}

impl ServerConfig {
    pub fn with_listen(listen: HomeLocation, local_listen: HomeLocation) -> Self {
        ServerConfig {
            listen,
            local_listen,
            secret: [0; 16],
            cache_capacity: 1024,
            grace_period_ms: 30_000,
            clock_skew_ms: 10_000,
            busy_threshold: 8,
            busy_window_ms: 1_000,
            ditto_max: 8,
            flood_fanout: None,
            flood_interval_ms: 1_000,
            rto_ms: 1_000,
            fetch_retries: 3,
            max_payload_size: crate::token::DEFAULT_MAX_PAYLOAD_SIZE,
            store_file: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grace_period_ms <= self.clock_skew_ms {
            return Err(ConfigError::GraceNotAboveSkew {
                grace: self.grace_period_ms,
                skew: self.clock_skew_ms,
            });
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<ServerConfig, ConfigError> {
        let mut cfg = ServerConfig::with_listen(
            HomeLocation::new("localhost", 7400).unwrap(),
            HomeLocation::new("localhost", 7401).unwrap(),
        );
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine(n + 1))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "listen" => self.listen = value.parse().map_err(|_| bad("expected host:port"))?,
            "local_listen" => {
                self.local_listen = value.parse().map_err(|_| bad("expected host:port"))?
            }
            "secret" => {
                let bytes = hex_decode(value).ok_or_else(|| bad("expected 32 hex chars"))?;
                if bytes.len() != 16 {
                    return Err(bad("expected 32 hex chars"));
                }
                self.secret.copy_from_slice(&bytes);
            }
            "cache_capacity" => {
                self.cache_capacity = value.parse().map_err(|_| bad("expected integer"))?
            }
            "grace_ms" | "grace_period_ms" => {
                self.grace_period_ms = value.parse().map_err(|_| bad("expected integer"))?
            }
            "clock_skew_ms" => {
                self.clock_skew_ms = value.parse().map_err(|_| bad("expected integer"))?
            }
            "busy_threshold" => {
                self.busy_threshold = value.parse().map_err(|_| bad("expected integer"))?
            }
            "busy_window_ms" => {
                self.busy_window_ms = value.parse().map_err(|_| bad("expected integer"))?
            }
            "ditto_max" => self.ditto_max = value.parse().map_err(|_| bad("expected integer"))?,
            "flood_fanout" => {
                let n: usize = value.parse().map_err(|_| bad("expected integer"))?;
                self.flood_fanout = if n == 0 { None } else { Some(n) };
            }
            "flood_interval_ms" => {
                self.flood_interval_ms = value.parse().map_err(|_| bad("expected integer"))?
            }
            "rto_ms" => self.rto_ms = value.parse().map_err(|_| bad("expected integer"))?,
            "fetch_retries" => {
                self.fetch_retries = value.parse().map_err(|_| bad("expected integer"))?
            }
            "max_payload_size" => {
                self.max_payload_size = value.parse().map_err(|_| bad("expected integer"))?
            }
            "store_file" => self.store_file = Some(value.into()),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }
}

pub fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

pub fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
