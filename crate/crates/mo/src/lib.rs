//! Micro-object distributed programming system.
//!
//! Distribution here comes from copying immutable objects to where they are
//! needed, not from remote calls. A micro object carries an immutable token
//! and payload plus a grow-only cluster of tokens; a network of MO servers
//! copies the distributed part around under purely local replication
//! policies, and an in-application library tier exposes the API.
//!
//! Crate layout:
//! - [`token`], [`cluster`], [`security`], [`mobject`]: the object model.
//! - [`net`]: wire protocol, a deterministic simulated network, and the TCP
//!   transport.
//! - [`server`]: the MO server node: store, LRU cache, request handlers,
//!   replication policy engine, expiry sweep.
//! - [`libserver`]: the application-facing session with callbacks and waits.
//! - [`dao`]: distributed application objects built from object graphs, and
//!   the reference distributed file.

pub mod cluster;
pub mod config;
pub mod dao;
pub mod libserver;
pub mod mobject;
pub mod net;
pub mod security;
pub mod server;
pub mod token;

pub use cluster::{Cluster, ClusterDigest};
pub use config::ServerConfig;
pub use mobject::{DistributedPart, MicroObject, ReplicationData, ReplicationPolicy};
pub use security::{SealedBuffer, SecurityMode, SecurityPolicy};
pub use token::{ExpireDate, HomeLocation, Payload, Token};

// compile-checks the README examples under `cargo test`
#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct ReadmeDoctests;
