//! The MO server.

pub mod node;
pub mod runtime;
pub mod storage;

pub use node::{ClientId, Effects, OutboundRequest, ServerNode};
