//! Networking: wire message encoding, the deterministic simulated network
//! used for protocol tests, and the real stream transport.

pub mod message;
pub mod simnet;
pub mod transport;
