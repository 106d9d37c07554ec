//! Publish/subscribe fabric between the aggregator and its clients.
//!
//! Three topics carry [`fedkit_core::wire`] frames: the aggregator publishes
//! on `fl/global` and subscribes to `fl/updates` and `fl/join`; clients do the
//! reverse. Two backends implement [`Endpoint`]: an in-process [`loopback`]
//! fabric with deterministic delivery, and [`mqtt`] for a real broker.

pub mod loopback;
pub mod mqtt;

use std::fmt;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Topic {
    /// Aggregator to every client.
    Global,
    /// Client updates to the aggregator.
    Updates,
    /// Join/rejoin requests to the aggregator.
    Join,
}

impl Topic {
    pub const ALL: [Topic; 3] = [Topic::Global, Topic::Updates, Topic::Join];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Global => "fl/global",
            Topic::Updates => "fl/updates",
            Topic::Join => "fl/join",
        }
    }

    pub fn parse(name: &str) -> Option<Topic> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Server,
    Client,
}

impl Role {
    pub fn subscriptions(self) -> &'static [Topic] {
        match self {
            Role::Server => &[Topic::Updates, Topic::Join],
            Role::Client => &[Topic::Global],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("endpoint is disconnected")]
    Disconnected,
    #[error("transport closed")]
    Closed,
    #[error("client id {0} is already connected")]
    DuplicateId(u16),
    #[error("no client with id {0}")]
    UnknownClient(u16),
    #[error("a server endpoint is already connected")]
    DuplicateServer,
    #[error("invalid broker URI {uri:?}: {reason}")]
    InvalidUri { uri: String, reason: String },
    #[error("could not connect to {uri} after {attempts} attempts: {last_error}")]
    Connect {
        uri: String,
        attempts: u32,
        last_error: String,
    },
    #[error("TLS broker connections are not supported by this build")]
    TlsUnavailable,
    #[error("mqtt client error: {0}")]
    Mqtt(String),
}

/// One participant's connection to the fabric.
pub trait Endpoint: Send {
    fn role(&self) -> Role;

    fn id(&self) -> u16;

    /// Delivers `payload` to every current subscriber of `topic`. Returns once
    /// the transport has accepted the message; a topic nobody listens to
    /// swallows it.
    fn publish(&mut self, topic: Topic, payload: &[u8]) -> Result<(), TransportError>;

    /// Oldest undelivered message, or `None` once `timeout` elapses.
    fn receive(&mut self, timeout: Duration) -> Result<Option<(Topic, Vec<u8>)>, TransportError>;

    /// Reports (once) that the endpoint came back after being offline, so the
    /// owner knows to rejoin.
    fn take_reconnected(&mut self) -> bool;
}

/// Takes clients offline for whole rounds. While offline a client neither
/// receives nor delivers anything; messages it missed are not replayed.
pub trait ChurnControl: Send + Sync {
    fn drop_client(&self, client_id: u16) -> Result<(), TransportError>;
    fn restore_client(&self, client_id: u16) -> Result<(), TransportError>;
}
