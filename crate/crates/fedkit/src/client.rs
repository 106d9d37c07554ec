//! Edge client: join, wait for the global model, train, publish.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use fedkit_core::rng::seeded_stream;
use fedkit_core::wire::{self, WireMessage};
use fedkit_core::{
    client_seed, train_epochs, ClientUpdate, ContractViolation, ModelParams, Shard, TrainConfig,
};

use crate::transport::{Endpoint, Topic, TransportError};

const POLL: Duration = Duration::from_millis(100);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error("shard size {0} does not fit the wire sample count")]
    ShardTooLarge(usize),
}

#[derive(Debug, Clone)]
pub struct ClientRuntime {
    pub client_id: u16,
    pub shard: Shard,
    pub config: TrainConfig,
    /// Rounds this client sits out; indexes past the end count as available.
    pub availability: Vec<bool>,
    /// Last round this client published an update for.
    pub current_round: Option<u32>,
    /// Exit after publishing the update for this round.
    pub last_round: Option<u32>,
}

impl ClientRuntime {
    pub fn new(shard: Shard, config: TrainConfig) -> Self {
        Self {
            client_id: shard.client_id,
            shard,
            config,
            availability: Vec::new(),
            current_round: None,
            last_round: None,
        }
    }

    pub fn is_available(&self, round: u32) -> bool {
        self.availability
            .get(round as usize)
            .copied()
            .unwrap_or(true)
    }

    /// Local training for `round` from `global`. The RNG stream depends only
    /// on the run seed, the client id and the round.
    pub fn train(&self, round: u32, global: &ModelParams) -> Result<ClientUpdate, ClientError> {
        let sample_count = u32::try_from(self.shard.len())
            .map_err(|_| ClientError::ShardTooLarge(self.shard.len()))?;
        let mut rng = seeded_stream(
            client_seed(self.config.seed, self.client_id),
            u64::from(round),
        );
        let params = train_epochs(global, &self.shard.data, &self.config, &mut rng)?;
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            sample_count,
            params,
        })
    }
}

/// Rounds this client published updates for, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientReport {
    pub published: Vec<u32>,
}

/// Runs until the transport closes, `stop` is raised, or the update for
/// `runtime.last_round` is out. Sends a join request on start and after every
/// reconnect; global models for rounds already handled are ignored.
pub fn client_loop<E: Endpoint + ?Sized>(
    runtime: &mut ClientRuntime,
    endpoint: &mut E,
    stop: &AtomicBool,
) -> Result<ClientReport, ClientError> {
    let id = runtime.client_id;
    let join = wire::encode(&WireMessage::JoinRequest { client_id: id });
    let mut report = ClientReport::default();
    let mut need_join = true;
    while !stop.load(Ordering::SeqCst) {
        if endpoint.take_reconnected() {
            log::debug!("client_id={id} reconnected, rejoining");
            need_join = true;
        }
        if need_join {
            match endpoint.publish(Topic::Join, &join) {
                Err(TransportError::Closed) => break,
                other => other?,
            }
            need_join = false;
        }
        let (topic, bytes) = match endpoint.receive(POLL) {
            Ok(Some(msg)) => msg,
            Ok(None) => continue,
            Err(TransportError::Closed) => break,
            Err(e) => return Err(e.into()),
        };
        let (round, global) = match wire::decode(&bytes) {
            Ok(WireMessage::GlobalModel { round, params }) => (round, params),
            Ok(other) => {
                log::warn!("client_id={id} ignoring {} on {topic}", other.kind());
                continue;
            }
            Err(e) => {
                log::warn!("client_id={id} discarding undecodable frame: {e}");
                continue;
            }
        };
        if runtime.current_round.is_some_and(|done| round <= done) || !runtime.is_available(round) {
            continue;
        }
        let update = runtime.train(round, &global)?;
        match endpoint.publish(
            Topic::Updates,
            &wire::encode(&WireMessage::ClientUpdate(update)),
        ) {
            Err(TransportError::Closed) => break,
            other => other?,
        }
        runtime.current_round = Some(round);
        report.published.push(round);
        if runtime.last_round == Some(round) {
            break;
        }
    }
    Ok(report)
}
