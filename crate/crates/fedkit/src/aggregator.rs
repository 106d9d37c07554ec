//! Server side of the protocol: broadcast, collect, average, evaluate.

use std::time::{Duration, Instant};

use fedkit_core::wire::{self, WireMessage};
use fedkit_core::{
    ContractViolation, Dataset, EvalResult, ModelParams, Offer, RoundOutcome, RoundState,
};

use crate::eval::par_evaluate;
use crate::transport::{Endpoint, Topic, TransportError};

/// Default wall-clock collection window on a real broker.
pub const MQTT_ROUND_DEADLINE: Duration = Duration::from_secs(120);

const POLL: Duration = Duration::from_millis(100);

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
}

/// One closed round with the global model's score on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub outcome: RoundOutcome,
    /// Global model after the round closed.
    pub global: ModelParams,
    pub eval: EvalResult,
    pub wall_ms: u64,
}

/// Re-broadcasts the current round and global model, which resynchronizes
/// every client that asked to (re)join.
pub fn serve_join<E: Endpoint + ?Sized>(
    state: &RoundState,
    endpoint: &mut E,
) -> Result<(), TransportError> {
    broadcast(state, endpoint)
}

fn broadcast<E: Endpoint + ?Sized>(
    state: &RoundState,
    endpoint: &mut E,
) -> Result<(), TransportError> {
    let frame = wire::encode(&WireMessage::GlobalModel {
        round: state.round(),
        params: state.global().clone(),
    });
    endpoint.publish(Topic::Global, &frame)
}

/// Broadcasts the global model, then collects updates until the expected
/// count arrives or `deadline` passes (`None` waits indefinitely), and closes
/// the round. A round with no updates keeps the global model.
pub fn run_round<E: Endpoint + ?Sized>(
    state: &mut RoundState,
    endpoint: &mut E,
    deadline: Option<Duration>,
) -> Result<RoundOutcome, TransportError> {
    let round = state.round();
    broadcast(state, endpoint)?;
    let until = deadline.map(|d| Instant::now() + d);
    while !state.is_complete() {
        let wait = match until {
            Some(t) => {
                let left = t.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    log::warn!(
                        "round={round} deadline passed with {}/{} updates",
                        state.received_count(),
                        state.expected()
                    );
                    break;
                }
                left.min(POLL)
            }
            None => POLL,
        };
        let Some((topic, bytes)) = endpoint.receive(wait)? else {
            continue;
        };
        handle_message(state, endpoint, topic, &bytes)?;
    }
    let outcome = state.close_round();
    if outcome.failed() {
        log::warn!("round={round} failed: no updates, global model unchanged");
    }
    Ok(outcome)
}

fn handle_message<E: Endpoint + ?Sized>(
    state: &mut RoundState,
    endpoint: &mut E,
    topic: Topic,
    bytes: &[u8],
) -> Result<(), TransportError> {
    let round = state.round();
    let msg = match wire::decode(bytes) {
        Ok(msg) => msg,
        Err(e) => {
            log::warn!("round={round} client_id=? discarded: {e} (topic {topic})");
            return Ok(());
        }
    };
    match msg {
        WireMessage::JoinRequest { client_id } => {
            log::debug!("round={round} client_id={client_id} join");
            serve_join(state, endpoint)?;
        }
        WireMessage::ClientUpdate(update) => {
            let client_id = update.client_id;
            let update_round = update.round;
            match state.offer(update) {
                Offer::Accepted => log::info!("round={round} client_id={client_id} received"),
                other => log::info!(
                    "round={round} client_id={client_id} discarded: {} (update round {update_round})",
                    other.reason()
                ),
            }
        }
        WireMessage::GlobalModel { .. } => {
            log::warn!("round={round} client_id=? discarded: unexpected global model on {topic}");
        }
    }
    Ok(())
}

/// Runs `n_rounds` rounds, evaluating the new global model on `test` after
/// each. `before_round` runs ahead of every broadcast and may adjust the
/// state (for instance the expected update count).
pub fn run_training<E, F>(
    state: &mut RoundState,
    endpoint: &mut E,
    n_rounds: u32,
    test: &Dataset,
    deadline: Option<Duration>,
    mut before_round: F,
) -> Result<Vec<RoundReport>, AggregatorError>
where
    E: Endpoint + ?Sized,
    F: FnMut(&mut RoundState) -> Result<(), AggregatorError>,
{
    let mut reports = Vec::with_capacity(n_rounds as usize);
    for _ in 0..n_rounds {
        let started = Instant::now();
        before_round(state)?;
        let outcome = run_round(state, endpoint, deadline)?;
        let eval = par_evaluate(state.global(), test)?;
        let wall_ms = started.elapsed().as_millis() as u64;
        log::info!(
            "round={} contributors={} accuracy={:.4} loss={:.4}",
            outcome.round,
            outcome.contributors.len(),
            eval.accuracy,
            eval.mean_loss
        );
        reports.push(RoundReport {
            outcome,
            global: state.global().clone(),
            eval,
            wall_ms,
        });
    }
    Ok(reports)
}
