//! Sample-weighted model averaging and the aggregator's per-round ledger.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::nn::ModelParams;

/// A locally trained model reported by one client for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u16,
    pub round: u32,
    pub sample_count: u32,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggregateError {
    Empty,
    MixedRounds {
        expected: u32,
        found: u32,
        client_id: u16,
    },
    DuplicateClient(u16),
    ZeroSamples(u16),
    ShapeMismatch(u16),
}

impl fmt::Display for AggregateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "contract violation: no updates to aggregate"),
            Self::MixedRounds { expected, found, client_id } => write!(
                f,
                "protocol error: client {client_id} reported round {found} while aggregating round {expected}"
            ),
            Self::DuplicateClient(id) => write!(f, "protocol error: two updates from client {id}"),
            Self::ZeroSamples(id) => write!(f, "contract violation: client {id} reported zero samples"),
            Self::ShapeMismatch(id) => write!(f, "contract violation: client {id} sent malformed params"),
        }
    }
}

impl core::error::Error for AggregateError {}

/// FedAvg: every parameter becomes `sum_k n_k * w_k / sum_k n_k`.
///
/// Accumulation is in `f64`, visiting clients in ascending id order, and the
/// result is rounded to `f32` once, so the output is independent of the order
/// of `updates`.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelParams, AggregateError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    aggregate_sorted(&sorted)
}

fn aggregate_sorted(updates: &[&ClientUpdate]) -> Result<ModelParams, AggregateError> {
    let first = updates.first().ok_or(AggregateError::Empty)?;
    let round = first.round;
    let mut total = 0u64;
    for (i, u) in updates.iter().enumerate() {
        if u.round != round {
            return Err(AggregateError::MixedRounds {
                expected: round,
                found: u.round,
                client_id: u.client_id,
            });
        }
        if i > 0 && updates[i - 1].client_id == u.client_id {
            return Err(AggregateError::DuplicateClient(u.client_id));
        }
        if u.sample_count == 0 {
            return Err(AggregateError::ZeroSamples(u.client_id));
        }
        let shapes_ok = u
            .params
            .tensors()
            .iter()
            .zip(ModelParams::SHAPES)
            .all(|(t, s)| t.dims() == s);
        if !shapes_ok {
            return Err(AggregateError::ShapeMismatch(u.client_id));
        }
        total += u.sample_count as u64;
    }

    let total = total as f64;
    let mut out = ModelParams::zeros();
    for (ti, dst) in out.tensors_mut().into_iter().enumerate() {
        let mut acc = vec![0.0f64; dst.len()];
        for u in updates {
            let weight = u.sample_count as f64;
            for (a, &w) in acc.iter_mut().zip(u.params.tensors()[ti].data()) {
                *a += weight * w as f64;
            }
        }
        for (d, a) in dst.data_mut().iter_mut().zip(acc) {
            *d = (a / total) as f32;
        }
    }
    Ok(out)
}

/// What the ledger did with an offered update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Accepted,
    /// From an earlier round.
    Stale,
    /// Labelled with a round the aggregator has not opened.
    Future,
    /// A second copy from a client already counted (QoS-1 redelivery).
    Duplicate,
    /// The round already holds `expected` updates.
    Surplus,
}

impl Offer {
    pub fn reason(self) -> &'static str {
        match self {
            Self::Accepted => "accepted",
            Self::Stale => "stale round",
            Self::Future => "future round",
            Self::Duplicate => "duplicate",
            Self::Surplus => "round already full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: u32,
    /// Client ids that were averaged, ascending. Empty for a failed round.
    pub contributors: Vec<u16>,
}

impl RoundOutcome {
    pub fn failed(&self) -> bool {
        self.contributors.is_empty()
    }
}

/// Aggregator bookkeeping for the round in progress.
#[derive(Debug, Clone)]
pub struct RoundState {
    round: u32,
    global: ModelParams,
    received: BTreeMap<u16, ClientUpdate>,
    expected: usize,
}

impl RoundState {
    pub fn new(initial: ModelParams, expected: usize) -> Self {
        Self {
            round: 0,
            global: initial,
            received: BTreeMap::new(),
            expected,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    /// Sets how many updates complete the current round.
    pub fn set_expected(&mut self, expected: usize) {
        self.expected = expected;
    }

    pub fn received_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.received.keys().copied()
    }

    pub fn received_count(&self) -> usize {
        self.received.len()
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() >= self.expected
    }

    pub fn offer(&mut self, update: ClientUpdate) -> Offer {
        if update.round < self.round {
            return Offer::Stale;
        }
        if update.round > self.round {
            return Offer::Future;
        }
        if self.received.contains_key(&update.client_id) {
            return Offer::Duplicate;
        }
        if self.is_complete() {
            return Offer::Surplus;
        }
        self.received.insert(update.client_id, update);
        Offer::Accepted
    }

    /// Averages whatever arrived into the global model and opens the next
    /// round. With nothing received the global model is kept and the round
    /// still advances.
    pub fn close_round(&mut self) -> RoundOutcome {
        let round = self.round;
        let received = core::mem::take(&mut self.received);
        let contributors: Vec<u16> = received.keys().copied().collect();
        if !received.is_empty() {
            let updates: Vec<&ClientUpdate> = received.values().collect();
            // Every entry passed `offer`, so rounds agree and ids are unique.
            self.global = aggregate_sorted(&updates)
                .expect("ledger holds one update per client for one round");
        }
        self.round += 1;
        RoundOutcome {
            round,
            contributors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn filled(value: f32) -> ModelParams {
        let mut p = ModelParams::zeros();
        for t in p.tensors_mut() {
            t.data_mut().fill(value);
        }
        p
    }

    fn update(client_id: u16, round: u32, sample_count: u32, params: ModelParams) -> ClientUpdate {
        ClientUpdate {
            client_id,
            round,
            sample_count,
            params,
        }
    }

    #[test]
    fn equal_weights_average() {
        let out = fedavg_aggregate(&[
            update(1, 0, 300, filled(1.0)),
            update(2, 0, 300, filled(3.0)),
        ])
        .unwrap();
        assert!(out.flatten().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn sample_weighted_average() {
        let out = fedavg_aggregate(&[
            update(1, 0, 100, filled(0.0)),
            update(2, 0, 300, filled(4.0)),
        ])
        .unwrap();
        assert!(out.flatten().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_update_passes_through() {
        let p = crate::nn::init_model(5);
        let out = fedavg_aggregate(&[update(4, 2, 17, p.clone())]).unwrap();
        assert!(out.bit_eq(&p));
    }

    #[test]
    fn errors() {
        assert_eq!(fedavg_aggregate(&[]), Err(AggregateError::Empty));
        assert!(matches!(
            fedavg_aggregate(&[update(1, 0, 1, filled(0.0)), update(2, 1, 1, filled(0.0))]),
            Err(AggregateError::MixedRounds { .. })
        ));
        assert_eq!(
            fedavg_aggregate(&[update(3, 0, 1, filled(0.0)), update(3, 0, 1, filled(0.0))]),
            Err(AggregateError::DuplicateClient(3))
        );
        assert_eq!(
            fedavg_aggregate(&[update(3, 0, 0, filled(0.0))]),
            Err(AggregateError::ZeroSamples(3))
        );
        let mut bad = filled(0.0);
        bad.b2 = Tensor::zeros(&[11]);
        assert_eq!(
            fedavg_aggregate(&[update(8, 0, 1, bad)]),
            Err(AggregateError::ShapeMismatch(8))
        );
    }

    #[test]
    fn ledger_filters_offers() {
        let mut state = RoundState::new(filled(0.0), 2);
        assert_eq!(state.offer(update(1, 1, 1, filled(1.0))), Offer::Future);
        assert_eq!(state.offer(update(1, 0, 1, filled(1.0))), Offer::Accepted);
        assert_eq!(state.offer(update(1, 0, 1, filled(1.0))), Offer::Duplicate);
        assert!(!state.is_complete());
        assert_eq!(state.offer(update(2, 0, 1, filled(3.0))), Offer::Accepted);
        assert_eq!(state.offer(update(3, 0, 1, filled(3.0))), Offer::Surplus);
        assert!(state.is_complete());
        let outcome = state.close_round();
        assert_eq!(
            outcome,
            RoundOutcome {
                round: 0,
                contributors: vec![1, 2]
            }
        );
        assert_eq!(state.round(), 1);
        assert!(state.global().flatten().iter().all(|&v| v == 2.0));
        assert_eq!(state.offer(update(1, 0, 1, filled(1.0))), Offer::Stale);
    }

    #[test]
    fn empty_round_keeps_global_and_advances() {
        let mut state = RoundState::new(filled(0.5), 3);
        let outcome = state.close_round();
        assert!(outcome.failed());
        assert_eq!(state.round(), 1);
        assert!(state.global().bit_eq(&filled(0.5)));
    }
}
