//! Seeded participation: which clients are offline or unselected per round.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use rand::seq::index;

use crate::error::{ensure, ContractViolation};
use crate::rng::{seeded, seeded_stream};

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// `run_seed XOR (client_id * 0x9E3779B97F4A7C15)`, wrapping.
pub fn client_seed(run_seed: u64, client_id: u16) -> u64 {
    run_seed ^ (client_id as u64).wrapping_mul(SEED_MIX)
}

/// Offline client ids for each round.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChurnSchedule {
    offline: Vec<BTreeSet<u16>>,
}

impl ChurnSchedule {
    /// A schedule where everyone is online for `n_rounds`.
    pub fn friendly(n_rounds: u32) -> Self {
        Self {
            offline: (0..n_rounds).map(|_| BTreeSet::new()).collect(),
        }
    }

    pub fn from_rounds(offline: Vec<BTreeSet<u16>>) -> Self {
        Self { offline }
    }

    pub fn n_rounds(&self) -> usize {
        self.offline.len()
    }

    /// Offline set for `round`; rounds past the end of the schedule have none.
    pub fn offline(&self, round: u32) -> BTreeSet<u16> {
        self.offline
            .get(round as usize)
            .cloned()
            .unwrap_or_default()
    }

    pub fn is_online(&self, client_id: u16, round: u32) -> bool {
        self.offline
            .get(round as usize)
            .is_none_or(|set| !set.contains(&client_id))
    }

    /// Per-round availability of one client.
    pub fn availability(&self, client_id: u16) -> Vec<bool> {
        (0..self.offline.len() as u32)
            .map(|r| self.is_online(client_id, r))
            .collect()
    }
}

/// Each round independently takes `drops_per_round` distinct ids from
/// `1..=n_clients`, uniformly, from a generator seeded with `seed`.
pub fn make_churn_schedule(
    n_clients: usize,
    drops_per_round: usize,
    n_rounds: u32,
    seed: u64,
) -> Result<ChurnSchedule, ContractViolation> {
    ensure!(
        drops_per_round < n_clients,
        "cannot drop {} of {} clients per round",
        drops_per_round,
        n_clients
    );
    ensure!(
        n_clients <= u16::MAX as usize,
        "{} clients exceed the 16-bit id space",
        n_clients
    );
    let mut rng = seeded(seed);
    let offline = (0..n_rounds)
        .map(|_| {
            index::sample(&mut rng, n_clients, drops_per_round)
                .into_iter()
                .map(|i| (i + 1) as u16)
                .collect()
        })
        .collect();
    Ok(ChurnSchedule { offline })
}

/// Clients picked for `round` when only a fraction `C` take part:
/// `ceil(C * n_clients)` ids drawn uniformly, ascending. `C = 1` picks all.
pub fn select_clients(
    n_clients: usize,
    fraction: f64,
    seed: u64,
    round: u32,
) -> Result<BTreeSet<u16>, ContractViolation> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "client fraction {} outside (0, 1]",
        fraction
    );
    let take = libm::ceil(fraction * n_clients as f64) as usize;
    let take = take.clamp(1, n_clients);
    if take == n_clients {
        return Ok((1..=n_clients as u16).collect());
    }
    let mut rng = seeded_stream(seed, round as u64);
    Ok(index::sample(&mut rng, n_clients, take)
        .into_iter()
        .map(|i| (i + 1) as u16)
        .collect())
}
