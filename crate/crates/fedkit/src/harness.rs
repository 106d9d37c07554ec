//! Experiment driver: federated runs over either transport, the centralized
//! and single-client baselines, and the full comparison grid.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use fedkit_core::dataset::seeded_permutation;
use fedkit_core::rng::seeded;
use fedkit_core::{
    init_model, make_churn_schedule, partition_shards, select_clients, ChurnSchedule,
    ContractViolation, ModelParams, RoundState, TrainConfig,
};

use crate::aggregator::{run_training, AggregatorError, RoundReport, MQTT_ROUND_DEADLINE};
use crate::client::{client_loop, ClientError, ClientReport, ClientRuntime};
use crate::data::Mnist;
use crate::eval::par_evaluate;
use crate::metrics::MetricsRecord;
use crate::transport::loopback::Fabric;
use crate::transport::mqtt::{ChurnGates, MqttConfig, MqttEndpoint};
use crate::transport::{ChurnControl, Endpoint, Role, TransportError};

pub const SHARD_SIZE: usize = 300;
pub const DEFAULT_ROUNDS: u32 = 10;
pub const DEFAULT_BASELINE_EPOCHS: u32 = 30;
pub const TRAIN_SET_SIZE: usize = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Federated,
    FederatedHostile,
    Centralized,
    SingleClient,
}

impl ExperimentKind {
    pub fn is_federated(self) -> bool {
        matches!(self, Self::Federated | Self::FederatedHostile)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportKind {
    Loopback,
    Mqtt(MqttConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub n_clients: usize,
    /// Local epochs `E` for federated kinds; total epochs for baselines.
    pub local_epochs: u32,
    pub minibatch: usize,
    pub n_rounds: u32,
    pub drops_per_round: usize,
    /// Pooled training samples for the centralized baseline.
    pub n_samples: usize,
    pub shard_size: usize,
    pub client_fraction: f64,
    pub step_size: f32,
    pub dropout_rate: f32,
    pub seed: u64,
    pub transport: TransportKind,
    /// Collection window per round; `None` waits until every live client
    /// reports. Defaults to unbounded on loopback and two minutes on MQTT.
    pub round_deadline: Option<Duration>,
}

impl ExperimentSpec {
    fn base(kind: ExperimentKind) -> Self {
        let train = TrainConfig::default();
        Self {
            kind,
            n_clients: 20,
            local_epochs: 5,
            minibatch: train.minibatch,
            n_rounds: DEFAULT_ROUNDS,
            drops_per_round: 0,
            n_samples: 6000,
            shard_size: SHARD_SIZE,
            client_fraction: train.client_fraction,
            step_size: train.step_size,
            dropout_rate: train.dropout_rate,
            seed: train.seed,
            transport: TransportKind::Loopback,
            round_deadline: None,
        }
    }

    pub fn federated(n_clients: usize, local_epochs: u32) -> Self {
        Self {
            n_clients,
            local_epochs,
            ..Self::base(ExperimentKind::Federated)
        }
    }

    pub fn hostile(n_clients: usize, local_epochs: u32, drops_per_round: usize) -> Self {
        Self {
            n_clients,
            local_epochs,
            drops_per_round,
            ..Self::base(ExperimentKind::FederatedHostile)
        }
    }

    pub fn centralized(n_samples: usize, epochs: u32) -> Self {
        Self {
            n_samples,
            local_epochs: epochs,
            n_clients: 1,
            ..Self::base(ExperimentKind::Centralized)
        }
    }

    pub fn single_client(epochs: u32) -> Self {
        Self {
            local_epochs: epochs,
            n_clients: 1,
            ..Self::base(ExperimentKind::SingleClient)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            client_fraction: self.client_fraction,
            local_epochs: self.local_epochs,
            minibatch: self.minibatch,
            step_size: self.step_size,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }

    /// Stable label used in metrics files.
    pub fn id(&self) -> String {
        match self.kind {
            ExperimentKind::Federated => {
                format!("federated-c{}-e{}", self.n_clients, self.local_epochs)
            }
            ExperimentKind::FederatedHostile => {
                format!(
                    "hostile-c{}-e{}-d{}",
                    self.n_clients, self.local_epochs, self.drops_per_round
                )
            }
            ExperimentKind::Centralized => format!("centralized-{}", self.n_samples),
            ExperimentKind::SingleClient => "single".to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |msg: String| Err(HarnessError::InvalidSpec(msg));
        let cfg = TrainConfig {
            local_epochs: 1,
            ..self.train_config()
        };
        cfg.validate()?;
        if self.kind.is_federated() && self.n_clients < 2 {
            return invalid(format!(
                "federated runs need at least 2 clients, got {}",
                self.n_clients
            ));
        }
        if self.kind != ExperimentKind::FederatedHostile && self.drops_per_round != 0 {
            return invalid("drops per round only apply to hostile runs".into());
        }
        if self.kind == ExperimentKind::FederatedHostile && self.drops_per_round >= self.n_clients {
            return invalid(format!(
                "{} drops leave none of {} clients",
                self.drops_per_round, self.n_clients
            ));
        }
        let samples = match self.kind {
            ExperimentKind::Centralized => self.n_samples,
            _ => self.n_clients.saturating_mul(self.shard_size),
        };
        if samples == 0 || samples > TRAIN_SET_SIZE {
            return invalid(format!(
                "{samples} training samples requested, 1..={TRAIN_SET_SIZE} available"
            ));
        }
        if self.kind.is_federated() {
            cfg.validate_for_shard(self.shard_size)?;
        } else {
            cfg.validate_for_shard(samples)?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("aggregator: {0}")]
    Aggregator(#[from] AggregatorError),
    #[error("client {id}: {source}")]
    Client { id: u16, source: ClientError },
    #[error("client {0} thread panicked")]
    ClientPanic(u16),
}

/// A federated run's metrics plus what the aggregator saw each round.
#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub records: Vec<MetricsRecord>,
    /// Global model after each round.
    pub globals: Vec<ModelParams>,
    /// Clients averaged in each round, ascending.
    pub contributors: Vec<Vec<u16>>,
    /// Clients expected (online and selected) in each round.
    pub online: Vec<BTreeSet<u16>>,
    pub client_reports: Vec<ClientReport>,
}

/// Clients that should take part in `round`: selected by the fraction `C`
/// and not scheduled offline.
fn live_clients(
    spec: &ExperimentSpec,
    schedule: &ChurnSchedule,
    round: u32,
) -> Result<BTreeSet<u16>, ContractViolation> {
    let selected = select_clients(spec.n_clients, spec.client_fraction, spec.seed, round)?;
    let offline = schedule.offline(round);
    Ok(selected.difference(&offline).copied().collect())
}

pub fn churn_schedule(spec: &ExperimentSpec) -> Result<ChurnSchedule, HarnessError> {
    Ok(match spec.kind {
        ExperimentKind::FederatedHostile => make_churn_schedule(
            spec.n_clients,
            spec.drops_per_round,
            spec.n_rounds,
            spec.seed,
        )?,
        _ => ChurnSchedule::friendly(spec.n_rounds),
    })
}

/// Shards the training set, starts one client thread per shard and drives
/// the aggregator on the calling thread.
pub fn run_federated(spec: &ExperimentSpec, mnist: &Mnist) -> Result<FederatedRun, HarnessError> {
    spec.validate()?;
    if !spec.kind.is_federated() {
        return Err(HarnessError::InvalidSpec(format!(
            "{:?} is not a federated experiment",
            spec.kind
        )));
    }
    match &spec.transport {
        TransportKind::Loopback => {
            let fabric = Fabric::new();
            let server = fabric.connect_server()?;
            let clients = (1..=spec.n_clients as u16)
                .map(|id| fabric.connect_client(id))
                .collect::<Result<Vec<_>, _>>()?;
            let result = drive(spec, mnist, server, clients, &fabric, spec.round_deadline);
            fabric.close();
            result
        }
        TransportKind::Mqtt(config) => {
            let gates = ChurnGates::new();
            let server = MqttEndpoint::connect(config, Role::Server, 0)?;
            let clients = (1..=spec.n_clients as u16)
                .map(|id| MqttEndpoint::connect_gated(config, Role::Client, id, &gates))
                .collect::<Result<Vec<_>, _>>()?;
            let deadline = spec.round_deadline.or(Some(MQTT_ROUND_DEADLINE));
            drive(spec, mnist, server, clients, &gates, deadline)
        }
    }
}

fn drive<S, C, K>(
    spec: &ExperimentSpec,
    mnist: &Mnist,
    mut server: S,
    clients: Vec<C>,
    churn: &K,
    deadline: Option<Duration>,
) -> Result<FederatedRun, HarnessError>
where
    S: Endpoint,
    C: Endpoint,
    K: ChurnControl,
{
    let experiment = spec.id();
    let config = spec.train_config();
    let shards = partition_shards(&mnist.train, spec.n_clients, spec.shard_size, spec.seed)?;
    let schedule = churn_schedule(spec)?;
    let mut online_sets = Vec::with_capacity(spec.n_rounds as usize);
    let stop = AtomicBool::new(false);

    let (training, client_results) = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .into_iter()
            .zip(clients)
            .map(|(shard, mut endpoint)| {
                let id = shard.client_id;
                let mut runtime = ClientRuntime::new(shard, config);
                let stop = &stop;
                (
                    id,
                    scope.spawn(move || client_loop(&mut runtime, &mut endpoint, stop)),
                )
            })
            .collect();

        let mut state = RoundState::new(init_model(spec.seed), spec.n_clients);
        let mut online: BTreeSet<u16> = (1..=spec.n_clients as u16).collect();
        let training = run_training(
            &mut state,
            &mut server,
            spec.n_rounds,
            &mnist.test,
            deadline,
            |state| {
                let next = live_clients(spec, &schedule, state.round())?;
                for &id in online.difference(&next) {
                    churn.drop_client(id)?;
                }
                for &id in next.difference(&online) {
                    churn.restore_client(id)?;
                }
                online = next;
                state.set_expected(online.len());
                online_sets.push(online.clone());
                Ok(())
            },
        );
        // Rejoining everyone lets the client loops see the stop flag promptly.
        stop.store(true, Ordering::SeqCst);
        for id in 1..=spec.n_clients as u16 {
            let _ = churn.restore_client(id);
        }
        let results: Vec<_> = handles.into_iter().map(|(id, h)| (id, h.join())).collect();
        (training, results)
    });

    let reports: Vec<RoundReport> = training?;
    let mut client_reports = Vec::with_capacity(client_results.len());
    for (id, joined) in client_results {
        let report = joined
            .map_err(|_| HarnessError::ClientPanic(id))?
            .map_err(|source| HarnessError::Client { id, source })?;
        client_reports.push(report);
    }
    let mut globals = Vec::new();
    let mut contributors = Vec::new();
    let mut records = Vec::new();
    for report in reports {
        records.push(MetricsRecord {
            experiment: experiment.clone(),
            round: report.outcome.round,
            accuracy: report.eval.accuracy,
            loss: report.eval.mean_loss,
            wall_ms: report.wall_ms,
        });
        contributors.push(report.outcome.contributors);
        globals.push(report.global);
    }
    Ok(FederatedRun {
        records,
        globals,
        contributors,
        online: online_sets,
        client_reports,
    })
}

/// Trains one model on the first `n_samples` of the seeded permutation of the
/// training set (the union of the first `n_samples / 300` client shards).
pub fn run_centralized(
    spec: &ExperimentSpec,
    mnist: &Mnist,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let spec = ExperimentSpec {
        kind: ExperimentKind::Centralized,
        ..spec.clone()
    };
    spec.validate()?;
    let order = seeded_permutation(mnist.train.len(), spec.seed);
    let pooled = mnist.train.subset(&order[..spec.n_samples]);
    train_baseline(&spec, &pooled, mnist)
}

/// Trains on client 1's shard alone.
pub fn run_single_client(
    spec: &ExperimentSpec,
    mnist: &Mnist,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let spec = ExperimentSpec {
        kind: ExperimentKind::SingleClient,
        n_clients: 1,
        ..spec.clone()
    };
    spec.validate()?;
    let shard = partition_shards(&mnist.train, 1, spec.shard_size, spec.seed)?.remove(0);
    train_baseline(&spec, &shard.data, mnist)
}

/// One record per epoch; zero epochs yields a single record for the
/// untrained model.
fn train_baseline(
    spec: &ExperimentSpec,
    data: &fedkit_core::Dataset,
    mnist: &Mnist,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let experiment = spec.id();
    let config = TrainConfig {
        local_epochs: 1,
        ..spec.train_config()
    };
    let mut params = init_model(spec.seed);
    let mut rng = seeded(spec.seed);
    let record = |round: u32,
                  params: &ModelParams,
                  started: Instant|
     -> Result<MetricsRecord, HarnessError> {
        let eval = par_evaluate(params, &mnist.test)?;
        Ok(MetricsRecord {
            experiment: experiment.clone(),
            round,
            accuracy: eval.accuracy,
            loss: eval.mean_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    };
    if spec.local_epochs == 0 {
        return Ok(vec![record(0, &params, Instant::now())?]);
    }
    let mut records = Vec::with_capacity(spec.local_epochs as usize);
    for epoch in 1..=spec.local_epochs {
        let started = Instant::now();
        params = fedkit_core::train_epochs(&params, data, &config, &mut rng)?;
        records.push(record(epoch, &params, started)?);
    }
    Ok(records)
}

/// Runs any kind of experiment and returns its metrics.
pub fn run_experiment(
    spec: &ExperimentSpec,
    mnist: &Mnist,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    match spec.kind {
        ExperimentKind::Federated | ExperimentKind::FederatedHostile => {
            Ok(run_federated(spec, mnist)?.records)
        }
        ExperimentKind::Centralized => run_centralized(spec, mnist),
        ExperimentKind::SingleClient => run_single_client(spec, mnist),
    }
}

/// Published accuracies (percent) the grid is compared against.
pub mod reference {
    /// (clients, local epochs, final accuracy)
    pub const FEDERATED: [(usize, u32, f64); 9] = [
        (10, 1, 84.63),
        (15, 1, 88.03),
        (20, 1, 88.42),
        (10, 3, 88.03),
        (15, 3, 88.68),
        (20, 3, 89.13),
        (10, 5, 88.73),
        (15, 5, 89.20),
        (20, 5, 90.55),
    ];
    /// (pooled samples, peak accuracy); 300 samples per client.
    pub const CENTRALIZED: [(usize, f64); 3] = [(3000, 92.87), (4500, 94.26), (6000, 95.23)];
    pub const SINGLE_CLIENT: f64 = 78.23;
    /// (drops per round, final accuracy) with 20 clients and E = 5.
    pub const HOSTILE: [(usize, f64); 3] = [(4, 89.67), (8, 87.95), (12, 86.37)];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub id: String,
    pub kind: ExperimentKind,
    pub clients: usize,
    pub epochs: u32,
    pub drops: usize,
    pub samples: usize,
    pub seed: u64,
    pub reference_accuracy: f64,
    /// Final accuracy for federated cells, peak for baselines (percent).
    pub accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub peak_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub min_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub seed: u64,
    pub rounds: u32,
    pub baseline_epochs: u32,
    pub minibatch: usize,
    pub step_size: f32,
    pub dropout_rate: f32,
    pub results: Vec<CellSummary>,
}

impl GridSummary {
    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.results.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

/// The 16 cells of the comparison grid, each with its reference accuracy.
pub fn grid_specs(base: &ExperimentSpec, baseline_epochs: u32) -> Vec<(ExperimentSpec, f64)> {
    let common = |spec: ExperimentSpec| ExperimentSpec {
        minibatch: base.minibatch,
        n_rounds: base.n_rounds,
        shard_size: base.shard_size,
        client_fraction: base.client_fraction,
        step_size: base.step_size,
        dropout_rate: base.dropout_rate,
        seed: base.seed,
        transport: base.transport.clone(),
        round_deadline: base.round_deadline,
        ..spec
    };
    let mut cells = Vec::with_capacity(16);
    for (clients, epochs, reference) in reference::FEDERATED {
        cells.push((
            common(ExperimentSpec::federated(clients, epochs)),
            reference,
        ));
    }
    for (samples, reference) in reference::CENTRALIZED {
        cells.push((
            common(ExperimentSpec::centralized(samples, baseline_epochs)),
            reference,
        ));
    }
    cells.push((
        common(ExperimentSpec::single_client(baseline_epochs)),
        reference::SINGLE_CLIENT,
    ));
    for (drops, reference) in reference::HOSTILE {
        cells.push((common(ExperimentSpec::hostile(20, 5, drops)), reference));
    }
    cells
}

pub fn summarize(
    spec: &ExperimentSpec,
    reference: f64,
    result: &Result<Vec<MetricsRecord>, HarnessError>,
) -> CellSummary {
    let pct = |x: f64| x * 100.0;
    let (final_accuracy, peak_accuracy, final_loss, min_loss, error) = match result {
        Ok(records) if !records.is_empty() => {
            let last = records.last().expect("non-empty");
            let peak = records
                .iter()
                .map(|r| r.accuracy)
                .fold(f64::NEG_INFINITY, f64::max);
            let min_loss = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
            (
                Some(pct(last.accuracy)),
                Some(pct(peak)),
                Some(last.loss),
                Some(min_loss),
                None,
            )
        }
        Ok(_) => (
            None,
            None,
            None,
            None,
            Some("no metrics recorded".to_string()),
        ),
        Err(e) => (None, None, None, None, Some(e.to_string())),
    };
    let accuracy = if spec.kind.is_federated() {
        final_accuracy
    } else {
        peak_accuracy
    };
    CellSummary {
        id: spec.id(),
        kind: spec.kind,
        clients: spec.n_clients,
        epochs: spec.local_epochs,
        drops: spec.drops_per_round,
        samples: match spec.kind {
            ExperimentKind::Centralized => spec.n_samples,
            _ => spec.n_clients * spec.shard_size,
        },
        seed: spec.seed,
        reference_accuracy: reference,
        accuracy,
        final_accuracy,
        peak_accuracy,
        final_loss,
        min_loss,
        error,
    }
}

/// Runs every grid cell. A failing cell is recorded with null results and
/// the rest still run. `parallel` runs cells concurrently; each cell is
/// seeded on its own, so the results do not change.
pub fn run_grid(
    base: &ExperimentSpec,
    baseline_epochs: u32,
    mnist: &Mnist,
    parallel: bool,
) -> (GridSummary, Vec<Vec<MetricsRecord>>) {
    let cells = grid_specs(base, baseline_epochs);
    let run = |(spec, reference): &(ExperimentSpec, f64)| {
        log::info!("grid: running {}", spec.id());
        let result = run_experiment(spec, mnist);
        if let Err(e) = &result {
            log::error!("grid: {} failed: {e}", spec.id());
        }
        (
            summarize(spec, *reference, &result),
            result.unwrap_or_default(),
        )
    };
    let outcomes: Vec<_> = if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    };
    let (results, metrics) = outcomes.into_iter().unzip();
    let summary = GridSummary {
        seed: base.seed,
        rounds: base.n_rounds,
        baseline_epochs,
        minibatch: base.minibatch,
        step_size: base.step_size,
        dropout_rate: base.dropout_rate,
        results,
    };
    (summary, metrics)
}
