use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedkit::aggregator::{run_training, MQTT_ROUND_DEADLINE};
use fedkit::client::{client_loop, ClientRuntime};
use fedkit::data::{self, DATA_DIR_ENV};
use fedkit::harness::{
    self, ExperimentSpec, TransportKind, DEFAULT_BASELINE_EPOCHS, DEFAULT_ROUNDS,
};
use fedkit::metrics::{emit_metrics, Format, MetricsRecord};
use fedkit::transport::mqtt::{MqttConfig, MqttEndpoint};
use fedkit::transport::Role;
use fedkit_core::{init_model, partition_shards, RoundState, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fedkit",
    version,
    about = "Federated averaging on MNIST over loopback or MQTT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download MNIST and verify checksums.
    FetchData {
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = data::DEFAULT_MIRROR)]
        mirror: String,
    },
    /// Run one experiment and write its metrics.
    Run {
        #[arg(value_enum)]
        kind: KindArg,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run every comparison cell and write a summary.
    Grid {
        #[arg(long)]
        out: PathBuf,
        /// Also write each cell's metrics as CSV into this directory.
        #[arg(long)]
        metrics_dir: Option<PathBuf>,
        /// Run independent cells concurrently.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Aggregator process for a real broker.
    Serve {
        #[arg(long)]
        broker: String,
        #[arg(long, default_value_t = 20)]
        clients: usize,
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: u32,
        /// Seconds to wait for updates each round.
        #[arg(long, default_value_t = MQTT_ROUND_DEADLINE.as_secs())]
        deadline: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().seed)]
        seed: u64,
        #[command(flatten)]
        mqtt: MqttOpts,
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
    },
    /// One edge client process for a real broker.
    Client {
        #[arg(long)]
        id: u16,
        #[arg(long)]
        broker: String,
        /// Total clients in the run; fixes how the training set is sharded.
        #[arg(long, default_value_t = 20)]
        clients: usize,
        /// Exit after the update for the last of this many rounds.
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value_t = 5)]
        epochs: u32,
        #[command(flatten)]
        train: TrainOpts,
        #[command(flatten)]
        mqtt: MqttOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Federated,
    Hostile,
    Centralized,
    Single,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    Loopback,
    Mqtt,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = TrainConfig::default().minibatch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().step_size)]
    lr: f32,
    #[arg(long, default_value_t = TrainConfig::default().dropout_rate)]
    dropout: f32,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MqttOpts {
    /// Prefix for broker client ids.
    #[arg(long, default_value = "fedkit")]
    client_prefix: String,
    #[arg(long, default_value_t = 30)]
    keepalive: u64,
    #[arg(long)]
    tls: bool,
}

impl MqttOpts {
    fn config(&self, broker: &str) -> MqttConfig {
        MqttConfig {
            client_id_prefix: self.client_prefix.clone(),
            keep_alive: Duration::from_secs(self.keepalive),
            tls: self.tls,
            ..MqttConfig::new(broker)
        }
    }
}

#[derive(Args)]
struct RunOpts {
    #[arg(long, default_value_t = 20)]
    clients: usize,
    /// Local epochs (federated) or training epochs (baselines); defaults to
    /// 5 and 30 respectively.
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_ROUNDS)]
    rounds: u32,
    /// Clients dropped per round (hostile only).
    #[arg(long, default_value_t = 4)]
    drops: usize,
    /// Pooled samples (centralized only).
    #[arg(long, default_value_t = 6000)]
    samples: usize,
    /// Fraction of clients selected each round.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, value_enum, default_value_t = TransportArg::Loopback)]
    transport: TransportArg,
    #[arg(long)]
    broker: Option<String>,
    /// Metrics file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    mqtt: MqttOpts,
}

fn load(data_dir: Option<&Path>) -> Result<data::Mnist> {
    let dir = data::resolve_data_dir(data_dir);
    data::load_mnist(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write_metrics(records: &[MetricsRecord], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            create_parent(path)?;
            emit_metrics(records, path, Format::from_path(path))?
        }
        None => print!("{}", fedkit::metrics::to_csv(records)?),
    }
    Ok(())
}

fn apply_train(spec: ExperimentSpec, train: &TrainOpts) -> ExperimentSpec {
    ExperimentSpec {
        minibatch: train.batch,
        step_size: train.lr,
        dropout_rate: train.dropout,
        seed: train.seed,
        ..spec
    }
}

fn run(kind: KindArg, opts: RunOpts) -> Result<()> {
    let spec = match kind {
        KindArg::Federated => ExperimentSpec::federated(opts.clients, opts.epochs.unwrap_or(5)),
        KindArg::Hostile => {
            ExperimentSpec::hostile(opts.clients, opts.epochs.unwrap_or(5), opts.drops)
        }
        KindArg::Centralized => ExperimentSpec::centralized(
            opts.samples,
            opts.epochs.unwrap_or(DEFAULT_BASELINE_EPOCHS),
        ),
        KindArg::Single => {
            ExperimentSpec::single_client(opts.epochs.unwrap_or(DEFAULT_BASELINE_EPOCHS))
        }
    };
    let transport = match (opts.transport, &opts.broker) {
        (TransportArg::Loopback, _) => TransportKind::Loopback,
        (TransportArg::Mqtt, Some(broker)) => TransportKind::Mqtt(opts.mqtt.config(broker)),
        (TransportArg::Mqtt, None) => bail!("--transport mqtt needs --broker URI"),
    };
    if transport != TransportKind::Loopback && !spec.kind.is_federated() {
        bail!("baselines train in-process; --transport mqtt applies to federated runs only");
    }
    let spec = ExperimentSpec {
        n_rounds: opts.rounds,
        client_fraction: opts.fraction,
        transport,
        ..apply_train(spec, &opts.train)
    };
    spec.validate()?;
    let mnist = load(opts.train.data_dir.as_deref())?;
    let records = harness::run_experiment(&spec, &mnist)?;
    if let Some(last) = records.last() {
        let peak = records.iter().map(|r| r.accuracy).fold(0.0, f64::max);
        eprintln!(
            "{}: final accuracy {:.2}%, peak {:.2}%, seed {}",
            spec.id(),
            last.accuracy * 100.0,
            peak * 100.0,
            spec.seed
        );
    }
    write_metrics(&records, opts.out.as_deref())
}

fn grid(out: &Path, metrics_dir: Option<&Path>, parallel: bool, train: &TrainOpts) -> Result<()> {
    let mnist = load(train.data_dir.as_deref())?;
    let base = apply_train(ExperimentSpec::federated(20, 5), train);
    let (summary, metrics) = harness::run_grid(&base, DEFAULT_BASELINE_EPOCHS, &mnist, parallel);
    create_parent(out)?;
    std::fs::write(out, summary.to_json()).with_context(|| format!("writing {}", out.display()))?;
    if let Some(dir) = metrics_dir {
        std::fs::create_dir_all(dir)?;
        for (cell, records) in summary.results.iter().zip(&metrics) {
            if !records.is_empty() {
                emit_metrics(records, &dir.join(format!("{}.csv", cell.id)), Format::Csv)?;
            }
        }
    }
    for cell in &summary.results {
        match cell.accuracy {
            Some(acc) => eprintln!(
                "{:<22} {:>6.2}%  (reference {:.2}%)",
                cell.id, acc, cell.reference_accuracy
            ),
            None => eprintln!(
                "{:<22} failed: {}",
                cell.id,
                cell.error.as_deref().unwrap_or("?")
            ),
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve(
    broker: &str,
    clients: usize,
    rounds: u32,
    deadline: u64,
    out: Option<&Path>,
    seed: u64,
    mqtt: &MqttOpts,
    data_dir: Option<&Path>,
) -> Result<()> {
    if clients == 0 {
        bail!("--clients must be positive");
    }
    let mnist = load(data_dir)?;
    let mut endpoint = MqttEndpoint::connect(&mqtt.config(broker), Role::Server, 0)?;
    let mut state = RoundState::new(init_model(seed), clients);
    let reports = run_training(
        &mut state,
        &mut endpoint,
        rounds,
        &mnist.test,
        Some(Duration::from_secs(deadline)),
        |_| Ok(()),
    )?;
    let records: Vec<MetricsRecord> = reports
        .iter()
        .map(|r| MetricsRecord {
            experiment: format!("serve-c{clients}"),
            round: r.outcome.round,
            accuracy: r.eval.accuracy,
            loss: r.eval.mean_loss,
            wall_ms: r.wall_ms,
        })
        .collect();
    if records.is_empty() {
        return Ok(());
    }
    write_metrics(&records, out)
}

#[allow(clippy::too_many_arguments)]
fn client(
    id: u16,
    broker: &str,
    clients: usize,
    rounds: Option<u32>,
    epochs: u32,
    train: &TrainOpts,
    mqtt: &MqttOpts,
) -> Result<()> {
    if id == 0 || usize::from(id) > clients {
        bail!("--id must be in 1..={clients}");
    }
    let mnist = load(train.data_dir.as_deref())?;
    let shard = partition_shards(&mnist.train, clients, harness::SHARD_SIZE, train.seed)?
        .into_iter()
        .nth(usize::from(id) - 1)
        .expect("id checked against client count");
    let config = TrainConfig {
        local_epochs: epochs,
        minibatch: train.batch,
        step_size: train.lr,
        dropout_rate: train.dropout,
        seed: train.seed,
        ..TrainConfig::default()
    };
    config.validate_for_shard(shard.len())?;
    let mut runtime = ClientRuntime::new(shard, config);
    runtime.last_round = rounds.and_then(|r| r.checked_sub(1));
    let mut endpoint = MqttEndpoint::connect(&mqtt.config(broker), Role::Client, id)?;
    let report = client_loop(&mut runtime, &mut endpoint, &AtomicBool::new(false))?;
    eprintln!("client {id}: published {} updates", report.published.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already spelled out.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let cause = cause.to_string();
        if !msg.contains(&cause) {
            msg = format!("{msg}: {cause}");
        }
    }
    msg
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FetchData { data_dir, mirror } => {
            let dir = data::resolve_data_dir(data_dir.as_deref());
            data::fetch(&dir, &mirror)?;
            eprintln!("MNIST ready in {}", dir.display());
            Ok(())
        }
        Command::Run { kind, opts } => run(kind, opts),
        Command::Grid {
            out,
            metrics_dir,
            parallel,
            train,
        } => grid(&out, metrics_dir.as_deref(), parallel, &train),
        Command::Serve {
            broker,
            clients,
            rounds,
            deadline,
            out,
            seed,
            mqtt,
            data_dir,
        } => serve(
            &broker,
            clients,
            rounds,
            deadline,
            out.as_deref(),
            seed,
            &mqtt,
            data_dir.as_deref(),
        ),
        Command::Client {
            id,
            broker,
            clients,
            rounds,
            epochs,
            train,
            mqtt,
        } => client(id, &broker, clients, rounds, epochs, &train, &mqtt),
    }
}
