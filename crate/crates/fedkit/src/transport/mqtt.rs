//! MQTT 3.1.1 backend over rumqttc's blocking client.
//!
//! Each endpoint owns one broker session with QoS 1, one message in flight,
//! and a clean session. A background thread drives the connection: it
//! resubscribes after every ConnAck and reconnects with capped exponential
//! backoff. A fresh session drops whatever the broker queued while the link
//! was down, which matches how the aggregator treats absent clients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rumqttc::{Client, Connection, Event, MqttOptions, Packet, QoS};

use super::{ChurnControl, Endpoint, Role, Topic, TransportError};

pub const DEFAULT_PORT: u16 = 1883;

/// Large enough for a full model frame plus MQTT framing.
pub const DEFAULT_MAX_PACKET: usize = 1 << 20;

const POLL_SLICE: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub initial: Duration,
    pub max_backoff: Duration,
    /// Failed attempts tolerated before the first successful connect.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            max_backoff: Duration::from_secs(8),
            max_attempts: 6,
        }
    }
}

impl RetryPolicy {
    /// Sleep after the `failures`-th consecutive failure (1-based).
    pub fn backoff(&self, failures: u32) -> Duration {
        let shift = failures.saturating_sub(1).min(16);
        self.initial
            .saturating_mul(1 << shift)
            .min(self.max_backoff)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MqttConfig {
    pub broker_uri: String,
    /// Broker client ids are `<prefix>-server` and `<prefix>-client-<id>`.
    pub client_id_prefix: String,
    pub keep_alive: Duration,
    pub max_packet_size: usize,
    pub tls: bool,
    pub retry: RetryPolicy,
}

impl MqttConfig {
    pub fn new(broker_uri: impl Into<String>) -> Self {
        Self {
            broker_uri: broker_uri.into(),
            client_id_prefix: "fedkit".into(),
            keep_alive: Duration::from_secs(30),
            max_packet_size: DEFAULT_MAX_PACKET,
            tls: false,
            retry: RetryPolicy::default(),
        }
    }

    pub fn session_id(&self, role: Role, id: u16) -> String {
        match role {
            Role::Server => format!("{}-server", self.client_id_prefix),
            Role::Client => format!("{}-client-{id}", self.client_id_prefix),
        }
    }
}

/// Splits `mqtt://host:port`, `tcp://host:port` or bare `host[:port]`.
pub fn parse_broker_uri(uri: &str) -> Result<(String, u16), TransportError> {
    let invalid = |reason: &str| TransportError::InvalidUri {
        uri: uri.into(),
        reason: reason.into(),
    };
    let rest = match uri.split_once("://") {
        Some(("mqtt" | "tcp", rest)) => rest,
        Some(("mqtts" | "ssl" | "tls", _)) => return Err(TransportError::TlsUnavailable),
        Some((scheme, _)) => return Err(invalid(&format!("unsupported scheme {scheme:?}"))),
        None => uri,
    };
    let rest = rest.trim_end_matches('/');
    if rest.contains('/') {
        return Err(invalid("unexpected path"));
    }
    let (host, port) = match rest.rsplit_once(':') {
        Some((host, port)) => (host, port.parse::<u16>().map_err(|_| invalid("bad port"))?),
        None => (rest, DEFAULT_PORT),
    };
    if host.is_empty() {
        return Err(invalid("missing host"));
    }
    Ok((host.to_string(), port))
}

/// Simulated churn for in-process MQTT clients. Going offline does not tear
/// down the broker session; the endpoint just stops passing messages in
/// either direction, and reports a reconnect when it comes back.
#[derive(Debug, Default)]
pub struct Gate {
    online: AtomicBool,
    reconnected: AtomicBool,
}

impl Gate {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            online: AtomicBool::new(true),
            reconnected: AtomicBool::new(false),
        })
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ChurnGates {
    gates: Arc<Mutex<BTreeMap<u16, Arc<Gate>>>>,
}

impl ChurnGates {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&self, id: u16, gate: Arc<Gate>) {
        self.gates
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, gate);
    }

    fn get(&self, id: u16) -> Result<Arc<Gate>, TransportError> {
        self.gates
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&id)
            .cloned()
            .ok_or(TransportError::UnknownClient(id))
    }
}

impl ChurnControl for ChurnGates {
    fn drop_client(&self, client_id: u16) -> Result<(), TransportError> {
        let gate = self.get(client_id)?;
        gate.online.store(false, Ordering::SeqCst);
        gate.reconnected.store(false, Ordering::SeqCst);
        Ok(())
    }

    fn restore_client(&self, client_id: u16) -> Result<(), TransportError> {
        let gate = self.get(client_id)?;
        if !gate.online.swap(true, Ordering::SeqCst) {
            gate.reconnected.store(true, Ordering::SeqCst);
        }
        Ok(())
    }
}

enum Status {
    Ready,
    Failed { attempts: u32, last_error: String },
}

pub struct MqttEndpoint {
    role: Role,
    id: u16,
    client: Client,
    inbox: Receiver<(Topic, Vec<u8>)>,
    gate: Arc<Gate>,
    stop: Arc<AtomicBool>,
    driver: Option<JoinHandle<()>>,
}

impl MqttEndpoint {
    /// Connects and subscribes, retrying per `config.retry`. Returns once the
    /// broker has acknowledged every subscription for `role`.
    pub fn connect(config: &MqttConfig, role: Role, id: u16) -> Result<Self, TransportError> {
        let (host, port) = parse_broker_uri(&config.broker_uri)?;
        if config.tls {
            return Err(TransportError::TlsUnavailable);
        }
        let mut options = MqttOptions::new(config.session_id(role, id), host, port);
        options
            .set_keep_alive(config.keep_alive)
            .set_max_packet_size(config.max_packet_size, config.max_packet_size)
            .set_inflight(1)
            .set_clean_session(true);
        let (client, connection) = Client::new(options, 16);

        let (inbox_tx, inbox) = mpsc::channel();
        let (status_tx, status_rx) = mpsc::channel();
        let gate = Gate::new();
        let stop = Arc::new(AtomicBool::new(false));
        let driver = Driver {
            role,
            client: client.clone(),
            inbox: inbox_tx,
            status: Some(status_tx),
            gate: gate.clone(),
            stop: stop.clone(),
            retry: config.retry,
        };
        let handle = std::thread::Builder::new()
            .name(format!("mqtt-{}", config.session_id(role, id)))
            .spawn(move || driver.run(connection))
            .map_err(|e| TransportError::Mqtt(e.to_string()))?;

        let mut endpoint = Self {
            role,
            id,
            client,
            inbox,
            gate,
            stop,
            driver: Some(handle),
        };
        match status_rx.recv() {
            Ok(Status::Ready) => Ok(endpoint),
            Ok(Status::Failed {
                attempts,
                last_error,
            }) => {
                endpoint.shutdown();
                Err(TransportError::Connect {
                    uri: config.broker_uri.clone(),
                    attempts,
                    last_error,
                })
            }
            Err(_) => {
                endpoint.shutdown();
                Err(TransportError::Mqtt("connection driver exited".into()))
            }
        }
    }

    /// Like [`connect`](Self::connect), with the endpoint's churn gate
    /// registered under `id`.
    pub fn connect_gated(
        config: &MqttConfig,
        role: Role,
        id: u16,
        gates: &ChurnGates,
    ) -> Result<Self, TransportError> {
        let endpoint = Self::connect(config, role, id)?;
        gates.register(id, endpoint.gate.clone());
        Ok(endpoint)
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.client.try_disconnect();
        if let Some(handle) = self.driver.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for MqttEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Endpoint for MqttEndpoint {
    fn role(&self) -> Role {
        self.role
    }

    fn id(&self) -> u16 {
        self.id
    }

    fn publish(&mut self, topic: Topic, payload: &[u8]) -> Result<(), TransportError> {
        if !self.gate.is_online() {
            return Ok(());
        }
        self.client
            .publish(topic.as_str(), QoS::AtLeastOnce, false, payload.to_vec())
            .map_err(|e| TransportError::Mqtt(e.to_string()))
    }

    fn receive(&mut self, timeout: Duration) -> Result<Option<(Topic, Vec<u8>)>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.inbox.recv_timeout(remaining.min(POLL_SLICE)) {
                Ok(msg) => return Ok(Some(msg)),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Disconnected),
                Err(RecvTimeoutError::Timeout) => {}
            }
            if remaining <= POLL_SLICE || self.gate.reconnected.load(Ordering::SeqCst) {
                return Ok(None);
            }
        }
    }

    fn take_reconnected(&mut self) -> bool {
        self.gate.reconnected.swap(false, Ordering::SeqCst)
    }
}

struct Driver {
    role: Role,
    client: Client,
    inbox: Sender<(Topic, Vec<u8>)>,
    status: Option<Sender<Status>>,
    gate: Arc<Gate>,
    stop: Arc<AtomicBool>,
    retry: RetryPolicy,
}

impl Driver {
    fn run(mut self, mut connection: Connection) {
        let mut failures = 0u32;
        let mut ever_connected = false;
        let mut pending_subacks = 0usize;
        while !self.stop.load(Ordering::SeqCst) {
            let event = match connection.recv_timeout(POLL_SLICE) {
                Ok(event) => event,
                Err(rumqttc::RecvTimeoutError::Timeout) => continue,
                Err(rumqttc::RecvTimeoutError::Disconnected) => break,
            };
            match event {
                Ok(Event::Incoming(Packet::ConnAck(_))) => {
                    failures = 0;
                    if ever_connected {
                        log::info!("reconnected to broker");
                        self.gate.reconnected.store(true, Ordering::SeqCst);
                    }
                    ever_connected = true;
                    pending_subacks = self.role.subscriptions().len();
                    for topic in self.role.subscriptions() {
                        if let Err(e) = self.client.try_subscribe(topic.as_str(), QoS::AtLeastOnce)
                        {
                            log::warn!("subscribe to {topic} failed: {e}");
                        }
                    }
                }
                Ok(Event::Incoming(Packet::SubAck(_))) => {
                    pending_subacks = pending_subacks.saturating_sub(1);
                    if pending_subacks == 0 {
                        if let Some(status) = self.status.take() {
                            let _ = status.send(Status::Ready);
                        }
                    }
                }
                Ok(Event::Incoming(Packet::Publish(publish))) => {
                    if !self.gate.is_online() {
                        continue;
                    }
                    match Topic::parse(&publish.topic) {
                        Some(topic) => {
                            if self.inbox.send((topic, publish.payload.to_vec())).is_err() {
                                break;
                            }
                        }
                        None => {
                            log::warn!("ignoring message on unexpected topic {}", publish.topic)
                        }
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    if self.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    failures += 1;
                    if !ever_connected && failures >= self.retry.max_attempts {
                        if let Some(status) = self.status.take() {
                            let _ = status.send(Status::Failed {
                                attempts: failures,
                                last_error: e.to_string(),
                            });
                        }
                        break;
                    }
                    let wait = self.retry.backoff(failures);
                    log::warn!("broker connection error ({e}); retrying in {wait:?}");
                    self.sleep(wait);
                }
            }
        }
    }

    fn sleep(&self, total: Duration) {
        let deadline = Instant::now() + total;
        while !self.stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            std::thread::sleep((deadline - now).min(POLL_SLICE));
        }
    }
}
