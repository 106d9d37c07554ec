mod support;

use std::net::TcpListener;
use std::time::{Duration, Instant};

use fedkit::harness::{run_federated, ExperimentSpec, TransportKind};
use fedkit::transport::mqtt::{MqttConfig, MqttEndpoint, RetryPolicy};
use fedkit::transport::{Endpoint, Role, Topic, TransportError};
use fedkit_core::init_model;
use fedkit_core::wire::{self, WireMessage};

fn receive_within(ep: &mut MqttEndpoint, wait: Duration) -> Option<(Topic, Vec<u8>)> {
    let until = Instant::now() + wait;
    while Instant::now() < until {
        if let Some(msg) = ep.receive(Duration::from_millis(200)).unwrap() {
            return Some(msg);
        }
    }
    None
}

#[test]
fn model_frames_cross_the_broker() {
    let config = MqttConfig::new(support::broker::start());
    let mut server = MqttEndpoint::connect(&config, Role::Server, 0).unwrap();
    let mut client = MqttEndpoint::connect(&config, Role::Client, 3).unwrap();

    let join = wire::encode(&WireMessage::JoinRequest { client_id: 3 });
    client.publish(Topic::Join, &join).unwrap();
    assert_eq!(
        receive_within(&mut server, Duration::from_secs(10)),
        Some((Topic::Join, join))
    );

    let frame = wire::encode(&WireMessage::GlobalModel {
        round: 4,
        params: init_model(9),
    });
    assert!(frame.len() > 400_000);
    server.publish(Topic::Global, &frame).unwrap();
    assert_eq!(
        receive_within(&mut client, Duration::from_secs(10)),
        Some((Topic::Global, frame))
    );
    // A client does not hear its own topic traffic.
    assert_eq!(client.receive(Duration::from_millis(300)).unwrap(), None);
}

#[test]
fn unreachable_broker_gives_up() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut config = MqttConfig::new(format!("mqtt://127.0.0.1:{port}"));
    config.retry = RetryPolicy {
        initial: Duration::from_millis(10),
        max_backoff: Duration::from_millis(40),
        max_attempts: 3,
    };
    let started = Instant::now();
    match MqttEndpoint::connect(&config, Role::Client, 1) {
        Err(TransportError::Connect { attempts, .. }) => assert_eq!(attempts, 3),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("connected to a closed port"),
    }
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn tls_is_refused_up_front() {
    let mut config = MqttConfig::new("mqtt://127.0.0.1:1");
    config.tls = true;
    assert!(matches!(
        MqttEndpoint::connect(&config, Role::Server, 0),
        Err(TransportError::TlsUnavailable)
    ));
    let config = MqttConfig::new("mqtts://127.0.0.1:8883");
    assert!(matches!(
        MqttEndpoint::connect(&config, Role::Server, 0),
        Err(TransportError::TlsUnavailable)
    ));
}

#[test]
fn reused_client_id_takes_over_the_session() {
    let config = MqttConfig::new(support::broker::start());
    let mut first = MqttEndpoint::connect(&config, Role::Client, 5).unwrap();
    let mut second = MqttEndpoint::connect(&config, Role::Client, 5).unwrap();
    let until = Instant::now() + Duration::from_secs(20);
    let mut bounced = false;
    while !bounced && Instant::now() < until {
        let _ = first.receive(Duration::from_millis(100));
        bounced = first.take_reconnected() || second.take_reconnected();
    }
    assert!(bounced, "neither session noticed the duplicate id");
}

#[test]
fn hostile_run_over_mqtt_uses_online_clients_only() {
    let mnist = support::mnist();
    let mut spec = ExperimentSpec::hostile(4, 1, 1);
    spec.n_rounds = 3;
    spec.transport = TransportKind::Mqtt(MqttConfig::new(support::broker::start()));
    spec.round_deadline = Some(Duration::from_secs(60));
    let run = run_federated(&spec, mnist).unwrap();
    assert_eq!(run.records.len(), 3);
    for (round, (online, contributors)) in run.online.iter().zip(&run.contributors).enumerate() {
        assert_eq!(online.len(), 3, "round {round}");
        assert_eq!(
            contributors,
            &online.iter().copied().collect::<Vec<_>>(),
            "round {round}"
        );
    }
    assert!(run.records[2].accuracy > 0.5);
}
