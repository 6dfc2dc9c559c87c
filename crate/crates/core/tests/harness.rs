mod common;

use std::net::TcpListener;
use std::time::Duration;

use common::*;
use onionbox::gateway::{GatewayConfig, Mode};
use onionbox::harness::leak::{run_dns_leak_test, Verdict, LEAK_TEST_COUNT};
use onionbox::harness::report::{emit_report, CSV_NAME, JSON_NAME};
use onionbox::harness::servers::ServerKind;
use onionbox::harness::speed::{run_speed_suite, run_speed_test, Direction, SpeedSuite, SpeedTarget, MIB};
use onionbox::harness::testnet::{spawn_testnet, RelaySpec, TopologySpec};
use onionbox::harness::HarnessError;

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[tokio::test]
async fn repeated_spawn_and_teardown_frees_every_port() {
    let dir_port = free_port();
    let relay_ports: Vec<u16> = (0..3).map(|_| free_port()).collect();
    let mut spec = TopologySpec::relays(0);
    spec.directory_port = dir_port;
    spec.relays = relay_ports
        .iter()
        .map(|&port| RelaySpec { port, ..Default::default() })
        .collect();
    let mut all_ports = relay_ports.clone();
    all_ports.push(dir_port);

    for round in 0..20 {
        let net = spawn_testnet(&spec).await.unwrap_or_else(|e| panic!("round {round}: {e}"));
        let circuit = ordered_circuit(&net, 3).await;
        assert_eq!(circuit.hop_count(), 3);
        drop(net);
        for &port in &all_ports {
            assert!(
                eventually(Duration::from_secs(2), || async {
                    TcpListener::bind(("127.0.0.1", port)).is_ok()
                })
                .await,
                "round {round}: port {port} still bound"
            );
        }
    }
}

#[tokio::test]
async fn onion_mode_leak_test_is_clean() {
    let config = GatewayConfig {
        listen_addr: "127.0.0.1:0".into(),
        host_resolver: Some("127.0.0.1:0".into()),
        ..Default::default()
    };
    let report = run_dns_leak_test(&config).await.unwrap();
    assert_eq!(report.verdict, Verdict::NoLeak, "{:?}", report.trap_hits);
    assert_eq!(report.connects_ok, LEAK_TEST_COUNT);
    assert_eq!(report.resolves_ok, LEAK_TEST_COUNT);
}

#[tokio::test]
async fn leak_test_needs_a_resolver_address() {
    let config = GatewayConfig {
        listen_addr: "127.0.0.1:0".into(),
        ..Default::default()
    };
    assert!(matches!(
        run_dns_leak_test(&config).await,
        Err(HarnessError::Precondition(_))
    ));
}

#[tokio::test]
async fn speed_suite_reports_every_pair() {
    let suite = SpeedSuite {
        size: MIB,
        repetitions: 5,
        modes: vec![Mode::Onion, Mode::Direct],
        ..Default::default()
    };
    let report = run_speed_suite(&suite).await.unwrap();
    assert_eq!(report.failures, 0);
    assert_eq!(report.samples.len(), 20);
    assert_eq!(report.summaries.len(), 4);
    for s in &report.samples {
        assert_eq!(s.bytes, MIB);
        assert!(s.mbps > 0.0 && s.elapsed > 0.0);
    }
    assert_eq!(report.overhead_ratio.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path(), true).unwrap();
    assert_eq!(files.csv, dir.path().join(CSV_NAME));
    assert_eq!(files.json, dir.path().join(JSON_NAME));
    let rows = csv::Reader::from_path(&files.csv).unwrap().records().count();
    assert_eq!(rows, 20);
}

#[tokio::test]
async fn speed_test_preconditions() {
    let net = spawn_testnet(
        &TopologySpec::relays(3)
            .with_server(ServerKind::Sink)
            .with_server(ServerKind::Source),
    )
    .await
    .unwrap();
    let target = SpeedTarget {
        proxy: "127.0.0.1:9".parse().unwrap(),
        mode: Mode::Onion,
        sink: net.server(ServerKind::Sink).unwrap().local_addr(),
        source: net.server(ServerKind::Source).unwrap().local_addr(),
    };
    assert!(matches!(
        run_speed_test(&target, Direction::Upload, MIB - 1, 5).await,
        Err(HarnessError::Precondition(_))
    ));
    assert!(matches!(
        run_speed_test(&target, Direction::Upload, MIB, 4).await,
        Err(HarnessError::Precondition(_))
    ));
    // Nothing listens at the proxy: every repetition fails and is counted.
    let report = run_speed_test(&target, Direction::Download, MIB, 5).await.unwrap();
    assert_eq!(report.failures, 5);
    assert!(report.samples.is_empty());
}

#[tokio::test]
async fn shaped_relay_caps_throughput() {
    // Cross-check the shaper against wall time: 1 MiB through a 4 Mb/s relay
    // cannot finish faster than the bucket allows.
    let suite = SpeedSuite {
        size: MIB,
        repetitions: 5,
        directions: vec![Direction::Download],
        shape_first_relay: Some(4.0),
        relays: 1,
        path_length: 1,
        ..Default::default()
    };
    let report = run_speed_suite(&suite).await.unwrap();
    let mean = report.summary(Mode::Onion, Direction::Download).unwrap().mean;
    assert!(mean <= 4.0 * 1.1, "mean {mean} Mb/s");
    assert!(mean >= 1.0, "mean {mean} Mb/s");
}
