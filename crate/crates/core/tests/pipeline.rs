mod common;

use std::net::Ipv4Addr;

use common::*;
use onionbox::client::{CircuitError, CircuitManager};
use onionbox::harness::servers::ServerKind;
use onionbox::harness::testnet::{spawn_testnet, TopologySpec};
use onionbox::onion::EndReason;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[tokio::test]
async fn echo_over_every_path_length() {
    let net = spawn_testnet(&TopologySpec::relays(4).with_server(ServerKind::Echo))
        .await
        .unwrap();
    let echo = net.server(ServerKind::Echo).unwrap().local_addr();
    for n in 1..=4 {
        let circuit = ordered_circuit(&net, n).await;
        assert_eq!(circuit.hop_count(), n);
        let data = pattern(200_000 + n, n as u8);
        let s = circuit.open_stream(&echo.to_string()).await.unwrap();
        assert_eq!(echo_roundtrip(s, &data).await, data, "n = {n}");
        circuit.destroy();
    }
}

#[tokio::test]
async fn concurrent_streams_share_one_circuit() {
    let net = spawn_testnet(&TopologySpec::relays(3).with_server(ServerKind::Echo))
        .await
        .unwrap();
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let circuit = random_circuit(&net, 3, 1).await;
    let mut tasks = Vec::new();
    for i in 0..16u8 {
        let circuit = circuit.clone();
        let echo = echo.clone();
        tasks.push(tokio::spawn(async move {
            let data = pattern(50_000 + i as usize * 997, i);
            let s = circuit.open_stream(&echo).await.unwrap();
            assert_eq!(echo_roundtrip(s, &data).await, data);
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    assert!(!circuit.is_closed());
}

#[tokio::test]
async fn exit_side_resolution_and_errors() {
    let spec = TopologySpec::relays(3)
        .with_server(ServerKind::Echo)
        .with_exit_host("echo.test", Ipv4Addr::LOCALHOST);
    let net = spawn_testnet(&spec).await.unwrap();
    let port = net.server(ServerKind::Echo).unwrap().local_addr().port();
    let circuit = random_circuit(&net, 3, 2).await;

    assert_eq!(circuit.resolve("echo.test").await.unwrap(), Ipv4Addr::LOCALHOST);
    match circuit.resolve("nowhere.test").await {
        Err(CircuitError::Resolution { host, code }) => {
            assert_eq!(host, "nowhere.test");
            assert_eq!(code, 0x04);
        }
        other => panic!("expected resolution failure, got {other:?}"),
    }

    let s = circuit.open_stream(&format!("echo.test:{port}")).await.unwrap();
    assert_eq!(echo_roundtrip(s, b"by name").await, b"by name");

    match circuit.open_stream(&format!("nowhere.test:{port}")).await {
        Err(CircuitError::StreamRefused(EndReason::ResolveFailed)) => {}
        other => panic!("expected ResolveFailed, got {:?}", other.map(|s| s.stream_id())),
    }

    // A port nothing listens on.
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead_port = closed.local_addr().unwrap().port();
    drop(closed);
    match circuit.open_stream(&format!("127.0.0.1:{dead_port}")).await {
        Err(CircuitError::StreamRefused(EndReason::ConnectRefused)) => {}
        other => panic!("expected ConnectRefused, got {:?}", other.map(|s| s.stream_id())),
    }

    assert!(matches!(
        circuit.open_stream("no-port-here").await,
        Err(CircuitError::Destination(_))
    ));
    // Errors on individual streams leave the circuit usable.
    let s = circuit.open_stream(&format!("127.0.0.1:{port}")).await.unwrap();
    assert_eq!(echo_roundtrip(s, b"still up").await, b"still up");
}

#[tokio::test]
async fn directory_wire_key_matches_relay_identity() {
    let net = spawn_testnet(&TopologySpec::relays(3)).await.unwrap();
    let client = net.directory_client();
    for relay in &net.relays {
        let key = client.get_key(&relay.relay_id()).await.unwrap();
        assert_eq!(key, relay.descriptor().public_key);
    }
}

#[tokio::test]
async fn manager_rotation_swaps_circuits() {
    let net = spawn_testnet(&TopologySpec::relays(3).with_server(ServerKind::Echo))
        .await
        .unwrap();
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let manager = CircuitManager::with_rng(net.directory_client(), 3, StdRng::seed_from_u64(3));
    let first = manager.get_or_build().await.unwrap();
    let held = first.open_stream(&echo).await.unwrap();

    let second = manager.rotate().await.unwrap();
    assert_ne!(
        (first.circuit_id(), first.created_at()),
        (second.circuit_id(), second.created_at())
    );
    assert_eq!(manager.current().unwrap().created_at(), second.created_at());

    // The retired circuit finishes the stream it already carries, then closes.
    assert!(matches!(first.open_stream(&echo).await, Err(CircuitError::Retiring)));
    assert_eq!(echo_roundtrip(held, b"drain").await, b"drain");
    assert!(eventually(STEP, || async { first.is_closed() }).await);

    let s = second.open_stream(&echo).await.unwrap();
    assert_eq!(echo_roundtrip(s, b"fresh").await, b"fresh");
}
