//! SOCKS behaviour of the gateway in both modes.

mod common;

use std::net::{Ipv4Addr, SocketAddr};

use common::*;
use onionbox::client::CircuitError;
use onionbox::gateway::socks::{connect_via, SocksError, TargetAddr};
use onionbox::gateway::{Gateway, GatewayConfig, GatewayError, Mode};
use onionbox::harness::servers::ServerKind;
use onionbox::harness::testnet::{spawn_testnet, Testnet, TopologySpec};
use rand::{Rng, SeedableRng};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

fn gw_config(mode: Mode) -> GatewayConfig {
    GatewayConfig {
        listen_addr: "127.0.0.1:0".into(),
        mode,
        ..Default::default()
    }
}

async fn net_with(mode: Mode) -> Testnet {
    let spec = TopologySpec::relays(3)
        .with_server(ServerKind::Echo)
        .with_exit_host("echo.test", Ipv4Addr::LOCALHOST)
        .with_gateway(gw_config(mode));
    spawn_testnet(&spec).await.unwrap()
}

fn echo_addr(net: &Testnet) -> SocketAddr {
    net.server(ServerKind::Echo).unwrap().local_addr()
}

fn ipv4(addr: SocketAddr) -> TargetAddr {
    match addr {
        SocketAddr::V4(a) => TargetAddr::Ipv4(*a.ip(), a.port()),
        SocketAddr::V6(_) => unreachable!(),
    }
}

/// Raw exchange: returns everything the gateway sent before closing or the
/// first `want` bytes.
async fn raw(proxy: SocketAddr, bytes: &[u8], want: usize) -> Vec<u8> {
    let mut s = TcpStream::connect(proxy).await.unwrap();
    s.write_all(bytes).await.unwrap();
    let mut out = vec![0u8; want];
    let mut got = 0;
    while got < want {
        match s.read(&mut out[got..]).await {
            Ok(0) | Err(_) => break,
            Ok(n) => got += n,
        }
    }
    out.truncate(got);
    out
}

#[tokio::test]
async fn onion_connect_by_name_and_address() {
    let net = net_with(Mode::Onion).await;
    let proxy = net.gateway().local_addr();
    let echo = echo_addr(&net);
    let s = connect_via(proxy, &TargetAddr::Domain("echo.test".into(), echo.port()))
        .await
        .unwrap();
    assert_eq!(echo_roundtrip(s, b"domain").await, b"domain");
    let s = connect_via(proxy, &ipv4(echo)).await.unwrap();
    let data = pattern(300_000, 4);
    assert_eq!(echo_roundtrip(s, &data).await, data);
    assert_eq!(net.gateway().stats().connected(), 2);
}

#[tokio::test]
async fn modes_deliver_identical_bytes() {
    let onion = net_with(Mode::Onion).await;
    let direct = net_with(Mode::Direct).await;
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for _ in 0..20 {
        let len = rng.gen_range(0..50_000);
        let mut data = vec![0u8; len];
        rng.fill(&mut data[..]);
        let a = connect_via(onion.gateway().local_addr(), &ipv4(echo_addr(&onion)))
            .await
            .unwrap();
        let b = connect_via(direct.gateway().local_addr(), &ipv4(echo_addr(&direct)))
            .await
            .unwrap();
        let (ra, rb) = tokio::join!(echo_roundtrip(a, &data), echo_roundtrip(b, &data));
        assert_eq!(ra, data);
        assert_eq!(rb, data);
    }
}

#[tokio::test]
async fn no_acceptable_method() {
    let net = net_with(Mode::Onion).await;
    // Offers only username/password.
    let reply = raw(net.gateway().local_addr(), &[0x05, 0x01, 0x02], 2).await;
    assert_eq!(reply, vec![0x05, 0xFF]);
}

#[tokio::test]
async fn unsupported_command_and_address_type() {
    let net = net_with(Mode::Onion).await;
    let proxy = net.gateway().local_addr();
    // BIND.
    let reply = raw(proxy, &[5, 1, 0, 5, 2, 0, 1, 127, 0, 0, 1, 0, 80], 12).await;
    assert_eq!(&reply[..2], &[5, 0]);
    assert_eq!(reply[2..4], [0x05, 0x07]);
    // IPv6.
    let mut req = vec![5, 1, 0, 5, 1, 0, 4];
    req.extend([0u8; 15]);
    req.push(1);
    req.extend([0, 80]);
    let reply = raw(proxy, &req, 12).await;
    assert_eq!(reply[2..4], [0x05, 0x08]);
    assert_eq!(net.gateway().stats().rejected(), 2);
}

#[tokio::test]
async fn unknown_host_and_refused_port() {
    let net = net_with(Mode::Onion).await;
    let proxy = net.gateway().local_addr();
    match connect_via(proxy, &TargetAddr::Domain("nowhere.test".into(), 80)).await {
        Err(SocksError::Reply(code)) => assert_eq!(code, 0x04),
        other => panic!("expected host unreachable, got {:?}", other.map(|_| ())),
    }
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = closed.local_addr().unwrap();
    drop(closed);
    match connect_via(proxy, &ipv4(dead)).await {
        Err(SocksError::Reply(code)) => assert_eq!(code, 0x05),
        other => panic!("expected connection refused, got {:?}", other.map(|_| ())),
    }
    // The circuit survives both failures.
    let s = connect_via(proxy, &ipv4(echo_addr(&net))).await.unwrap();
    assert_eq!(echo_roundtrip(s, b"ok").await, b"ok");
}

#[tokio::test]
async fn resolve_goes_through_the_circuit() {
    let net = net_with(Mode::Onion).await;
    assert_eq!(net.gateway().resolve("echo.test").await.unwrap(), Ipv4Addr::LOCALHOST);
    assert!(net.gateway().resolve("nowhere.test").await.is_err());
}

#[tokio::test]
async fn too_few_relays_for_the_path() {
    let net = spawn_testnet(&TopologySpec::relays(2)).await.unwrap();
    let mut config = gw_config(Mode::Onion);
    config.directory_addr = net.directory_addr().to_string();
    match Gateway::start(config).await {
        Err(GatewayError::Circuit(CircuitError::InsufficientRelays { need, have })) => {
            assert_eq!((need, have), (3, 2));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("gateway started without enough relays"),
    }
}

#[tokio::test]
async fn config_validation() {
    let mut config = gw_config(Mode::Onion);
    config.leaky_mode = true;
    assert!(matches!(Gateway::start(config).await, Err(GatewayError::Config(_))));
    let mut config = gw_config(Mode::Onion);
    config.path_length = 9;
    assert!(matches!(Gateway::start(config).await, Err(GatewayError::Config(_))));
    assert!(serde_json::from_str::<GatewayConfig>(r#"{"mode":"onion","bogus":1}"#).is_err());
    let parsed: GatewayConfig = serde_json::from_str(r#"{"mode":"direct"}"#).unwrap();
    assert_eq!(parsed.path_length, 3);
    assert_eq!(parsed.mode, Mode::Direct);
}
