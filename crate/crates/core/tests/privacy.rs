//! White-box checks on what each relay knows and what each link carries.

mod common;

use std::collections::HashSet;
use std::time::Duration;

use common::*;
use onionbox::client::ClosedReason;
use onionbox::harness::servers::ServerKind;
use onionbox::harness::tap::TapDirection;
use onionbox::harness::testnet::{spawn_testnet, Testnet, TopologySpec};
use onionbox::onion::{CellCommand, CELL_PAYLOAD_LEN};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

/// Teardown must reach both ends within one forwarding step per hop; on
/// loopback that is far below this bound.
const TEARDOWN: Duration = Duration::from_secs(1);

async fn tapped(n: usize) -> Testnet {
    spawn_testnet(
        &TopologySpec::relays(n)
            .with_taps()
            .with_capturing_echo(),
    )
    .await
    .unwrap()
}

#[tokio::test]
async fn each_relay_holds_one_key_and_neighbor_links_only() {
    let net = tapped(3).await;
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let circuit = ordered_circuit(&net, 3).await;
    let s = circuit.open_stream(&echo).await.unwrap();
    assert_eq!(echo_roundtrip(s, b"inspect me").await, b"inspect me");
    let keys = circuit.session_keys().await.unwrap();
    assert_eq!(keys.len(), 3);

    let mut seen = HashSet::new();
    for (hop, relay) in net.relays.iter().enumerate() {
        let states = relay.circuit_states().await;
        assert_eq!(states.len(), 1, "relay {hop} circuit count");
        let st = &states[0].state;
        // The relay's key is the client's key for this hop and no other.
        assert_eq!(st.session.forward.key().as_bytes(), keys[hop].forward.key().as_bytes());
        assert_eq!(st.session.backward.key().as_bytes(), keys[hop].backward.key().as_bytes());
        for (other, k) in keys.iter().enumerate() {
            if other != hop {
                assert_ne!(st.session.forward.key().as_bytes(), k.forward.key().as_bytes());
                assert_ne!(st.session.backward.key().as_bytes(), k.backward.key().as_bytes());
            }
        }
        assert!(seen.insert(*st.session.forward.key().as_bytes()));
        assert_ne!(st.session.forward.key().as_bytes(), st.session.backward.key().as_bytes());

        // Links: a predecessor, and a successor unless this is the exit.
        match hop {
            2 => assert!(st.next_link.is_none()),
            _ => {
                let next = st.next_link.expect("non-terminal hop has a successor");
                assert_ne!(next.link, st.prev_link.link);
            }
        }
        // Only the exit knows the destination.
        let streams = &states[0].exit_streams;
        if hop == 2 {
            assert!(streams.is_empty() || streams.iter().all(|s| s.destination == echo));
        } else {
            assert!(streams.is_empty());
        }
    }
    // Each relay was contacted over exactly one link: its predecessor's.
    for (hop, tap) in net.taps.iter().enumerate() {
        assert_eq!(tap.as_ref().unwrap().counters().connections, 1, "relay {hop}");
    }
}

#[tokio::test]
async fn exit_sees_client_plaintext() {
    let net = tapped(3).await;
    let server = net.server(ServerKind::Echo).unwrap();
    let circuit = ordered_circuit(&net, 3).await;
    let mut data = b"readable plain-text ".repeat(400);
    data.extend(pattern(10_000, 9));
    let s = circuit.open_stream(&server.local_addr().to_string()).await.unwrap();
    assert_eq!(echo_roundtrip(s, &data).await, data);
    assert_eq!(server.captured(), data);
}

#[tokio::test]
async fn link_frames_are_whole_cells() {
    let net = tapped(3).await;
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let circuit = ordered_circuit(&net, 3).await;
    for len in [0usize, 1, 400, 401, 100_000] {
        let data = pattern(len, 1);
        let s = circuit.open_stream(&echo).await.unwrap();
        assert_eq!(echo_roundtrip(s, &data).await, data);
    }
    circuit.destroy();
    tokio::time::sleep(Duration::from_millis(100)).await;
    for tap in net.taps.iter().flatten() {
        let c = tap.counters();
        assert_eq!(c.bad_frames, 0);
        assert_eq!(c.trailing_bytes, 0);
        assert!(c.inbound_frames > 0 && c.outbound_frames > 0);
        for f in tap.frames() {
            assert!(f.payload_len as usize <= CELL_PAYLOAD_LEN);
            assert!((1..=4).contains(&f.command));
        }
    }
}

async fn assert_torn_down(net: &Testnet, circuit: &onionbox::client::CircuitHandle) -> ClosedReason {
    let reason = tokio::time::timeout(TEARDOWN, circuit.closed())
        .await
        .expect("client end torn down");
    for (i, relay) in net.relays.iter().enumerate() {
        assert!(
            eventually(TEARDOWN, || async { relay.circuit_count() == 0 }).await,
            "relay {i} still holds the circuit"
        );
    }
    reason
}

/// Flip a bit in the next forward cell entering `hop`, then send data.
async fn tamper_forward(hop: usize) {
    let net = tapped(3).await;
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let circuit = ordered_circuit(&net, 3).await;
    let mut s = circuit.open_stream(&echo).await.unwrap();
    net.taps[hop].as_ref().unwrap().arm_tamper(TapDirection::Inbound);
    let _ = s.write_all(b"tampered in flight").await;
    let reason = assert_torn_down(&net, &circuit).await;
    assert!(matches!(reason, ClosedReason::Destroyed(_)), "{reason:?}");
    assert_eq!(net.taps[hop].as_ref().unwrap().counters().tampered, 1);
    // Nothing reached the destination.
    assert!(net.server(ServerKind::Echo).unwrap().captured().is_empty());
}

#[tokio::test]
async fn tamper_forward_at_entry() {
    tamper_forward(0).await;
}

#[tokio::test]
async fn tamper_forward_at_middle() {
    tamper_forward(1).await;
}

#[tokio::test]
async fn tamper_forward_at_exit() {
    tamper_forward(2).await;
}

/// Flip a bit in the next backward cell leaving `hop`.
async fn tamper_backward(hop: usize) {
    let net = tapped(3).await;
    let echo = net.server(ServerKind::Echo).unwrap().local_addr().to_string();
    let circuit = ordered_circuit(&net, 3).await;
    let mut s = circuit.open_stream(&echo).await.unwrap();
    net.taps[hop].as_ref().unwrap().arm_tamper(TapDirection::Outbound);
    s.write_all(b"echo this back").await.unwrap();
    let mut buf = [0u8; 64];
    let _ = tokio::time::timeout(TEARDOWN, s.read(&mut buf)).await;
    let reason = assert_torn_down(&net, &circuit).await;
    assert_eq!(reason, ClosedReason::Authentication);
    assert_eq!(net.taps[hop].as_ref().unwrap().counters().tampered, 1);
}

#[tokio::test]
async fn tamper_backward_from_entry() {
    tamper_backward(0).await;
}

#[tokio::test]
async fn tamper_backward_from_middle() {
    tamper_backward(1).await;
}

#[tokio::test]
async fn tamper_backward_from_exit() {
    tamper_backward(2).await;
}

#[tokio::test]
async fn destroy_is_the_only_teardown_signal() {
    let net = tapped(3).await;
    let circuit = ordered_circuit(&net, 3).await;
    circuit.destroy();
    assert_eq!(assert_torn_down(&net, &circuit).await, ClosedReason::Local);
    tokio::time::sleep(Duration::from_millis(50)).await;
    for tap in net.taps.iter().flatten() {
        let destroys = tap
            .frames()
            .iter()
            .filter(|f| f.command == CellCommand::Destroy as u8 && f.direction == TapDirection::Inbound)
            .count();
        assert_eq!(destroys, 1);
    }
}
