#![allow(dead_code)]

use std::time::Duration;

use onionbox::client::{build_circuit, select_path, CircuitHandle};
use onionbox::directory::RelayDescriptor;
use onionbox::harness::testnet::Testnet;
use rand::rngs::StdRng;
use rand::SeedableRng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

pub const STEP: Duration = Duration::from_secs(5);

/// Descriptors in the order the testnet spawned the relays.
pub async fn descriptors_in_spawn_order(net: &Testnet) -> Vec<RelayDescriptor> {
    let snap = net.directory_client().list(None).await.unwrap();
    net.relays
        .iter()
        .map(|r| snap.get(&r.relay_id()).expect("relay registered").clone())
        .collect()
}

/// Circuit through relays 0, 1, .. n-1 in spawn order.
pub async fn ordered_circuit(net: &Testnet, n: usize) -> CircuitHandle {
    let path = descriptors_in_spawn_order(net).await;
    build_circuit(&path[..n]).await.unwrap()
}

pub async fn random_circuit(net: &Testnet, n: usize, seed: u64) -> CircuitHandle {
    let snap = net.directory_client().list(None).await.unwrap();
    let path = select_path(&snap, n, &mut StdRng::seed_from_u64(seed)).unwrap();
    build_circuit(&path).await.unwrap()
}

/// Write `data`, half-close, and read everything back.
pub async fn echo_roundtrip<S>(mut s: S, data: &[u8]) -> Vec<u8>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin + Send + 'static,
{
    let (mut r, mut w) = tokio::io::split(&mut s);
    let send = async {
        w.write_all(data).await.unwrap();
        w.shutdown().await.unwrap();
    };
    let recv = async {
        let mut back = Vec::with_capacity(data.len());
        r.read_to_end(&mut back).await.unwrap();
        back
    };
    let ((), back) = tokio::join!(send, recv);
    back
}

pub fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

/// Poll `cond` until it holds or `limit` passes.
pub async fn eventually<F, Fut>(limit: Duration, mut cond: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        if cond().await {
            return true;
        }
        if tokio::time::Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}
