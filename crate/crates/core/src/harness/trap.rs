//! A UDP "resolver" that logs every datagram it receives. Any hit means a
//! lookup bypassed the circuit.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tokio::net::UdpSocket;
use tokio::task::JoinHandle;

use crate::dns::{answer_query, query_name};

#[derive(Debug, Clone, Serialize)]
pub struct TrapHit {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub source: SocketAddr,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub qname: Option<String>,
}

pub struct TrapResolver {
    addr: SocketAddr,
    hits: Arc<Mutex<Vec<TrapHit>>>,
    task: JoinHandle<()>,
}

impl TrapResolver {
    /// Bind at `addr` and answer A queries from `answers` (NXDOMAIN otherwise),
    /// so that a leaking client still gets working lookups.
    pub async fn start(addr: SocketAddr, answers: HashMap<String, Ipv4Addr>) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(addr).await?;
        let addr = socket.local_addr()?;
        let hits = Arc::new(Mutex::new(Vec::new()));
        let log = hits.clone();
        let task = tokio::spawn(async move {
            let mut buf = vec![0u8; 4096];
            loop {
                let Ok((n, source)) = socket.recv_from(&mut buf).await else {
                    continue;
                };
                let payload = buf[..n].to_vec();
                let timestamp = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs_f64())
                    .unwrap_or(0.0);
                let qname = query_name(&payload);
                let reply = answer_query(&payload, &answers);
                log.lock().expect("trap log poisoned").push(TrapHit {
                    timestamp,
                    source,
                    payload,
                    qname,
                });
                if let Some(reply) = reply {
                    let _ = socket.send_to(&reply, source).await;
                }
            }
        });
        Ok(TrapResolver { addr, hits, task })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hits(&self) -> Vec<TrapHit> {
        self.hits.lock().expect("trap log poisoned").clone()
    }

    pub fn hit_count(&self) -> usize {
        self.hits.lock().expect("trap log poisoned").len()
    }

    pub fn shutdown(&self) {
        self.task.abort();
    }
}

impl Drop for TrapResolver {
    fn drop(&mut self) {
        self.task.abort();
    }
}
