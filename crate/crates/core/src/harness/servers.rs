//! Destination servers: echo, byte sink, byte source.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use crate::tasks::TaskTracker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    /// Returns every byte it receives.
    Echo,
    /// Reads an 8-octet big-endian length, then that many bytes, then
    /// answers with the 8-octet count it received.
    Sink,
    /// Reads an 8-octet big-endian length and streams that many bytes.
    Source,
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    /// Payload bytes received (length prefixes excluded).
    pub bytes_in: AtomicU64,
    /// Payload bytes sent (acknowledgements excluded).
    pub bytes_out: AtomicU64,
}

/// A running destination server. Stops when dropped.
pub struct TestServer {
    kind: ServerKind,
    addr: SocketAddr,
    stats: Arc<ServerStats>,
    capture: Option<Arc<Mutex<Vec<u8>>>>,
    tasks: TaskTracker,
}

impl TestServer {
    pub async fn start(kind: ServerKind, addr: SocketAddr) -> std::io::Result<Self> {
        Self::start_inner(kind, addr, false).await
    }

    /// Echo server that also records every byte it receives, in arrival
    /// order across all connections.
    pub async fn start_capturing_echo(addr: SocketAddr) -> std::io::Result<Self> {
        Self::start_inner(ServerKind::Echo, addr, true).await
    }

    async fn start_inner(kind: ServerKind, addr: SocketAddr, capture: bool) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(ServerStats::default());
        let capture = capture.then(|| Arc::new(Mutex::new(Vec::new())));
        let tasks = TaskTracker::default();
        let (s, c, t) = (stats.clone(), capture.clone(), tasks.clone());
        tasks.spawn(async move {
            loop {
                let Ok((conn, _)) = listener.accept().await else {
                    continue;
                };
                let _ = conn.set_nodelay(true);
                s.connections.fetch_add(1, Ordering::Relaxed);
                let (s, c) = (s.clone(), c.clone());
                t.spawn(async move {
                    let r = match kind {
                        ServerKind::Echo => echo(conn, &s, c.as_deref()).await,
                        ServerKind::Sink => sink(conn, &s).await,
                        ServerKind::Source => source(conn, &s).await,
                    };
                    if let Err(e) = r {
                        tracing::debug!("{kind:?} server connection: {e}");
                    }
                });
            }
        });
        Ok(TestServer {
            kind,
            addr,
            stats,
            capture,
            tasks,
        })
    }

    pub fn kind(&self) -> ServerKind {
        self.kind
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn bytes_in(&self) -> u64 {
        self.stats.bytes_in.load(Ordering::Relaxed)
    }

    pub fn bytes_out(&self) -> u64 {
        self.stats.bytes_out.load(Ordering::Relaxed)
    }

    /// Bytes captured so far; empty unless started with capture.
    pub fn captured(&self) -> Vec<u8> {
        self.capture
            .as_ref()
            .map(|c| c.lock().expect("capture poisoned").clone())
            .unwrap_or_default()
    }

    pub fn shutdown(&self) {
        self.tasks.abort_all();
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn echo(
    mut conn: TcpStream,
    stats: &ServerStats,
    capture: Option<&Mutex<Vec<u8>>>,
) -> std::io::Result<()> {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = conn.read(&mut buf).await?;
        if n == 0 {
            break;
        }
        stats.bytes_in.fetch_add(n as u64, Ordering::Relaxed);
        if let Some(c) = capture {
            c.lock().expect("capture poisoned").extend_from_slice(&buf[..n]);
        }
        conn.write_all(&buf[..n]).await?;
        stats.bytes_out.fetch_add(n as u64, Ordering::Relaxed);
    }
    conn.shutdown().await
}

async fn sink(mut conn: TcpStream, stats: &ServerStats) -> std::io::Result<()> {
    let want = conn.read_u64().await?;
    let mut buf = vec![0u8; 64 * 1024];
    let mut got = 0u64;
    while got < want {
        let n = conn.read(&mut buf).await?;
        if n == 0 {
            break;
        }
        got += n as u64;
        stats.bytes_in.fetch_add(n as u64, Ordering::Relaxed);
    }
    conn.write_u64(got).await?;
    conn.shutdown().await
}

async fn source(mut conn: TcpStream, stats: &ServerStats) -> std::io::Result<()> {
    let want = conn.read_u64().await?;
    let mut buf = vec![0u8; 64 * 1024];
    rand::thread_rng().fill_bytes(&mut buf);
    let mut sent = 0u64;
    while sent < want {
        let n = (want - sent).min(buf.len() as u64) as usize;
        conn.write_all(&buf[..n]).await?;
        sent += n as u64;
        stats.bytes_out.fetch_add(n as u64, Ordering::Relaxed);
    }
    conn.shutdown().await
}
