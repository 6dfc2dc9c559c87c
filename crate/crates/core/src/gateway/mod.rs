//! Local SOCKS gateway. In ONION mode every CONNECT becomes a stream on a
//! pooled circuit and names travel to the exit unresolved; DIRECT mode is the
//! no-anonymity baseline.

pub mod pool;
pub mod socks;

use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};

use crate::client::{CircuitError, CircuitHandle, CircuitManager, CircuitStream, MAX_PATH_LEN};
use crate::directory::DirectoryClient;
use crate::dns::query_a;
use crate::onion::EndReason;
use crate::tasks::TaskTracker;
use pool::CircuitPool;
use socks::TargetAddr;

pub const DIRECT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const TICK_PERIOD: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Onion,
    Direct,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "onion" => Ok(Mode::Onion),
            "direct" => Ok(Mode::Direct),
            other => Err(format!("unknown mode {other:?} (expected onion or direct)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Onion => "ONION",
            Mode::Direct => "DIRECT",
        })
    }
}

fn default_listen() -> String {
    "127.0.0.1:9050".into()
}
fn default_directory() -> String {
    "127.0.0.1:9030".into()
}
fn default_path_length() -> usize {
    3
}
fn default_lifetime() -> f64 {
    600.0
}
fn default_pool_size() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    #[serde(default = "default_directory")]
    pub directory_addr: String,
    #[serde(default = "default_path_length")]
    pub path_length: usize,
    /// Seconds before a circuit is rotated.
    #[serde(default = "default_lifetime")]
    pub circuit_lifetime: f64,
    #[serde(default)]
    pub mode: Mode,
    /// Local resolver. DIRECT mode uses it; ONION mode only touches it when
    /// `leaky_mode` is set.
    #[serde(default)]
    pub host_resolver: Option<String>,
    /// Test switch: also resolve every name locally in ONION mode.
    #[serde(default)]
    pub leaky_mode: bool,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen_addr: default_listen(),
            directory_addr: default_directory(),
            path_length: default_path_length(),
            circuit_lifetime: default_lifetime(),
            mode: Mode::Onion,
            host_resolver: None,
            leaky_mode: false,
            pool_size: default_pool_size(),
        }
    }
}

impl GatewayConfig {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(1..=MAX_PATH_LEN).contains(&self.path_length) {
            return Err(GatewayError::Config(format!(
                "path_length {} outside 1..={MAX_PATH_LEN}",
                self.path_length
            )));
        }
        if self.pool_size == 0 {
            return Err(GatewayError::Config("pool_size must be at least 1".into()));
        }
        if !(self.circuit_lifetime > 0.0) {
            return Err(GatewayError::Config("circuit_lifetime must be positive".into()));
        }
        self.listen_addr
            .parse::<SocketAddr>()
            .map_err(|e| GatewayError::Config(format!("listen_addr: {e}")))?;
        self.host_resolver_addr()?;
        if self.leaky_mode && self.host_resolver.is_none() {
            return Err(GatewayError::Config("leaky_mode needs host_resolver".into()));
        }
        Ok(())
    }

    fn host_resolver_addr(&self) -> Result<Option<SocketAddr>, GatewayError> {
        self.host_resolver
            .as_deref()
            .map(|s| {
                s.parse::<SocketAddr>()
                    .map_err(|e| GatewayError::Config(format!("host_resolver: {e}")))
            })
            .transpose()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway config: {0}")]
    Config(String),
    #[error("gateway bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("could not resolve {0}")]
    Resolve(String),
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub accepted: AtomicU64,
    pub connected: AtomicU64,
    pub rejected: AtomicU64,
}

impl GatewayStats {
    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    pub fn connected(&self) -> u64 {
        self.connected.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }
}

struct Inner {
    config: GatewayConfig,
    host_resolver: Option<SocketAddr>,
    pool: Option<CircuitPool>,
    stats: GatewayStats,
}

/// A running gateway. Stops when dropped.
pub struct Gateway {
    inner: Arc<Inner>,
    addr: SocketAddr,
    tasks: TaskTracker,
}

impl Gateway {
    /// Bind, build the initial circuit pool (ONION mode), and start serving.
    pub async fn start(config: GatewayConfig) -> Result<Gateway, GatewayError> {
        config.validate()?;
        let listener = TcpListener::bind(&config.listen_addr)
            .await
            .map_err(|source| GatewayError::Bind {
                addr: config.listen_addr.clone(),
                source,
            })?;
        Self::serve(listener, config).await
    }

    pub async fn serve(listener: TcpListener, config: GatewayConfig) -> Result<Gateway, GatewayError> {
        config.validate()?;
        let addr = listener.local_addr().map_err(|source| GatewayError::Bind {
            addr: config.listen_addr.clone(),
            source,
        })?;
        let host_resolver = config.host_resolver_addr()?;
        let pool = match config.mode {
            Mode::Onion => {
                let manager = CircuitManager::new(
                    DirectoryClient::new(config.directory_addr.clone()),
                    config.path_length,
                );
                let pool = CircuitPool::new(
                    manager,
                    Duration::from_secs_f64(config.circuit_lifetime),
                    config.pool_size,
                );
                pool.fill().await?;
                Some(pool)
            }
            Mode::Direct => None,
        };
        let inner = Arc::new(Inner {
            config,
            host_resolver,
            pool,
            stats: GatewayStats::default(),
        });
        let tasks = TaskTracker::default();
        if inner.pool.is_some() {
            let i = inner.clone();
            tasks.spawn(async move {
                let mut interval = tokio::time::interval(TICK_PERIOD);
                interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    interval.tick().await;
                    if let Some(pool) = &i.pool {
                        pool.tick(Instant::now()).await;
                    }
                }
            });
        }
        let (i, t) = (inner.clone(), tasks.clone());
        tasks.spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((stream, _)) => {
                        i.stats.accepted.fetch_add(1, Ordering::Relaxed);
                        t.spawn(handle_connection(i.clone(), stream));
                    }
                    Err(e) => {
                        tracing::warn!("gateway accept: {e}");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        });
        Ok(Gateway { inner, addr, tasks })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    pub fn mode(&self) -> Mode {
        self.inner.config.mode
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.inner.stats
    }

    /// The circuit pool; `None` in DIRECT mode.
    pub fn pool(&self) -> Option<&CircuitPool> {
        self.inner.pool.as_ref()
    }

    /// Resolve a name the way this gateway's mode dictates: through the exit
    /// in ONION mode, locally in DIRECT mode.
    pub async fn resolve(&self, host: &str) -> Result<Ipv4Addr, GatewayError> {
        self.inner.resolve(host).await
    }

    pub fn shutdown(&self) {
        self.tasks.abort_all();
        if let Some(pool) = &self.inner.pool {
            pool.shutdown();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn end_to_reply(reason: EndReason) -> u8 {
    match reason {
        EndReason::ConnectRefused => socks::REP_CONNECTION_REFUSED,
        EndReason::ResolveFailed | EndReason::Timeout => socks::REP_HOST_UNREACHABLE,
        _ => socks::REP_GENERAL_FAILURE,
    }
}

enum Upstream {
    Circuit(CircuitStream),
    Tcp(TcpStream),
}

impl Inner {
    fn pool(&self) -> &CircuitPool {
        self.pool.as_ref().expect("ONION mode has a pool")
    }

    /// Deliberate local lookup used only in leaky mode.
    async fn leak_lookup(&self, name: &str) {
        if let Some(addr) = self.host_resolver {
            let _ = query_a(addr, name).await;
        }
    }

    async fn local_resolve(&self, name: &str) -> Option<Ipv4Addr> {
        if let Ok(ip) = name.parse() {
            return Some(ip);
        }
        match self.host_resolver {
            Some(addr) => query_a(addr, name).await.ok().flatten(),
            None => tokio::net::lookup_host((name, 0)).await.ok()?.find_map(|a| match a {
                SocketAddr::V4(v4) => Some(*v4.ip()),
                SocketAddr::V6(_) => None,
            }),
        }
    }

    async fn circuit(&self) -> Result<CircuitHandle, CircuitError> {
        match self.pool().get() {
            Some(c) => Ok(c),
            None => self.pool().rebuild_now(None).await,
        }
    }

    /// Run `op` on a pooled circuit; if the circuit itself failed, rebuild
    /// once and try again.
    async fn with_circuit<T, F, Fut>(&self, op: F) -> Result<T, CircuitError>
    where
        F: Fn(CircuitHandle) -> Fut,
        Fut: std::future::Future<Output = Result<T, CircuitError>>,
    {
        let mut circuit = self.circuit().await?;
        let mut retried = false;
        loop {
            match op(circuit.clone()).await {
                Err(CircuitError::Retiring) => circuit = self.circuit().await?,
                Err(CircuitError::CircuitClosed) if !retried => {
                    retried = true;
                    circuit = self.pool().rebuild_now(Some(&circuit)).await?;
                }
                other => return other,
            }
        }
    }

    async fn resolve(&self, host: &str) -> Result<Ipv4Addr, GatewayError> {
        if let Ok(ip) = host.parse() {
            return Ok(ip);
        }
        match self.config.mode {
            Mode::Onion => {
                if self.config.leaky_mode {
                    self.leak_lookup(host).await;
                }
                Ok(self
                    .with_circuit(|c| async move { c.resolve(host).await })
                    .await?)
            }
            Mode::Direct => self
                .local_resolve(host)
                .await
                .ok_or_else(|| GatewayError::Resolve(host.to_string())),
        }
    }

    async fn connect(&self, target: &TargetAddr) -> Result<Upstream, u8> {
        match self.config.mode {
            Mode::Onion => {
                if let (true, TargetAddr::Domain(name, _)) = (self.config.leaky_mode, target) {
                    self.leak_lookup(name).await;
                }
                let dest = target.to_destination();
                let dest = dest.as_str();
                self.with_circuit(|c| async move { c.open_stream(dest).await })
                    .await
                    .map(Upstream::Circuit)
                    .map_err(|e| {
                        tracing::debug!("CONNECT {dest}: {e}");
                        match e {
                            CircuitError::StreamRefused(reason) => end_to_reply(reason),
                            CircuitError::Timeout(_) => socks::REP_HOST_UNREACHABLE,
                            _ => socks::REP_GENERAL_FAILURE,
                        }
                    })
            }
            Mode::Direct => {
                let ip = match target {
                    TargetAddr::Ipv4(ip, _) => *ip,
                    TargetAddr::Domain(name, _) => self
                        .local_resolve(name)
                        .await
                        .ok_or(socks::REP_HOST_UNREACHABLE)?,
                };
                let addr = SocketAddr::from((ip, target.port()));
                match tokio::time::timeout(DIRECT_CONNECT_TIMEOUT, TcpStream::connect(addr)).await {
                    Ok(Ok(s)) => {
                        let _ = s.set_nodelay(true);
                        Ok(Upstream::Tcp(s))
                    }
                    Ok(Err(e)) if e.kind() == std::io::ErrorKind::ConnectionRefused => {
                        Err(socks::REP_CONNECTION_REFUSED)
                    }
                    Ok(Err(_)) => Err(socks::REP_GENERAL_FAILURE),
                    Err(_) => Err(socks::REP_HOST_UNREACHABLE),
                }
            }
        }
    }
}

async fn handle_connection(inner: Arc<Inner>, mut client: TcpStream) {
    let _ = client.set_nodelay(true);
    let target = match socks::accept_request(&mut client).await {
        Ok(t) => t,
        Err(e) => {
            tracing::debug!("socks negotiation: {e}");
            inner.stats.rejected.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    match inner.connect(&target).await {
        Ok(upstream) => {
            if socks::send_reply(&mut client, socks::REP_SUCCEEDED).await.is_err() {
                return;
            }
            inner.stats.connected.fetch_add(1, Ordering::Relaxed);
            match upstream {
                Upstream::Circuit(mut s) => pump(&mut client, &mut s).await,
                Upstream::Tcp(mut s) => pump(&mut client, &mut s).await,
            }
        }
        Err(code) => {
            inner.stats.rejected.fetch_add(1, Ordering::Relaxed);
            let _ = socks::send_reply(&mut client, code).await;
        }
    }
}

async fn pump<A, B>(a: &mut A, b: &mut B)
where
    A: AsyncRead + AsyncWrite + Unpin,
    B: AsyncRead + AsyncWrite + Unpin,
{
    if let Err(e) = tokio::io::copy_bidirectional(a, b).await {
        tracing::debug!("proxied connection ended: {e}");
    }
}
