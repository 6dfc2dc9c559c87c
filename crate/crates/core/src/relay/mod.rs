//! Relay node.
//!
//! A relay accepts links, answers CREATE with a handshake, and then runs one
//! actor task per circuit. The actor holds the only per-circuit state: the
//! previous link, an optional next link, and a single session key. Terminal
//! hops additionally own exit streams.

mod circuit;
mod exit;

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::directory::{all_roles, DirectoryClient, DirectoryError, RelayDescriptor, Role};
use crate::dns::Resolver;
use crate::link::{spawn_writer, CellReader, LinkId, Shaper};
use crate::onion::handshake::server_handshake;
use crate::onion::{Cell, CellCommand, DestroyReason, IdentityKeypair, RelayId, SessionKey};
use crate::tasks::TaskTracker;

pub(crate) use circuit::CircuitEvent;

pub const EXIT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
/// Time allowed for an extension target to answer CREATE.
pub const EXTEND_TIMEOUT: Duration = Duration::from_secs(5);

/// One side of a circuit on a particular link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkRef {
    pub link: LinkId,
    pub circuit_id: u32,
}

/// Everything a relay remembers about a circuit.
#[derive(Debug, Clone, Serialize)]
pub struct RelayCircuitState {
    pub prev_link: LinkRef,
    pub next_link: Option<LinkRef>,
    pub session: SessionKey,
}

/// Exit stream as seen by inspection. Only terminal hops have any.
#[derive(Debug, Clone, Serialize)]
pub struct ExitStreamInfo {
    pub stream_id: u16,
    pub destination: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CircuitInspection {
    pub state: RelayCircuitState,
    pub exit_streams: Vec<ExitStreamInfo>,
}

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub listen: SocketAddr,
    pub identity: IdentityKeypair,
    pub roles: BTreeSet<Role>,
    pub directory: Option<DirectoryClient>,
    /// Address published in the directory, when it differs from `listen`.
    pub advertise: Option<String>,
    pub resolver: Resolver,
    /// Token-bucket cap on everything this relay writes, in megabits/s.
    pub shape_mbps: Option<f64>,
    pub connect_timeout: Duration,
}

impl RelayConfig {
    pub fn new(listen: SocketAddr, identity: IdentityKeypair) -> Self {
        RelayConfig {
            listen,
            identity,
            roles: all_roles(),
            directory: None,
            advertise: None,
            resolver: Resolver::default(),
            shape_mbps: None,
            connect_timeout: EXIT_CONNECT_TIMEOUT,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RelayError {
    #[error("relay bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("relay registration: {0}")]
    Directory(#[from] DirectoryError),
    #[error("relay roles must be non-empty")]
    NoRoles,
}

pub(crate) struct RelayShared {
    identity: IdentityKeypair,
    resolver: Resolver,
    shape_mbps: Option<f64>,
    connect_timeout: Duration,
    circuits: Mutex<HashMap<u64, mpsc::UnboundedSender<CircuitEvent>>>,
    next_serial: AtomicU64,
    tasks: TaskTracker,
}

impl RelayShared {
    fn shaper(&self) -> Option<Shaper> {
        self.shape_mbps.map(Shaper::from_mbps)
    }

    fn register_circuit(&self, inbox: mpsc::UnboundedSender<CircuitEvent>) -> u64 {
        let serial = self.next_serial.fetch_add(1, Ordering::Relaxed);
        self.circuits
            .lock()
            .expect("circuit registry poisoned")
            .insert(serial, inbox);
        serial
    }

    fn unregister_circuit(&self, serial: u64) {
        self.circuits
            .lock()
            .expect("circuit registry poisoned")
            .remove(&serial);
    }
}

/// A running relay.
pub struct Relay {
    shared: Arc<RelayShared>,
    addr: SocketAddr,
    descriptor: RelayDescriptor,
}

impl Relay {
    pub async fn start(config: RelayConfig) -> Result<Relay, RelayError> {
        let listener = TcpListener::bind(config.listen)
            .await
            .map_err(|source| RelayError::Bind {
                addr: config.listen,
                source,
            })?;
        Self::serve(listener, config).await
    }

    /// Run on an already-bound listener, registering with the directory if
    /// one is configured.
    pub async fn serve(listener: TcpListener, config: RelayConfig) -> Result<Relay, RelayError> {
        if config.roles.is_empty() {
            return Err(RelayError::NoRoles);
        }
        let addr = listener.local_addr().map_err(|source| RelayError::Bind {
            addr: config.listen,
            source,
        })?;
        let descriptor = RelayDescriptor {
            relay_id: config.identity.relay_id(),
            address: config.advertise.clone().unwrap_or_else(|| addr.to_string()),
            roles: config.roles.clone(),
            public_key: config.identity.public_bytes(),
            registered_at: 0,
        };
        let shared = Arc::new(RelayShared {
            identity: config.identity.clone(),
            resolver: config.resolver.clone(),
            shape_mbps: config.shape_mbps,
            connect_timeout: config.connect_timeout,
            circuits: Mutex::new(HashMap::new()),
            next_serial: AtomicU64::new(1),
            tasks: TaskTracker::default(),
        });
        let accept_shared = shared.clone();
        shared.tasks.spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((stream, peer)) => {
                        tracing::trace!(%peer, "relay accepted link");
                        let s = accept_shared.clone();
                        accept_shared.tasks.spawn(serve_link(s, stream));
                    }
                    Err(e) => {
                        tracing::warn!("relay accept: {e}");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        });
        let relay = Relay {
            shared,
            addr,
            descriptor,
        };
        if let Some(dir) = &config.directory {
            if let Err(e) = dir.register(&relay.descriptor).await {
                relay.shutdown();
                return Err(e.into());
            }
        }
        Ok(relay)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn descriptor(&self) -> &RelayDescriptor {
        &self.descriptor
    }

    pub fn relay_id(&self) -> RelayId {
        self.descriptor.relay_id
    }

    pub fn circuit_count(&self) -> usize {
        self.shared
            .circuits
            .lock()
            .expect("circuit registry poisoned")
            .len()
    }

    /// Ask every live circuit for its state.
    pub async fn circuit_states(&self) -> Vec<CircuitInspection> {
        let inboxes: Vec<_> = self
            .shared
            .circuits
            .lock()
            .expect("circuit registry poisoned")
            .values()
            .cloned()
            .collect();
        let mut out = Vec::new();
        for inbox in inboxes {
            let (tx, rx) = oneshot::channel();
            if inbox.send(CircuitEvent::Inspect(tx)).is_ok() {
                if let Ok(state) = rx.await {
                    out.push(state);
                }
            }
        }
        out
    }

    /// Stop listening and drop every link, circuit and exit stream.
    pub fn shutdown(&self) {
        self.shared.tasks.abort_all();
        self.shared
            .circuits
            .lock()
            .expect("circuit registry poisoned")
            .clear();
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Reader loop for a link opened by a previous hop (or the originator).
async fn serve_link(shared: Arc<RelayShared>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let link = LinkId::fresh();
    let (read, write) = stream.into_split();
    let tx = spawn_writer(write, shared.shaper());
    let mut reader = CellReader::new(read);
    let mut circuits: HashMap<u32, mpsc::UnboundedSender<CircuitEvent>> = HashMap::new();
    loop {
        let cell = match reader.next().await {
            Ok(Some(cell)) => cell,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!("relay link {link:?} read: {e}");
                break;
            }
        };
        let id = cell.circuit_id;
        match cell.command {
            CellCommand::Create => {
                if let Some(old) = circuits.remove(&id) {
                    let _ = old.send(CircuitEvent::Superseded);
                }
                match server_handshake(&shared.identity, &cell.payload) {
                    Ok((session, created)) => {
                        if tx.send(Cell::new(id, CellCommand::Created, created)).await.is_err() {
                            break;
                        }
                        let prev = LinkRef {
                            link,
                            circuit_id: id,
                        };
                        let inbox = circuit::spawn(shared.clone(), prev, tx.clone(), session);
                        circuits.insert(id, inbox);
                    }
                    Err(e) => {
                        tracing::debug!("CREATE on {link:?}/{id} rejected: {e}");
                        if tx.send(Cell::destroy(id, DestroyReason::HandshakeFailed)).await.is_err() {
                            break;
                        }
                    }
                }
            }
            CellCommand::Relay | CellCommand::Destroy => {
                let destroy = cell.command == CellCommand::Destroy;
                match circuits.get(&id) {
                    Some(inbox) => {
                        if inbox.send(CircuitEvent::FromPrev(cell)).is_err() || destroy {
                            circuits.remove(&id);
                        }
                    }
                    None if !destroy => {
                        let _ = tx.send(Cell::destroy(id, DestroyReason::Protocol)).await;
                    }
                    None => {}
                }
            }
            CellCommand::Created => {
                tracing::debug!("unexpected CREATED on inbound link {link:?}");
            }
        }
    }
    for inbox in circuits.into_values() {
        let _ = inbox.send(CircuitEvent::PrevClosed);
    }
}
