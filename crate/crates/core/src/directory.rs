//! The directory node.
//!
//! Relays register descriptors; clients list them and fetch long-term keys.
//! The wire protocol is one JSON object per line over TCP, one request and
//! one response per line:
//!
//! ```text
//! {"op":"register","descriptor":{...}}      -> {"ok":true}
//! {"op":"list","roles":["exit"]}             -> {"ok":true,"snapshot":{...}}
//! {"op":"get_key","relay_id":"<32 hex>"}     -> {"ok":true,"public_key":"<64 hex>"}
//! ```
//!
//! Failures come back as `{"ok":false,"error":"..."}`.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use crate::onion::RelayId;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Entry,
    Middle,
    Exit,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entry" => Ok(Role::Entry),
            "middle" => Ok(Role::Middle),
            "exit" => Ok(Role::Exit),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

pub fn all_roles() -> BTreeSet<Role> {
    [Role::Entry, Role::Middle, Role::Exit].into_iter().collect()
}

mod hex16 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(id: &crate::onion::RelayId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&id.to_hex())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<crate::onion::RelayId, D::Error> {
        let s = String::deserialize(d)?;
        crate::onion::RelayId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayDescriptor {
    #[serde(with = "hex16")]
    pub relay_id: RelayId,
    pub address: String,
    pub roles: BTreeSet<Role>,
    #[serde(with = "hex::serde")]
    pub public_key: [u8; 32],
    /// Unix milliseconds, stamped by the directory.
    #[serde(default)]
    pub registered_at: u64,
}

impl RelayDescriptor {
    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    pub fn validate(&self) -> Result<(), DirectoryError> {
        if self.roles.is_empty() {
            return Err(DirectoryError::Invalid("roles must be non-empty".into()));
        }
        if self.address.parse::<SocketAddr>().is_err() {
            let ok = self
                .address
                .rsplit_once(':')
                .map(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok())
                .unwrap_or(false);
            if !ok {
                return Err(DirectoryError::Invalid(format!(
                    "address {:?} is not host:port",
                    self.address
                )));
            }
        }
        if RelayId::from_public_key(&self.public_key) != self.relay_id {
            return Err(DirectoryError::Invalid(
                "relay_id does not match public key".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectorySnapshot {
    pub relays: Vec<RelayDescriptor>,
    pub issued_at: u64,
}

impl DirectorySnapshot {
    pub fn get(&self, id: &RelayId) -> Option<&RelayDescriptor> {
        self.relays.iter().find(|r| &r.relay_id == id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DirectoryError {
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("relay {0} not found")]
    NotFound(String),
    #[error("directory i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("directory protocol: {0}")]
    Protocol(String),
    #[error("directory request timed out")]
    Timeout,
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// In-memory registry. Snapshots are copies, so later writes never affect a
/// snapshot already handed out.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    inner: Arc<RwLock<HashMap<RelayId, RelayDescriptor>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_relay(&self, mut descriptor: RelayDescriptor) -> Result<(), DirectoryError> {
        descriptor.validate()?;
        descriptor.registered_at = now_millis();
        self.inner
            .write()
            .expect("registry lock poisoned")
            .insert(descriptor.relay_id, descriptor);
        Ok(())
    }

    pub fn list_relays(&self, role_filter: Option<&BTreeSet<Role>>) -> DirectorySnapshot {
        let guard = self.inner.read().expect("registry lock poisoned");
        let mut relays: Vec<RelayDescriptor> = guard
            .values()
            .filter(|d| match role_filter {
                Some(filter) if !filter.is_empty() => filter.iter().any(|r| d.roles.contains(r)),
                _ => true,
            })
            .cloned()
            .collect();
        relays.sort_by(|a, b| a.relay_id.cmp(&b.relay_id));
        DirectorySnapshot {
            relays,
            issued_at: now_millis(),
        }
    }

    pub fn get_relay_key(&self, id: &RelayId) -> Result<[u8; 32], DirectoryError> {
        self.inner
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .map(|d| d.public_key)
            .ok_or_else(|| DirectoryError::NotFound(id.to_hex()))
    }

    pub fn remove(&self, id: &RelayId) {
        self.inner.write().expect("registry lock poisoned").remove(id);
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Register {
        descriptor: RelayDescriptor,
    },
    List {
        #[serde(default)]
        roles: Option<BTreeSet<Role>>,
    },
    GetKey {
        relay_id: String,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Response {
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot: Option<DirectorySnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    public_key: Option<String>,
}

impl Response {
    fn error(e: impl ToString) -> Self {
        Response {
            ok: false,
            error: Some(e.to_string()),
            ..Default::default()
        }
    }
}

fn handle_request(registry: &Registry, line: &str) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Response::error(format!("bad request: {e}")),
    };
    match request {
        Request::Register { descriptor } => match registry.register_relay(descriptor) {
            Ok(()) => Response {
                ok: true,
                ..Default::default()
            },
            Err(e) => Response::error(e),
        },
        Request::List { roles } => Response {
            ok: true,
            snapshot: Some(registry.list_relays(roles.as_ref())),
            ..Default::default()
        },
        Request::GetKey { relay_id } => {
            let key = RelayId::from_hex(&relay_id)
                .map_err(|e| DirectoryError::Invalid(e.to_string()))
                .and_then(|id| registry.get_relay_key(&id));
            match key {
                Ok(k) => Response {
                    ok: true,
                    public_key: Some(hex::encode(k)),
                    ..Default::default()
                },
                Err(e) => Response::error(e),
            }
        }
    }
}

async fn serve_connection(registry: Registry, stream: TcpStream) -> std::io::Result<()> {
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_request(&registry, &line);
        let mut out = serde_json::to_vec(&response).expect("response serializes");
        out.push(b'\n');
        w.write_all(&out).await?;
    }
    Ok(())
}

/// A running directory server.
pub struct DirectoryServer {
    pub registry: Registry,
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl DirectoryServer {
    pub async fn bind(addr: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Self::serve(listener, Registry::new()))
    }

    pub fn serve(listener: TcpListener, registry: Registry) -> Self {
        let addr = listener.local_addr().expect("bound listener has an address");
        let reg = registry.clone();
        let task = tokio::spawn(async move {
            let mut conns = tokio::task::JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => match accepted {
                        Ok((stream, _)) => {
                            let reg = reg.clone();
                            conns.spawn(async move {
                                if let Err(e) = serve_connection(reg, stream).await {
                                    tracing::debug!("directory connection: {e}");
                                }
                            });
                        }
                        Err(e) => tracing::warn!("directory accept: {e}"),
                    },
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        DirectoryServer {
            registry,
            addr,
            task,
        }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client(&self) -> DirectoryClient {
        DirectoryClient::new(self.addr.to_string())
    }

    /// Stop accepting and drop every open connection.
    pub fn shutdown(&self) {
        self.task.abort();
    }
}

impl Drop for DirectoryServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

#[derive(Debug, Clone)]
pub struct DirectoryClient {
    addr: String,
}

impl DirectoryClient {
    pub fn new(addr: impl Into<String>) -> Self {
        DirectoryClient { addr: addr.into() }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    async fn call(&self, request: &Request) -> Result<Response, DirectoryError> {
        let fut = async {
            let stream = TcpStream::connect(&self.addr).await?;
            let (r, mut w) = stream.into_split();
            let mut line = serde_json::to_vec(request).expect("request serializes");
            line.push(b'\n');
            w.write_all(&line).await?;
            let mut lines = BufReader::new(r).lines();
            let reply = lines
                .next_line()
                .await?
                .ok_or_else(|| DirectoryError::Protocol("connection closed".into()))?;
            let response: Response = serde_json::from_str(&reply)
                .map_err(|e| DirectoryError::Protocol(e.to_string()))?;
            Ok::<_, DirectoryError>(response)
        };
        tokio::time::timeout(REQUEST_TIMEOUT, fut)
            .await
            .map_err(|_| DirectoryError::Timeout)?
    }

    pub async fn register(&self, descriptor: &RelayDescriptor) -> Result<(), DirectoryError> {
        let resp = self
            .call(&Request::Register {
                descriptor: descriptor.clone(),
            })
            .await?;
        if resp.ok {
            Ok(())
        } else {
            Err(DirectoryError::Invalid(resp.error.unwrap_or_default()))
        }
    }

    pub async fn list(&self, roles: Option<BTreeSet<Role>>) -> Result<DirectorySnapshot, DirectoryError> {
        let resp = self.call(&Request::List { roles }).await?;
        match (resp.ok, resp.snapshot) {
            (true, Some(s)) => Ok(s),
            _ => Err(DirectoryError::Protocol(
                resp.error.unwrap_or_else(|| "missing snapshot".into()),
            )),
        }
    }

    pub async fn get_key(&self, id: &RelayId) -> Result<[u8; 32], DirectoryError> {
        let resp = self
            .call(&Request::GetKey {
                relay_id: id.to_hex(),
            })
            .await?;
        if !resp.ok {
            let msg = resp.error.unwrap_or_default();
            return Err(if msg.contains("not found") {
                DirectoryError::NotFound(id.to_hex())
            } else {
                DirectoryError::Protocol(msg)
            });
        }
        let hex_key = resp
            .public_key
            .ok_or_else(|| DirectoryError::Protocol("missing public_key".into()))?;
        let bytes = hex::decode(hex_key).map_err(|e| DirectoryError::Protocol(e.to_string()))?;
        bytes
            .try_into()
            .map_err(|_| DirectoryError::Protocol("public_key length".into()))
    }
}
