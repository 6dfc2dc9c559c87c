//! Boot a directory, relays, destination servers and gateways on loopback.

use std::collections::{BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddr};

use tokio::net::TcpListener;

use super::servers::{ServerKind, TestServer};
use super::tap::TapProxy;
use crate::directory::{all_roles, DirectoryClient, DirectoryServer, Role};
use crate::dns::Resolver;
use crate::gateway::{Gateway, GatewayConfig};
use crate::onion::IdentityKeypair;
use crate::relay::{Relay, RelayConfig};

fn loopback(port: u16) -> SocketAddr {
    SocketAddr::from((Ipv4Addr::LOCALHOST, port))
}

#[derive(Debug, Clone)]
pub struct RelaySpec {
    pub roles: BTreeSet<Role>,
    /// Cap on the relay's outgoing link rate.
    pub shape_mbps: Option<f64>,
    /// Put a [`TapProxy`] in front of the relay and advertise the tap.
    pub tap: bool,
    /// 0 picks a free port.
    pub port: u16,
}

impl Default for RelaySpec {
    fn default() -> Self {
        RelaySpec {
            roles: all_roles(),
            shape_mbps: None,
            tap: false,
            port: 0,
        }
    }
}

impl RelaySpec {
    pub fn with_roles(roles: &[Role]) -> Self {
        RelaySpec {
            roles: roles.iter().copied().collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerSpec {
    pub kind: ServerKind,
    pub port: u16,
    /// Echo only: record received bytes.
    pub capture: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TopologySpec {
    pub directory_port: u16,
    pub relays: Vec<RelaySpec>,
    /// Name map every relay resolves from.
    pub exit_hosts: HashMap<String, Ipv4Addr>,
    pub servers: Vec<ServerSpec>,
    /// `directory_addr` is filled in at spawn time.
    pub gateways: Vec<GatewayConfig>,
}

impl TopologySpec {
    /// `n` all-role relays and nothing else.
    pub fn relays(n: usize) -> Self {
        let mut exit_hosts = HashMap::new();
        exit_hosts.insert("localhost".to_string(), Ipv4Addr::LOCALHOST);
        TopologySpec {
            relays: vec![RelaySpec::default(); n],
            exit_hosts,
            ..Default::default()
        }
    }

    pub fn with_taps(mut self) -> Self {
        for r in &mut self.relays {
            r.tap = true;
        }
        self
    }

    pub fn with_server(mut self, kind: ServerKind) -> Self {
        self.servers.push(ServerSpec {
            kind,
            port: 0,
            capture: false,
        });
        self
    }

    pub fn with_capturing_echo(mut self) -> Self {
        self.servers.push(ServerSpec {
            kind: ServerKind::Echo,
            port: 0,
            capture: true,
        });
        self
    }

    pub fn with_gateway(mut self, config: GatewayConfig) -> Self {
        self.gateways.push(config);
        self
    }

    pub fn with_exit_host(mut self, name: &str, ip: Ipv4Addr) -> Self {
        self.exit_hosts.insert(name.to_ascii_lowercase(), ip);
        self
    }
}

#[derive(Debug, thiserror::Error)]
#[error("failed to start {component}: {source}")]
pub struct SpawnError {
    pub component: String,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl SpawnError {
    fn new(component: impl Into<String>, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        SpawnError {
            component: component.into(),
            source: Box::new(source),
        }
    }
}

/// A running topology. Dropping it stops every component.
pub struct Testnet {
    pub directory: DirectoryServer,
    pub relays: Vec<Relay>,
    /// Parallel to `relays`.
    pub taps: Vec<Option<TapProxy>>,
    pub servers: Vec<TestServer>,
    pub gateways: Vec<Gateway>,
}

impl Testnet {
    pub fn directory_addr(&self) -> SocketAddr {
        self.directory.local_addr()
    }

    pub fn directory_client(&self) -> DirectoryClient {
        self.directory.client()
    }

    /// First server of the given kind.
    pub fn server(&self, kind: ServerKind) -> Option<&TestServer> {
        self.servers.iter().find(|s| s.kind() == kind)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateways[0]
    }

    /// Start another gateway against this testnet's directory.
    pub async fn add_gateway(&mut self, mut config: GatewayConfig) -> Result<&Gateway, SpawnError> {
        let index = self.gateways.len();
        config.directory_addr = self.directory_addr().to_string();
        let gw = Gateway::start(config)
            .await
            .map_err(|e| SpawnError::new(format!("gateway {index}"), e))?;
        self.gateways.push(gw);
        Ok(&self.gateways[index])
    }

    pub fn shutdown(&mut self) {
        for g in self.gateways.drain(..) {
            g.shutdown();
        }
        for r in self.relays.drain(..) {
            r.shutdown();
        }
        for t in self.taps.drain(..).flatten() {
            t.shutdown();
        }
        for s in self.servers.drain(..) {
            s.shutdown();
        }
        self.directory.shutdown();
    }
}

impl Drop for Testnet {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub async fn spawn_testnet(spec: &TopologySpec) -> Result<Testnet, SpawnError> {
    let directory = DirectoryServer::bind(loopback(spec.directory_port))
        .await
        .map_err(|e| SpawnError::new("directory", e))?;
    let mut net = Testnet {
        directory,
        relays: Vec::new(),
        taps: Vec::new(),
        servers: Vec::new(),
        gateways: Vec::new(),
    };
    let resolver = Resolver::from_map(spec.exit_hosts.clone());
    for (i, rs) in spec.relays.iter().enumerate() {
        let component = format!("relay {i}");
        let listener = TcpListener::bind(loopback(rs.port))
            .await
            .map_err(|e| SpawnError::new(&component, e))?;
        let addr = listener
            .local_addr()
            .map_err(|e| SpawnError::new(&component, e))?;
        let tap = if rs.tap {
            Some(
                TapProxy::start(loopback(0), addr)
                    .await
                    .map_err(|e| SpawnError::new(format!("tap for relay {i}"), e))?,
            )
        } else {
            None
        };
        let mut config = RelayConfig::new(addr, IdentityKeypair::generate());
        config.roles = rs.roles.clone();
        config.directory = Some(net.directory.client());
        config.advertise = tap.as_ref().map(|t| t.local_addr().to_string());
        config.resolver = resolver.clone();
        config.shape_mbps = rs.shape_mbps;
        let relay = Relay::serve(listener, config)
            .await
            .map_err(|e| SpawnError::new(&component, e))?;
        net.relays.push(relay);
        net.taps.push(tap);
    }
    for (i, ss) in spec.servers.iter().enumerate() {
        let started = if ss.capture {
            TestServer::start_capturing_echo(loopback(ss.port)).await
        } else {
            TestServer::start(ss.kind, loopback(ss.port)).await
        };
        net.servers
            .push(started.map_err(|e| SpawnError::new(format!("{:?} server {i}", ss.kind), e))?);
    }
    for config in &spec.gateways {
        net.add_gateway(config.clone()).await?;
    }
    Ok(net)
}
