//! DNS leak test: drive lookups through a gateway while a trap listens at
//! the gateway host's resolver address.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use super::servers::ServerKind;
use super::testnet::{spawn_testnet, TopologySpec};
use super::trap::{TrapHit, TrapResolver};
use super::HarnessError;
use crate::gateway::socks::{connect_via, TargetAddr};
use crate::gateway::{GatewayConfig, Mode};

pub const LEAK_TEST_COUNT: usize = 100;
const PROBE: &[u8] = b"leak-probe";
/// Time allowed for stray datagrams to land after the workload.
const SETTLE: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    NoLeak,
    Leak,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::NoLeak => "NO_LEAK",
            Verdict::Leak => "LEAK",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LeakReport {
    pub mode: Mode,
    pub leaky_mode: bool,
    pub trap_hits: Vec<TrapHit>,
    pub verdict: Verdict,
    pub connects_attempted: usize,
    pub connects_ok: usize,
    pub resolves_attempted: usize,
    pub resolves_ok: usize,
}

impl LeakReport {
    pub fn new(mode: Mode, leaky_mode: bool, trap_hits: Vec<TrapHit>) -> Self {
        let verdict = if trap_hits.is_empty() {
            Verdict::NoLeak
        } else {
            Verdict::Leak
        };
        LeakReport {
            mode,
            leaky_mode,
            trap_hits,
            verdict,
            connects_attempted: 0,
            connects_ok: 0,
            resolves_attempted: 0,
            resolves_ok: 0,
        }
    }
}

pub fn connect_name(i: usize) -> String {
    format!("site-{i}.leaktest")
}

pub fn resolve_name(i: usize) -> String {
    format!("lookup-{i}.leaktest")
}

/// Spawn a 3-relay testnet whose exits know the test names, bind the trap at
/// `config.host_resolver` (port 0 picks one and rewrites the config), start
/// a gateway from `config`, and run 100 DOMAIN connects plus 100 resolves.
pub async fn run_dns_leak_test(config: &GatewayConfig) -> Result<LeakReport, HarnessError> {
    let trap_addr: SocketAddr = config
        .host_resolver
        .as_deref()
        .ok_or_else(|| HarnessError::Precondition("leak test needs host_resolver".into()))?
        .parse()
        .map_err(|e| HarnessError::Precondition(format!("host_resolver: {e}")))?;
    let mut names: HashMap<String, Ipv4Addr> = HashMap::new();
    for i in 0..LEAK_TEST_COUNT {
        names.insert(connect_name(i), Ipv4Addr::LOCALHOST);
        names.insert(resolve_name(i), Ipv4Addr::LOCALHOST);
    }
    let trap = TrapResolver::start(trap_addr, names.clone())
        .await
        .map_err(|e| HarnessError::TrapBind(trap_addr, e))?;

    let mut spec = TopologySpec::relays(config.path_length.max(3)).with_server(ServerKind::Echo);
    spec.exit_hosts.extend(names);
    let mut net = spawn_testnet(&spec).await?;
    let echo_port = net.server(ServerKind::Echo).expect("spawned").local_addr().port();
    let mut gw_config = config.clone();
    gw_config.host_resolver = Some(trap.local_addr().to_string());
    let gateway = net.add_gateway(gw_config).await?;
    let proxy = gateway.local_addr();

    let mut connects_ok = 0;
    for i in 0..LEAK_TEST_COUNT {
        let target = TargetAddr::Domain(connect_name(i), echo_port);
        let ok = async {
            let mut s = connect_via(proxy, &target).await.ok()?;
            s.write_all(PROBE).await.ok()?;
            s.shutdown().await.ok()?;
            let mut back = Vec::new();
            s.read_to_end(&mut back).await.ok()?;
            (back == PROBE).then_some(())
        };
        if ok.await.is_some() {
            connects_ok += 1;
        }
    }
    let mut resolves_ok = 0;
    for i in 0..LEAK_TEST_COUNT {
        if gateway.resolve(&resolve_name(i)).await.is_ok() {
            resolves_ok += 1;
        }
    }
    tokio::time::sleep(SETTLE).await;
    let mut report = LeakReport::new(config.mode, config.leaky_mode, trap.hits());
    report.connects_attempted = LEAK_TEST_COUNT;
    report.connects_ok = connects_ok;
    report.resolves_attempted = LEAK_TEST_COUNT;
    report.resolves_ok = resolves_ok;
    Ok(report)
}
