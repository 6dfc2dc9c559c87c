//! Command-line front end. One binary, one subcommand per node type plus the
//! evaluation runs.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::directory::{all_roles, DirectoryClient, DirectoryServer, Role};
use crate::dns::Resolver;
use crate::gateway::{Gateway, GatewayConfig, Mode};
use crate::harness::leak::{run_dns_leak_test, Verdict};
use crate::harness::report::emit_report;
use crate::harness::servers::ServerKind;
use crate::harness::speed::{run_speed_suite, Direction, SpeedSuite, DEFAULT_REPETITIONS};
use crate::harness::testnet::{spawn_testnet, TopologySpec};
use crate::onion::IdentityKeypair;
use crate::relay::{Relay, RelayConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LEAK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "onionbox", version, about = "Desk-scale onion-routing network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the relay directory.
    Dir(DirArgs),
    /// Run a relay.
    Relay(RelayArgs),
    /// Run the SOCKS gateway.
    Gateway(GatewayArgs),
    /// Start a local testnet and report its addresses.
    Testnet(TestnetArgs),
    /// Measure throughput through a fresh local testnet.
    Speedtest(SpeedtestArgs),
    /// Check a gateway configuration for DNS leaks. Exits 3 on LEAK.
    Leaktest(LeaktestArgs),
    /// Write a new relay identity keypair.
    Keygen(KeygenArgs),
}

#[derive(Debug, Args)]
pub struct DirArgs {
    #[arg(long, default_value = "127.0.0.1:9030")]
    pub listen: SocketAddr,
}

#[derive(Debug, Args)]
pub struct RelayArgs {
    #[arg(long, default_value = "127.0.0.1:9001")]
    pub listen: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:9030")]
    pub directory: String,
    /// Comma-separated subset of entry,middle,exit.
    #[arg(long, value_delimiter = ',', default_value = "entry,middle,exit")]
    pub roles: Vec<Role>,
    /// Hex identity file; a fresh keypair is used when absent.
    #[arg(long)]
    pub identity: Option<PathBuf>,
    /// Address to publish instead of --listen.
    #[arg(long)]
    pub advertise: Option<String>,
    #[arg(long, conflicts_with = "dns")]
    pub hosts_file: Option<PathBuf>,
    #[arg(long)]
    pub dns: Option<SocketAddr>,
    /// Cap outgoing link rate, megabits/s.
    #[arg(long)]
    pub shape_mbps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub directory: Option<String>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub path_length: Option<usize>,
    #[arg(long)]
    pub host_resolver: Option<String>,
    /// Resolve names locally as well. Test use only.
    #[arg(long)]
    pub leaky: bool,
}

#[derive(Debug, Args)]
pub struct TestnetArgs {
    #[arg(long, default_value_t = 3)]
    pub relays: usize,
    #[arg(long, default_value_t = 0)]
    pub directory_port: u16,
    /// Also start an echo, sink and source server.
    #[arg(long)]
    pub servers: bool,
    /// Start a gateway against the testnet.
    #[arg(long)]
    pub gateway: bool,
    /// Keep running until interrupted.
    #[arg(long)]
    pub hold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Download,
    Upload,
    Both,
}

#[derive(Debug, Args)]
pub struct SpeedtestArgs {
    /// Measure DIRECT as well as ONION.
    #[arg(long)]
    pub both_modes: bool,
    /// Bytes per transfer; accepts K, M, G, KiB, MiB, GiB suffixes.
    #[arg(long, value_parser = parse_size, default_value = "16MiB")]
    pub size: u64,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    pub reps: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 3)]
    pub path_length: usize,
    /// Relays in the testnet; defaults to the path length.
    #[arg(long)]
    pub relays: Option<usize>,
    /// Shape the first relay's links to this many megabits/s.
    #[arg(long)]
    pub shape_mbps: Option<f64>,
    /// Output directory for samples.csv, summary.json and histogram.txt.
    #[arg(long, default_value = "speedtest-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LeaktestArgs {
    /// Gateway JSON configuration to test.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// Byte count with an optional decimal or binary suffix.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, suffix) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("invalid size {s:?}"))?;
    let mult: u64 = match suffix.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" => 1_000,
        "m" | "mb" => 1_000_000,
        "g" | "gb" => 1_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        other => return Err(format!("unknown size suffix {other:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size {s:?} overflows"))
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CliError(String);

fn err(e: impl std::fmt::Display) -> CliError {
    CliError(e.to_string())
}

/// Parse `argv`, run the subcommand, return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    match runtime.block_on(dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

async fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Dir(a) => dir(a).await,
        Command::Relay(a) => relay(a).await,
        Command::Gateway(a) => gateway(a).await,
        Command::Testnet(a) => testnet(a).await,
        Command::Speedtest(a) => speedtest(a).await,
        Command::Leaktest(a) => leaktest(a).await,
        Command::Keygen(a) => keygen(a),
    }
}

async fn wait_for_interrupt() -> Result<(), CliError> {
    tokio::signal::ctrl_c().await.map_err(err)
}

async fn dir(a: DirArgs) -> Result<i32, CliError> {
    let server = DirectoryServer::bind(a.listen).await.map_err(err)?;
    tracing::info!("directory listening on {}", server.local_addr());
    wait_for_interrupt().await?;
    server.shutdown();
    Ok(EXIT_OK)
}

async fn relay(a: RelayArgs) -> Result<i32, CliError> {
    let identity = match &a.identity {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
            IdentityKeypair::from_hex(&text).map_err(|e| err(format!("{}: {e}", path.display())))?
        }
        None => IdentityKeypair::generate(),
    };
    let mut config = RelayConfig::new(a.listen, identity);
    config.roles = if a.roles.is_empty() {
        all_roles()
    } else {
        a.roles.iter().copied().collect::<BTreeSet<_>>()
    };
    config.directory = Some(DirectoryClient::new(a.directory));
    config.advertise = a.advertise;
    config.shape_mbps = a.shape_mbps;
    if let Some(path) = &a.hosts_file {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        config.resolver = Resolver::parse_hosts(&text).map_err(|e| err(format!("{}: {e}", path.display())))?;
    } else if let Some(server) = a.dns {
        config.resolver = Resolver::Dns(server);
    }
    let relay = Relay::start(config).await.map_err(err)?;
    tracing::info!("relay {} listening on {}", relay.relay_id(), relay.local_addr());
    wait_for_interrupt().await?;
    relay.shutdown();
    Ok(EXIT_OK)
}

fn gateway_config(a: &GatewayArgs) -> Result<GatewayConfig, CliError> {
    let mut config = match &a.config {
        Some(path) => GatewayConfig::from_file(path).map_err(err)?,
        None => GatewayConfig::default(),
    };
    if let Some(v) = &a.listen {
        config.listen_addr = v.clone();
    }
    if let Some(v) = &a.directory {
        config.directory_addr = v.clone();
    }
    if let Some(v) = a.mode {
        config.mode = v;
    }
    if let Some(v) = a.path_length {
        config.path_length = v;
    }
    if let Some(v) = &a.host_resolver {
        config.host_resolver = Some(v.clone());
    }
    if a.leaky {
        config.leaky_mode = true;
    }
    config.validate().map_err(err)?;
    Ok(config)
}

async fn gateway(a: GatewayArgs) -> Result<i32, CliError> {
    let config = gateway_config(&a)?;
    let gw = Gateway::start(config).await.map_err(err)?;
    tracing::info!("gateway ({}) listening on {}", gw.mode(), gw.local_addr());
    wait_for_interrupt().await?;
    gw.shutdown();
    Ok(EXIT_OK)
}

async fn testnet(a: TestnetArgs) -> Result<i32, CliError> {
    if a.relays == 0 {
        return Err(err("--relays must be at least 1"));
    }
    let mut spec = TopologySpec::relays(a.relays);
    spec.directory_port = a.directory_port;
    if a.servers {
        spec = spec
            .with_server(ServerKind::Echo)
            .with_server(ServerKind::Sink)
            .with_server(ServerKind::Source);
    }
    if a.gateway {
        spec = spec.with_gateway(GatewayConfig {
            listen_addr: "127.0.0.1:0".into(),
            path_length: a.relays.min(3),
            ..Default::default()
        });
    }
    let mut net = spawn_testnet(&spec).await.map_err(err)?;
    let summary = serde_json::json!({
        "directory": net.directory_addr().to_string(),
        "relays": net.relays.iter().map(|r| serde_json::json!({
            "id": r.relay_id().to_string(),
            "addr": r.local_addr().to_string(),
        })).collect::<Vec<_>>(),
        "servers": net.servers.iter().map(|s| serde_json::json!({
            "kind": format!("{:?}", s.kind()).to_ascii_lowercase(),
            "addr": s.local_addr().to_string(),
        })).collect::<Vec<_>>(),
        "gateways": net.gateways.iter().map(|g| g.local_addr().to_string()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(err)?);
    // Confirm the directory sees every relay before reporting success.
    let listed = net.directory_client().list(None).await.map_err(err)?;
    if listed.relays.len() != a.relays {
        return Err(err(format!(
            "directory lists {} relays, expected {}",
            listed.relays.len(),
            a.relays
        )));
    }
    if a.hold {
        wait_for_interrupt().await?;
    }
    net.shutdown();
    Ok(EXIT_OK)
}

async fn speedtest(a: SpeedtestArgs) -> Result<i32, CliError> {
    let directions = match a.direction {
        DirectionArg::Download => vec![Direction::Download],
        DirectionArg::Upload => vec![Direction::Upload],
        DirectionArg::Both => vec![Direction::Download, Direction::Upload],
    };
    let modes = if a.both_modes {
        vec![Mode::Onion, Mode::Direct]
    } else {
        vec![Mode::Onion]
    };
    let suite = SpeedSuite {
        relays: a.relays.unwrap_or(a.path_length),
        path_length: a.path_length,
        size: a.size,
        repetitions: a.reps,
        directions,
        modes,
        shape_first_relay: a.shape_mbps,
    };
    let report = run_speed_suite(&suite).await.map_err(err)?;
    let files = emit_report(&report, &a.out, true).map_err(err)?;
    for s in &report.summaries {
        println!(
            "{:<6} {:<8} n={:<3} mean {:>9.2} Mb/s  min {:>9.2}  max {:>9.2}",
            s.mode.to_string(),
            s.direction.to_string(),
            s.count,
            s.mean,
            s.min,
            s.max
        );
    }
    for (direction, ratio) in &report.overhead_ratio {
        println!("overhead {direction}: DIRECT/ONION = {ratio:.2}");
    }
    if report.failures > 0 {
        println!("failed transfers: {}", report.failures);
    }
    println!("wrote {} and {}", files.csv.display(), files.json.display());
    if report.samples.is_empty() {
        return Err(err("every transfer failed"));
    }
    Ok(EXIT_OK)
}

async fn leaktest(a: LeaktestArgs) -> Result<i32, CliError> {
    let mut config = GatewayConfig::from_file(&a.config).map_err(err)?;
    if config.host_resolver.is_none() {
        config.host_resolver = Some("127.0.0.1:0".into());
    }
    config.validate().map_err(err)?;
    let report = run_dns_leak_test(&config).await.map_err(err)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(err)?);
    eprintln!("verdict: {} ({} trap hits)", report.verdict, report.trap_hits.len());
    Ok(match report.verdict {
        Verdict::NoLeak => EXIT_OK,
        Verdict::Leak => EXIT_LEAK,
    })
}

fn keygen(a: KeygenArgs) -> Result<i32, CliError> {
    use std::io::Write;
    let pair = IdentityKeypair::generate();
    let mut file = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&a.out)
        .map_err(|e| err(format!("{}: {e}", a.out.display())))?;
    writeln!(file, "{}", pair.to_hex()).map_err(err)?;
    println!("{}", pair.relay_id());
    Ok(EXIT_OK)
}
