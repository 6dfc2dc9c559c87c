//! Upload and download throughput through a gateway.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use super::servers::ServerKind;
use super::testnet::{spawn_testnet, TopologySpec};
use super::HarnessError;
use crate::gateway::socks::{connect_via, TargetAddr};
use crate::gateway::{GatewayConfig, Mode};

pub const MIB: u64 = 1024 * 1024;
pub const DEFAULT_SIZE: u64 = 16 * MIB;
pub const DEFAULT_REPETITIONS: usize = 10;
pub const MIN_SIZE: u64 = MIB;
pub const MIN_REPETITIONS: usize = 5;
/// Histogram bucket width in Mb/s.
pub const BUCKET_MBPS: f64 = 0.5;
const TRANSFER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Download,
    Upload,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Download => "DOWNLOAD",
            Direction::Upload => "UPLOAD",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "download" => Ok(Direction::Download),
            "upload" => Ok(Direction::Upload),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

/// Megabits per second.
pub fn mbps(bytes: u64, elapsed: f64) -> f64 {
    bytes as f64 * 8.0 / elapsed / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub mode: Mode,
    pub direction: Direction,
    pub bytes: u64,
    /// Seconds.
    pub elapsed: f64,
    pub mbps: f64,
}

impl ThroughputSample {
    pub fn new(mode: Mode, direction: Direction, bytes: u64, elapsed: f64) -> Self {
        ThroughputSample {
            mode,
            direction,
            bytes,
            elapsed,
            mbps: mbps(bytes, elapsed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Non-empty 0.5 Mb/s buckets in ascending order.
pub fn histogram(values: &[f64]) -> Vec<HistogramBucket> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry((v / BUCKET_MBPS).floor().max(0.0) as u64).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(i, count)| HistogramBucket {
            lower: i as f64 * BUCKET_MBPS,
            upper: (i + 1) as f64 * BUCKET_MBPS,
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub direction: Direction,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<HistogramBucket>,
}

impl Summary {
    pub fn of(mode: Mode, direction: Direction, values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Summary {
            mode,
            direction,
            count: values.len(),
            mean,
            min,
            max,
            histogram: histogram(values),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub samples: Vec<ThroughputSample>,
    /// Transfers that failed and were left out of `samples`.
    pub failures: usize,
    pub summaries: Vec<Summary>,
    /// mean(DIRECT) / mean(ONION), per direction where both were measured.
    pub overhead_ratio: BTreeMap<Direction, f64>,
}

impl SpeedReport {
    pub fn from_samples(samples: Vec<ThroughputSample>, failures: usize) -> Self {
        let mut groups: BTreeMap<(Direction, u8), (Mode, Vec<f64>)> = BTreeMap::new();
        for s in &samples {
            let key = (s.direction, s.mode as u8);
            groups.entry(key).or_insert_with(|| (s.mode, Vec::new())).1.push(s.mbps);
        }
        let summaries: Vec<Summary> = groups
            .iter()
            .filter_map(|(&(direction, _), (mode, values))| Summary::of(*mode, direction, values))
            .collect();
        let mut overhead_ratio = BTreeMap::new();
        for direction in [Direction::Download, Direction::Upload] {
            let mean = |mode: Mode| {
                summaries
                    .iter()
                    .find(|s| s.mode == mode && s.direction == direction)
                    .map(|s| s.mean)
            };
            if let (Some(direct), Some(onion)) = (mean(Mode::Direct), mean(Mode::Onion)) {
                overhead_ratio.insert(direction, direct / onion);
            }
        }
        SpeedReport {
            samples,
            failures,
            summaries,
            overhead_ratio,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = SpeedReport>) -> Self {
        let mut samples = Vec::new();
        let mut failures = 0;
        for r in reports {
            samples.extend(r.samples);
            failures += r.failures;
        }
        Self::from_samples(samples, failures)
    }

    pub fn summary(&self, mode: Mode, direction: Direction) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.mode == mode && s.direction == direction)
    }

    pub fn total_bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.bytes).sum()
    }
}

/// Where to send speed-test traffic.
#[derive(Debug, Clone, Copy)]
pub struct SpeedTarget {
    /// SOCKS address of the gateway.
    pub proxy: SocketAddr,
    /// Recorded on each sample.
    pub mode: Mode,
    pub sink: SocketAddr,
    pub source: SocketAddr,
}

async fn download(proxy: SocketAddr, source: SocketAddr, size: u64) -> Result<f64, String> {
    let target = TargetAddr::Ipv4(
        match source.ip() {
            std::net::IpAddr::V4(ip) => ip,
            std::net::IpAddr::V6(_) => return Err("IPv6 source".into()),
        },
        source.port(),
    );
    let mut s = connect_via(proxy, &target).await.map_err(|e| e.to_string())?;
    let start = Instant::now();
    s.write_u64(size).await.map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; 64 * 1024];
    let mut got = 0u64;
    while got < size {
        let n = s.read(&mut buf).await.map_err(|e| e.to_string())?;
        if n == 0 {
            break;
        }
        got += n as u64;
    }
    let elapsed = start.elapsed().as_secs_f64();
    if got != size {
        return Err(format!("received {got} of {size} bytes"));
    }
    Ok(elapsed)
}

async fn upload(proxy: SocketAddr, sink: SocketAddr, size: u64) -> Result<f64, String> {
    let target = TargetAddr::Ipv4(
        match sink.ip() {
            std::net::IpAddr::V4(ip) => ip,
            std::net::IpAddr::V6(_) => return Err("IPv6 sink".into()),
        },
        sink.port(),
    );
    let mut s = connect_via(proxy, &target).await.map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; 64 * 1024];
    rand::thread_rng().fill_bytes(&mut buf);
    let start = Instant::now();
    s.write_u64(size).await.map_err(|e| e.to_string())?;
    let mut sent = 0u64;
    while sent < size {
        let n = (size - sent).min(buf.len() as u64) as usize;
        s.write_all(&buf[..n]).await.map_err(|e| e.to_string())?;
        sent += n as u64;
    }
    let acked = s.read_u64().await.map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    if acked != size {
        return Err(format!("sink acknowledged {acked} of {size} bytes"));
    }
    Ok(elapsed)
}

/// Transfer `size` bytes `repetitions` times. Timing runs from the first
/// byte written to the last byte received (download) or the sink's
/// acknowledgement (upload).
pub async fn run_speed_test(
    target: &SpeedTarget,
    direction: Direction,
    size: u64,
    repetitions: usize,
) -> Result<SpeedReport, HarnessError> {
    if size < MIN_SIZE {
        return Err(HarnessError::Precondition(format!(
            "transfer size must be at least {MIN_SIZE} bytes"
        )));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(HarnessError::Precondition(format!(
            "need at least {MIN_REPETITIONS} repetitions"
        )));
    }
    let mut samples = Vec::new();
    let mut failures = 0;
    for rep in 0..repetitions {
        let fut = async {
            match direction {
                Direction::Download => download(target.proxy, target.source, size).await,
                Direction::Upload => upload(target.proxy, target.sink, size).await,
            }
        };
        match tokio::time::timeout(TRANSFER_TIMEOUT, fut).await {
            Ok(Ok(elapsed)) => samples.push(ThroughputSample::new(target.mode, direction, size, elapsed)),
            Ok(Err(e)) => {
                tracing::warn!("{} {direction} repetition {rep} failed: {e}", target.mode);
                failures += 1;
            }
            Err(_) => {
                tracing::warn!("{} {direction} repetition {rep} timed out", target.mode);
                failures += 1;
            }
        }
    }
    Ok(SpeedReport::from_samples(samples, failures))
}

/// Parameters for a self-contained speed run.
#[derive(Debug, Clone)]
pub struct SpeedSuite {
    pub relays: usize,
    pub path_length: usize,
    pub size: u64,
    pub repetitions: usize,
    pub directions: Vec<Direction>,
    pub modes: Vec<Mode>,
    /// Shape relay 0 to this many Mb/s.
    pub shape_first_relay: Option<f64>,
}

impl Default for SpeedSuite {
    fn default() -> Self {
        SpeedSuite {
            relays: 3,
            path_length: 3,
            size: DEFAULT_SIZE,
            repetitions: DEFAULT_REPETITIONS,
            directions: vec![Direction::Download, Direction::Upload],
            modes: vec![Mode::Onion],
            shape_first_relay: None,
        }
    }
}

/// Spawn a testnet with a sink, a source and one gateway per mode, then
/// measure every (mode, direction) pair.
pub async fn run_speed_suite(suite: &SpeedSuite) -> Result<SpeedReport, HarnessError> {
    let mut spec = TopologySpec::relays(suite.relays.max(suite.path_length))
        .with_server(ServerKind::Sink)
        .with_server(ServerKind::Source);
    if let (Some(mbps), Some(first)) = (suite.shape_first_relay, spec.relays.first_mut()) {
        first.shape_mbps = Some(mbps);
    }
    let mut net = spawn_testnet(&spec).await?;
    let sink = net.server(ServerKind::Sink).expect("spawned").local_addr();
    let source = net.server(ServerKind::Source).expect("spawned").local_addr();
    let mut reports = Vec::new();
    for &mode in &suite.modes {
        let config = GatewayConfig {
            listen_addr: "127.0.0.1:0".into(),
            path_length: suite.path_length,
            mode,
            ..Default::default()
        };
        let proxy = net.add_gateway(config).await?.local_addr();
        let target = SpeedTarget {
            proxy,
            mode,
            sink,
            source,
        };
        for &direction in &suite.directions {
            reports.push(run_speed_test(&target, direction, suite.size, suite.repetitions).await?);
        }
    }
    Ok(SpeedReport::merge(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_arithmetic() {
        let s = Summary::of(Mode::Onion, Direction::Download, &[1.0, 1.5, 2.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max), (1.5, 1.0, 2.0));
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 3);
        assert!(Summary::of(Mode::Onion, Direction::Download, &[]).is_none());
    }

    #[test]
    fn throughput_units() {
        // 1 MB in one second is 8 Mb/s.
        assert_eq!(mbps(1_000_000, 1.0), 8.0);
        let s = ThroughputSample::new(Mode::Direct, Direction::Upload, 2 * MIB, 2.0);
        assert!((s.mbps - 8.388608).abs() < 1e-9);
    }

    #[test]
    fn histogram_buckets() {
        let h = histogram(&[0.1, 0.49, 0.5, 1.7, 1.74, 8.3]);
        let got: Vec<_> = h.iter().map(|b| (b.lower, b.count)).collect();
        assert_eq!(got, vec![(0.0, 2), (0.5, 1), (1.5, 2), (8.0, 1)]);
        for b in &h {
            assert_eq!(b.upper - b.lower, BUCKET_MBPS);
        }
    }

    #[test]
    fn overhead_ratio_per_direction() {
        let samples = vec![
            ThroughputSample { mode: Mode::Onion, direction: Direction::Download, bytes: 1, elapsed: 1.0, mbps: 1.7 },
            ThroughputSample { mode: Mode::Direct, direction: Direction::Download, bytes: 1, elapsed: 1.0, mbps: 8.3 },
            ThroughputSample { mode: Mode::Onion, direction: Direction::Upload, bytes: 1, elapsed: 1.0, mbps: 2.0 },
        ];
        let r = SpeedReport::from_samples(samples, 1);
        assert!((r.overhead_ratio[&Direction::Download] - 8.3 / 1.7).abs() < 1e-12);
        assert!(!r.overhead_ratio.contains_key(&Direction::Upload));
        assert_eq!(r.summaries.len(), 3);
        assert_eq!(r.failures, 1);
    }
}
