//! Measurement harness: in-process testnets, destination servers, link taps,
//! a DNS trap, and the speed and leak tests.

pub mod leak;
pub mod report;
pub mod servers;
pub mod speed;
pub mod tap;
pub mod testnet;
pub mod trap;

use std::net::SocketAddr;

pub use leak::{run_dns_leak_test, LeakReport, Verdict};
pub use report::emit_report;
pub use speed::{run_speed_suite, run_speed_test, Direction, SpeedReport, SpeedSuite, ThroughputSample};
pub use testnet::{spawn_testnet, SpawnError, Testnet, TopologySpec};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error("trap resolver bind {0}: {1}")]
    TrapBind(SocketAddr, std::io::Error),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
