//! Cell transport over TCP.
//!
//! A link is a TCP connection carrying back-to-back 512-octet cells. Writes go
//! through a dedicated task so several circuits can share one connection; an
//! optional token bucket caps the rate at which that task puts bytes on the
//! wire.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::sync::mpsc;

use crate::onion::{decode_cell, encode_cell, Cell, OnionError, CELL_LEN};

const WRITER_QUEUE: usize = 1024;

static NEXT_LINK_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque process-local handle for a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct LinkId(pub u64);

impl LinkId {
    pub fn fresh() -> Self {
        LinkId(NEXT_LINK_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("link i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("link closed mid-cell")]
    Truncated,
    #[error(transparent)]
    Cell(#[from] OnionError),
}

/// Token bucket over link bytes.
#[derive(Debug)]
pub struct Shaper {
    bytes_per_sec: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl Shaper {
    pub fn from_mbps(mbps: f64) -> Self {
        let bytes_per_sec = mbps * 1_000_000.0 / 8.0;
        let capacity = (4 * CELL_LEN) as f64;
        Shaper {
            bytes_per_sec,
            capacity,
            tokens: capacity,
            last: Instant::now(),
        }
    }

    /// How long the caller must wait before `n` bytes may go out.
    pub fn reserve(&mut self, n: usize, now: Instant) -> Duration {
        let elapsed = now.saturating_duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.bytes_per_sec).min(self.capacity);
        self.tokens -= n as f64;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.bytes_per_sec)
        }
    }
}

pub type CellSender = mpsc::Sender<Cell>;

/// Start the writer task for a link. Dropping every sender flushes and shuts
/// down the write half.
pub fn spawn_writer(write: OwnedWriteHalf, mut shaper: Option<Shaper>) -> CellSender {
    let (tx, mut rx) = mpsc::channel::<Cell>(WRITER_QUEUE);
    tokio::spawn(async move {
        let mut out = BufWriter::with_capacity(16 * CELL_LEN, write);
        'outer: while let Some(cell) = rx.recv().await {
            let mut next = Some(cell);
            while let Some(cell) = next.take() {
                let raw = match encode_cell(&cell) {
                    Ok(raw) => raw,
                    Err(e) => {
                        tracing::warn!("dropping unencodable cell: {e}");
                        continue;
                    }
                };
                if let Some(shaper) = shaper.as_mut() {
                    let wait = shaper.reserve(CELL_LEN, Instant::now());
                    if !wait.is_zero() {
                        if out.flush().await.is_err() {
                            break 'outer;
                        }
                        tokio::time::sleep(wait).await;
                    }
                }
                if out.write_all(&raw).await.is_err() {
                    break 'outer;
                }
                next = rx.try_recv().ok();
            }
            if out.flush().await.is_err() {
                break;
            }
        }
        let _ = out.flush().await;
        let _ = out.into_inner().shutdown().await;
    });
    tx
}

pub struct CellReader {
    inner: BufReader<OwnedReadHalf>,
}

impl CellReader {
    pub fn new(read: OwnedReadHalf) -> Self {
        CellReader {
            inner: BufReader::with_capacity(16 * CELL_LEN, read),
        }
    }

    /// Next cell, or `None` on a clean close at a cell boundary.
    pub async fn next(&mut self) -> Result<Option<Cell>, LinkError> {
        let mut raw = [0u8; CELL_LEN];
        let mut filled = 0;
        while filled < CELL_LEN {
            let n = self.inner.read(&mut raw[filled..]).await?;
            if n == 0 {
                return if filled == 0 {
                    Ok(None)
                } else {
                    Err(LinkError::Truncated)
                };
            }
            filled += n;
        }
        Ok(Some(decode_cell(&raw)?))
    }
}
