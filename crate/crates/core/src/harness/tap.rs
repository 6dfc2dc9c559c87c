//! A forwarding TCP proxy placed in front of a relay. It sees exactly what a
//! passive observer of that link would see, checks that every frame is a
//! well-formed cell, and can flip a bit in a passing RELAY cell.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};

use crate::onion::{decode_cell, CellCommand, CELL_LEN};
use crate::tasks::TaskTracker;

/// Frames kept for inspection per tap.
const FRAME_LOG_LIMIT: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TapDirection {
    /// Toward the tapped relay.
    Inbound,
    /// Away from the tapped relay.
    Outbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameRecord {
    pub direction: TapDirection,
    pub circuit_id: u32,
    pub command: u8,
    pub payload_len: u16,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TapCounters {
    pub connections: u64,
    pub inbound_frames: u64,
    pub outbound_frames: u64,
    /// Frames that were not valid cells.
    pub bad_frames: u64,
    /// Bytes left over when a connection closed mid-frame.
    pub trailing_bytes: u64,
    pub tampered: u64,
}

#[derive(Default)]
struct TapState {
    connections: AtomicU64,
    inbound: AtomicU64,
    outbound: AtomicU64,
    bad: AtomicU64,
    trailing: AtomicU64,
    tampered: AtomicU64,
    arm_inbound: AtomicBool,
    arm_outbound: AtomicBool,
    frames: Mutex<Vec<FrameRecord>>,
}

pub struct TapProxy {
    addr: SocketAddr,
    target: SocketAddr,
    state: Arc<TapState>,
    tasks: TaskTracker,
}

impl TapProxy {
    pub async fn start(listen: SocketAddr, target: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(TapState::default());
        let tasks = TaskTracker::default();
        let (s, t) = (state.clone(), tasks.clone());
        tasks.spawn(async move {
            loop {
                let Ok((client, _)) = listener.accept().await else {
                    continue;
                };
                let (s, t2) = (s.clone(), t.clone());
                t.spawn(async move {
                    let Ok(server) = TcpStream::connect(target).await else {
                        return;
                    };
                    s.connections.fetch_add(1, Ordering::Relaxed);
                    let _ = client.set_nodelay(true);
                    let _ = server.set_nodelay(true);
                    let (cr, cw) = client.into_split();
                    let (sr, sw) = server.into_split();
                    t2.spawn(pump(cr, sw, s.clone(), TapDirection::Inbound));
                    t2.spawn(pump(sr, cw, s, TapDirection::Outbound));
                });
            }
        });
        Ok(TapProxy {
            addr,
            target,
            state,
            tasks,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn target(&self) -> SocketAddr {
        self.target
    }

    pub fn counters(&self) -> TapCounters {
        let s = &self.state;
        TapCounters {
            connections: s.connections.load(Ordering::Relaxed),
            inbound_frames: s.inbound.load(Ordering::Relaxed),
            outbound_frames: s.outbound.load(Ordering::Relaxed),
            bad_frames: s.bad.load(Ordering::Relaxed),
            trailing_bytes: s.trailing.load(Ordering::Relaxed),
            tampered: s.tampered.load(Ordering::Relaxed),
        }
    }

    /// Headers of forwarded frames, oldest first (bounded).
    pub fn frames(&self) -> Vec<FrameRecord> {
        self.state.frames.lock().expect("frame log poisoned").clone()
    }

    /// Flip one ciphertext bit in the next RELAY cell going `direction`.
    pub fn arm_tamper(&self, direction: TapDirection) {
        match direction {
            TapDirection::Inbound => self.state.arm_inbound.store(true, Ordering::SeqCst),
            TapDirection::Outbound => self.state.arm_outbound.store(true, Ordering::SeqCst),
        }
    }

    pub fn shutdown(&self) {
        self.tasks.abort_all();
    }
}

impl Drop for TapProxy {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn pump(mut from: OwnedReadHalf, mut to: OwnedWriteHalf, state: Arc<TapState>, dir: TapDirection) {
    let (counter, armed) = match dir {
        TapDirection::Inbound => (&state.inbound, &state.arm_inbound),
        TapDirection::Outbound => (&state.outbound, &state.arm_outbound),
    };
    let mut frame = [0u8; CELL_LEN];
    loop {
        let mut filled = 0;
        while filled < CELL_LEN {
            match from.read(&mut frame[filled..]).await {
                Ok(0) | Err(_) => {
                    if filled > 0 {
                        state.trailing.fetch_add(filled as u64, Ordering::Relaxed);
                        let _ = to.write_all(&frame[..filled]).await;
                    }
                    let _ = to.shutdown().await;
                    return;
                }
                Ok(n) => filled += n,
            }
        }
        counter.fetch_add(1, Ordering::Relaxed);
        match decode_cell(&frame) {
            Ok(cell) => {
                let mut log = state.frames.lock().expect("frame log poisoned");
                if log.len() < FRAME_LOG_LIMIT {
                    log.push(FrameRecord {
                        direction: dir,
                        circuit_id: cell.circuit_id,
                        command: cell.command as u8,
                        payload_len: cell.payload.len() as u16,
                    });
                }
                drop(log);
                if cell.command == CellCommand::Relay
                    && !cell.payload.is_empty()
                    && armed.swap(false, Ordering::SeqCst)
                {
                    // Payload starts at offset 7; flip a bit in its first octet.
                    frame[7] ^= 0x01;
                    state.tampered.fetch_add(1, Ordering::Relaxed);
                }
            }
            Err(_) => {
                state.bad.fetch_add(1, Ordering::Relaxed);
            }
        }
        if to.write_all(&frame).await.is_err() {
            return;
        }
    }
}
