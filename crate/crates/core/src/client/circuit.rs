use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch, Semaphore};
use tokio::task::AbortHandle;

use super::stream::CircuitStream;
use super::CircuitError;
use crate::directory::RelayDescriptor;
use crate::dns::split_host_port;
use crate::link::{spawn_writer, CellReader, CellSender};
use crate::onion::message::{
    decode_extended, decode_resolved, encode_extend, max_forward_data, SENDME_INCREMENT,
    STREAM_WINDOW,
};
use crate::onion::{
    onion_wrap, unwrap_backward, Cell, CellCommand, ClientHandshake, DestroyReason, EndReason,
    RelayCommand, RelayMessage, SessionKey,
};

/// Per-step limit while waiting for CREATED or EXTENDED.
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const CONNECTED_TIMEOUT: Duration = Duration::from_secs(10);
pub const RESOLVE_TIMEOUT: Duration = Duration::from_secs(10);

const STREAM_BUFFER: usize = 64 * 1024;

/// Why a circuit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedReason {
    /// Torn down by this side.
    Local,
    /// The entry sent DESTROY.
    Destroyed(DestroyReason),
    /// A backward cell failed authentication here.
    Authentication,
    /// The entry link went away.
    LinkLost,
}

fn random_circuit_id() -> u32 {
    loop {
        let id: u32 = rand::thread_rng().gen();
        if id != 0 {
            return id;
        }
    }
}

fn build_error(hop: usize, reason: impl ToString) -> CircuitError {
    CircuitError::Build {
        hop,
        reason: reason.to_string(),
    }
}

/// Build a circuit along `path`: CREATE to the entry, then one EXTEND per
/// further hop, each wrapped in the layers of the hops already built.
pub async fn build_circuit(path: &[RelayDescriptor]) -> Result<CircuitHandle, CircuitError> {
    if !(super::MIN_PATH_LEN..=super::MAX_PATH_LEN).contains(&path.len()) {
        return Err(CircuitError::PathLength(path.len()));
    }
    let entry = &path[0];
    let stream = tokio::time::timeout(HANDSHAKE_TIMEOUT, TcpStream::connect(entry.address.as_str()))
        .await
        .map_err(|_| build_error(1, "connect timed out"))?
        .map_err(|e| build_error(1, e))?;
    let _ = stream.set_nodelay(true);
    let (read, write) = stream.into_split();
    let tx = spawn_writer(write, None);
    let mut reader = CellReader::new(read);
    let circuit_id = random_circuit_id();

    let mut keys: Vec<SessionKey> = Vec::with_capacity(path.len());
    let result = async {
        for (i, hop) in path.iter().enumerate() {
            let hop_no = i + 1;
            let (hs, blob) = ClientHandshake::start(hop.relay_id, hop.public_key);
            let cell = if i == 0 {
                Cell::new(circuit_id, CellCommand::Create, blob)
            } else {
                let body = encode_extend(&hop.address, &blob).map_err(|e| build_error(hop_no, e))?;
                let msg = RelayMessage::new(0, RelayCommand::Extend, body).encode();
                let wrapped = onion_wrap(&msg, keys.iter_mut().map(|k| &mut k.forward))
                    .map_err(|e| build_error(hop_no, e))?;
                Cell::new(circuit_id, CellCommand::Relay, wrapped)
            };
            tx.send(cell)
                .await
                .map_err(|_| build_error(hop_no, "entry link closed"))?;
            let reply = match tokio::time::timeout(HANDSHAKE_TIMEOUT, reader.next()).await {
                Err(_) => return Err(build_error(hop_no, "no reply within handshake timeout")),
                Ok(Err(e)) => return Err(build_error(hop_no, e)),
                Ok(Ok(None)) => return Err(build_error(hop_no, "entry link closed")),
                Ok(Ok(Some(cell))) => cell,
            };
            if reply.circuit_id != circuit_id {
                return Err(build_error(hop_no, "reply on unexpected circuit id"));
            }
            let created = match (i, reply.command) {
                (0, CellCommand::Created) => reply.payload,
                (_, CellCommand::Destroy) => {
                    let reason = DestroyReason::from_u8(reply.payload.first().copied().unwrap_or(0));
                    return Err(build_error(hop_no, format!("DESTROY ({reason:?})")));
                }
                (0, _) | (_, CellCommand::Created | CellCommand::Create) => {
                    return Err(build_error(hop_no, "unexpected cell"))
                }
                (_, CellCommand::Relay) => {
                    let (origin, raw) =
                        unwrap_backward(&reply.payload, keys.iter_mut().map(|k| &mut k.backward))
                            .map_err(|e| build_error(hop_no, e))?;
                    let msg = RelayMessage::decode(&raw).map_err(|e| build_error(hop_no, e))?;
                    if origin != i - 1 || msg.command != RelayCommand::Extended {
                        return Err(build_error(hop_no, "unexpected reply to EXTEND"));
                    }
                    match decode_extended(&msg.data).map_err(|e| build_error(hop_no, e))? {
                        Ok(created) => created,
                        Err(code) => {
                            return Err(build_error(
                                hop_no,
                                format!("extend failed ({:?})", DestroyReason::from_u8(code)),
                            ))
                        }
                    }
                }
            };
            keys.push(hs.finish(&created).map_err(|e| build_error(hop_no, e))?);
        }
        Ok(())
    }
    .await;
    if let Err(e) = result {
        let _ = tx.send(Cell::destroy(circuit_id, DestroyReason::HandshakeFailed)).await;
        return Err(e);
    }
    Ok(spawn_actor(path.to_vec(), keys, tx, reader, circuit_id))
}

pub(super) enum Event {
    Cell(Cell),
    LinkClosed,
    Open {
        destination: String,
        reply: oneshot::Sender<Result<(u16, CircuitStream), CircuitError>>,
    },
    Resolve {
        host: String,
        reply: oneshot::Sender<Result<Ipv4Addr, CircuitError>>,
    },
    Data(u16, Vec<u8>),
    End(u16, EndReason),
    Sendme(u16),
    Destroy,
    Retire,
    Keys(oneshot::Sender<Vec<SessionKey>>),
    StreamCount(oneshot::Sender<usize>),
}

pub(super) enum Down {
    Data(Vec<u8>),
    End(EndReason),
}

enum StreamState {
    Pending {
        reply: oneshot::Sender<Result<(u16, CircuitStream), CircuitError>>,
    },
    Open {
        down: mpsc::UnboundedSender<Down>,
        window: Arc<Semaphore>,
        tasks: [AbortHandle; 2],
        local_done: bool,
        remote_done: bool,
    },
    Resolving {
        host: String,
        reply: oneshot::Sender<Result<Ipv4Addr, CircuitError>>,
    },
}

impl StreamState {
    fn abort(self) {
        match self {
            StreamState::Pending { reply } => {
                let _ = reply.send(Err(CircuitError::CircuitClosed));
            }
            StreamState::Open { window, tasks, down, .. } => {
                let _ = down.send(Down::End(EndReason::Misc));
                window.close();
                for t in tasks {
                    t.abort();
                }
            }
            StreamState::Resolving { reply, .. } => {
                let _ = reply.send(Err(CircuitError::CircuitClosed));
            }
        }
    }
}

struct ClientActor {
    keys: Vec<SessionKey>,
    tx: CellSender,
    circuit_id: u32,
    streams: HashMap<u16, StreamState>,
    next_stream: u16,
    retiring: bool,
    inbox: mpsc::WeakUnboundedSender<Event>,
    closed: watch::Sender<Option<ClosedReason>>,
}

#[derive(PartialEq, Eq)]
enum Flow {
    Continue,
    Stop(ClosedReason),
}

fn spawn_actor(
    path: Vec<RelayDescriptor>,
    keys: Vec<SessionKey>,
    tx: CellSender,
    mut reader: CellReader,
    circuit_id: u32,
) -> CircuitHandle {
    let (inbox, mut rx) = mpsc::unbounded_channel();
    let (closed_tx, closed_rx) = watch::channel(None);
    let reader_inbox = inbox.clone();
    let reader_task = tokio::spawn(async move {
        loop {
            match reader.next().await {
                Ok(Some(cell)) => {
                    if reader_inbox.send(Event::Cell(cell)).is_err() {
                        return;
                    }
                }
                _ => {
                    let _ = reader_inbox.send(Event::LinkClosed);
                    return;
                }
            }
        }
    })
    .abort_handle();
    let mut actor = ClientActor {
        keys,
        tx,
        circuit_id,
        streams: HashMap::new(),
        next_stream: 1,
        retiring: false,
        inbox: inbox.downgrade(),
        closed: closed_tx,
    };
    tokio::spawn(async move {
        let reason = loop {
            let Some(event) = rx.recv().await else {
                break ClosedReason::Local;
            };
            if let Flow::Stop(reason) = actor.handle(event).await {
                break reason;
            }
        };
        for (_, s) in actor.streams.drain() {
            s.abort();
        }
        actor.closed.send_replace(Some(reason));
        reader_task.abort();
        // Remaining events get a closed reply when their senders are dropped.
        rx.close();
        while let Ok(event) = rx.try_recv() {
            reject(event);
        }
    });
    CircuitHandle {
        inbox,
        path: Arc::new(path),
        circuit_id,
        created_at: Instant::now(),
        closed: closed_rx,
    }
}

fn reject(event: Event) {
    match event {
        Event::Open { reply, .. } => {
            let _ = reply.send(Err(CircuitError::CircuitClosed));
        }
        Event::Resolve { reply, .. } => {
            let _ = reply.send(Err(CircuitError::CircuitClosed));
        }
        _ => {}
    }
}

impl ClientActor {
    fn hops(&self) -> usize {
        self.keys.len()
    }

    async fn handle(&mut self, event: Event) -> Flow {
        match event {
            Event::Cell(cell) => self.cell(cell).await,
            Event::LinkClosed => Flow::Stop(ClosedReason::LinkLost),
            Event::Open { destination, reply } => {
                if self.retiring {
                    let _ = reply.send(Err(CircuitError::Retiring));
                    return Flow::Continue;
                }
                let id = self.allocate_stream();
                self.streams.insert(id, StreamState::Pending { reply });
                self.send(RelayMessage::new(id, RelayCommand::Begin, destination.into_bytes()))
                    .await
            }
            Event::Resolve { host, reply } => {
                let id = self.allocate_stream();
                let msg = RelayMessage::new(id, RelayCommand::Resolve, host.clone().into_bytes());
                self.streams.insert(id, StreamState::Resolving { host, reply });
                self.send(msg).await
            }
            Event::Data(id, data) => {
                if !self.streams.contains_key(&id) {
                    return Flow::Continue;
                }
                self.send(RelayMessage::new(id, RelayCommand::Data, data)).await
            }
            Event::End(id, reason) => {
                let remove = match self.streams.get_mut(&id) {
                    Some(StreamState::Open {
                        local_done,
                        remote_done,
                        ..
                    }) => {
                        *local_done = true;
                        reason != EndReason::Done || *remote_done
                    }
                    _ => return Flow::Continue,
                };
                if remove {
                    if let Some(s) = self.streams.remove(&id) {
                        if reason != EndReason::Done {
                            s.abort();
                        }
                    }
                }
                if let Flow::Stop(r) = self.end_stream(id, reason).await {
                    return Flow::Stop(r);
                }
                self.maybe_retired().await
            }
            Event::Sendme(id) => {
                if !self.streams.contains_key(&id) {
                    return Flow::Continue;
                }
                self.send(RelayMessage::new(id, RelayCommand::Sendme, vec![])).await
            }
            Event::Destroy => {
                let _ = self
                    .tx
                    .send(Cell::destroy(self.circuit_id, DestroyReason::Requested))
                    .await;
                Flow::Stop(ClosedReason::Local)
            }
            Event::Retire => {
                self.retiring = true;
                self.maybe_retired().await
            }
            Event::Keys(reply) => {
                let _ = reply.send(self.keys.clone());
                Flow::Continue
            }
            Event::StreamCount(reply) => {
                let _ = reply.send(self.streams.len());
                Flow::Continue
            }
        }
    }

    fn allocate_stream(&mut self) -> u16 {
        loop {
            let id = self.next_stream;
            self.next_stream = self.next_stream.wrapping_add(1).max(1);
            if !self.streams.contains_key(&id) {
                return id;
            }
        }
    }

    async fn maybe_retired(&mut self) -> Flow {
        if self.retiring && self.streams.is_empty() {
            let _ = self
                .tx
                .send(Cell::destroy(self.circuit_id, DestroyReason::Finished))
                .await;
            return Flow::Stop(ClosedReason::Local);
        }
        Flow::Continue
    }

    async fn end_stream(&mut self, id: u16, reason: EndReason) -> Flow {
        self.send(RelayMessage::new(id, RelayCommand::End, vec![reason as u8]))
            .await
    }

    async fn send(&mut self, msg: RelayMessage) -> Flow {
        let body = match onion_wrap(&msg.encode(), self.keys.iter_mut().map(|k| &mut k.forward)) {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!("cannot wrap relay message: {e}");
                return self.destroy(DestroyReason::Internal, ClosedReason::Local).await;
            }
        };
        if self
            .tx
            .send(Cell::new(self.circuit_id, CellCommand::Relay, body))
            .await
            .is_err()
        {
            return Flow::Stop(ClosedReason::LinkLost);
        }
        Flow::Continue
    }

    async fn destroy(&mut self, reason: DestroyReason, closed: ClosedReason) -> Flow {
        let _ = self.tx.send(Cell::destroy(self.circuit_id, reason)).await;
        Flow::Stop(closed)
    }

    async fn cell(&mut self, cell: Cell) -> Flow {
        if cell.circuit_id != self.circuit_id {
            return Flow::Continue;
        }
        match cell.command {
            CellCommand::Destroy => {
                let reason = DestroyReason::from_u8(cell.payload.first().copied().unwrap_or(0));
                Flow::Stop(ClosedReason::Destroyed(reason))
            }
            CellCommand::Relay => {
                let (origin, raw) =
                    match unwrap_backward(&cell.payload, self.keys.iter_mut().map(|k| &mut k.backward)) {
                        Ok(v) => v,
                        Err(e) => {
                            tracing::debug!("backward cell rejected: {e}");
                            return self
                                .destroy(DestroyReason::AuthFailed, ClosedReason::Authentication)
                                .await;
                        }
                    };
                let msg = match RelayMessage::decode(&raw) {
                    Ok(m) if origin + 1 == self.hops() => m,
                    _ => {
                        return self
                            .destroy(DestroyReason::Protocol, ClosedReason::Local)
                            .await
                    }
                };
                self.message(msg).await
            }
            CellCommand::Create | CellCommand::Created => {
                self.destroy(DestroyReason::Protocol, ClosedReason::Local).await
            }
        }
    }

    async fn message(&mut self, msg: RelayMessage) -> Flow {
        let id = msg.stream_id;
        match msg.command {
            RelayCommand::Connected => match self.streams.remove(&id) {
                Some(StreamState::Pending { reply }) => {
                    let Some(inbox) = self.inbox.upgrade() else {
                        return Flow::Stop(ClosedReason::Local);
                    };
                    let (state, stream) = open_bridge(id, max_forward_data(self.hops()), inbox);
                    if reply.send(Ok((id, stream))).is_err() {
                        // Opener gave up; close the stream at the exit.
                        state.abort();
                        return self.end_stream(id, EndReason::Misc).await;
                    }
                    self.streams.insert(id, state);
                    Flow::Continue
                }
                Some(other) => {
                    self.streams.insert(id, other);
                    Flow::Continue
                }
                None => Flow::Continue,
            },
            RelayCommand::Data => {
                if let Some(StreamState::Open { down, .. }) = self.streams.get(&id) {
                    let _ = down.send(Down::Data(msg.data));
                }
                Flow::Continue
            }
            RelayCommand::End => {
                let reason = EndReason::from_payload(&msg.data);
                match self.streams.remove(&id) {
                    Some(StreamState::Pending { reply }) => {
                        let _ = reply.send(Err(CircuitError::StreamRefused(reason)));
                    }
                    Some(StreamState::Open {
                        down,
                        window,
                        tasks,
                        local_done,
                        remote_done: _,
                    }) => {
                        let _ = down.send(Down::End(reason));
                        if reason == EndReason::Done && !local_done {
                            self.streams.insert(
                                id,
                                StreamState::Open {
                                    down,
                                    window,
                                    tasks,
                                    local_done,
                                    remote_done: true,
                                },
                            );
                        } else if reason != EndReason::Done {
                            window.close();
                            tasks[0].abort();
                        }
                    }
                    Some(StreamState::Resolving { host, reply }) => {
                        let _ = reply.send(Err(CircuitError::Resolution { host, code: 0 }));
                    }
                    None => {}
                }
                self.maybe_retired().await
            }
            RelayCommand::Resolved => {
                match self.streams.remove(&id) {
                    Some(StreamState::Resolving { host, reply }) => {
                        let answer = match decode_resolved(&msg.data) {
                            Ok(Ok(ip)) => Ok(ip),
                            Ok(Err(code)) => Err(CircuitError::Resolution { host, code }),
                            Err(_) => Err(CircuitError::Resolution { host, code: 0 }),
                        };
                        let _ = reply.send(answer);
                    }
                    Some(other) => {
                        self.streams.insert(id, other);
                    }
                    None => {}
                }
                self.maybe_retired().await
            }
            RelayCommand::Sendme => {
                if let Some(StreamState::Open { window, .. }) = self.streams.get(&id) {
                    window.add_permits(SENDME_INCREMENT);
                }
                Flow::Continue
            }
            RelayCommand::Begin
            | RelayCommand::Extend
            | RelayCommand::Extended
            | RelayCommand::Resolve => {
                self.destroy(DestroyReason::Protocol, ClosedReason::Local).await
            }
        }
    }
}

/// Connect a fresh duplex pipe to the circuit: one task moves application
/// writes into DATA messages, the other moves DATA messages into the pipe.
fn open_bridge(
    id: u16,
    chunk: usize,
    inbox: mpsc::UnboundedSender<Event>,
) -> (StreamState, CircuitStream) {
    let (app, bridge) = tokio::io::duplex(STREAM_BUFFER);
    let (mut bridge_read, mut bridge_write) = tokio::io::split(bridge);
    let (down_tx, mut down_rx) = mpsc::unbounded_channel::<Down>();
    let window = Arc::new(Semaphore::new(STREAM_WINDOW));

    let up_inbox = inbox.clone();
    let up_window = window.clone();
    let upload = tokio::spawn(async move {
        let mut buf = vec![0u8; chunk];
        loop {
            match up_window.acquire().await {
                Ok(p) => p.forget(),
                Err(_) => return,
            }
            match bridge_read.read(&mut buf).await {
                Ok(0) => {
                    let _ = up_inbox.send(Event::End(id, EndReason::Done));
                    return;
                }
                Ok(n) => {
                    if up_inbox.send(Event::Data(id, buf[..n].to_vec())).is_err() {
                        return;
                    }
                }
                Err(_) => {
                    let _ = up_inbox.send(Event::End(id, EndReason::Misc));
                    return;
                }
            }
        }
    })
    .abort_handle();

    let download = tokio::spawn(async move {
        let mut received = 0usize;
        while let Some(d) = down_rx.recv().await {
            match d {
                Down::Data(data) => {
                    if bridge_write.write_all(&data).await.is_err() {
                        // Application dropped its end.
                        let _ = inbox.send(Event::End(id, EndReason::Misc));
                        return;
                    }
                    received += 1;
                    if received % SENDME_INCREMENT == 0 && inbox.send(Event::Sendme(id)).is_err() {
                        return;
                    }
                }
                Down::End(EndReason::Done) => {
                    let _ = bridge_write.shutdown().await;
                    return;
                }
                Down::End(_) => return,
            }
        }
    })
    .abort_handle();

    let state = StreamState::Open {
        down: down_tx,
        window,
        tasks: [upload, download],
        local_done: false,
        remote_done: false,
    };
    (state, CircuitStream::new(id, app))
}

/// Cloneable handle to a live circuit.
#[derive(Clone)]
pub struct CircuitHandle {
    inbox: mpsc::UnboundedSender<Event>,
    path: Arc<Vec<RelayDescriptor>>,
    circuit_id: u32,
    created_at: Instant,
    closed: watch::Receiver<Option<ClosedReason>>,
}

impl std::fmt::Debug for CircuitHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircuitHandle")
            .field("circuit_id", &self.circuit_id)
            .field(
                "path",
                &self.path.iter().map(|r| r.relay_id).collect::<Vec<_>>(),
            )
            .field("closed", &*self.closed.borrow())
            .finish()
    }
}

impl CircuitHandle {
    pub fn path(&self) -> &[RelayDescriptor] {
        &self.path
    }

    pub fn hop_count(&self) -> usize {
        self.path.len()
    }

    /// Circuit id on the entry link.
    pub fn circuit_id(&self) -> u32 {
        self.circuit_id
    }

    pub fn created_at(&self) -> Instant {
        self.created_at
    }

    pub fn is_closed(&self) -> bool {
        self.closed.borrow().is_some() || self.inbox.is_closed()
    }

    pub fn closed_reason(&self) -> Option<ClosedReason> {
        *self.closed.borrow()
    }

    /// Wait until the circuit is torn down.
    pub async fn closed(&self) -> ClosedReason {
        let mut rx = self.closed.clone();
        let reason = rx.wait_for(|r| r.is_some()).await.map(|r| *r);
        reason.ok().flatten().unwrap_or(ClosedReason::Local)
    }

    /// Open a stream to `destination` ("host:port"). The host part goes to the
    /// exit as written; nothing is resolved locally.
    pub async fn open_stream(&self, destination: &str) -> Result<CircuitStream, CircuitError> {
        if split_host_port(destination).is_none() {
            return Err(CircuitError::Destination(destination.to_string()));
        }
        let (reply, rx) = oneshot::channel();
        self.inbox
            .send(Event::Open {
                destination: destination.to_string(),
                reply,
            })
            .map_err(|_| CircuitError::CircuitClosed)?;
        // The stream id is only known once the actor answers, so a timed-out
        // open is cancelled by dropping the receiver: the actor then ends the
        // stream when CONNECTED arrives.
        match tokio::time::timeout(CONNECTED_TIMEOUT, rx).await {
            Ok(Ok(Ok((_, stream)))) => Ok(stream),
            Ok(Ok(Err(e))) => Err(e),
            Ok(Err(_)) => Err(CircuitError::CircuitClosed),
            Err(_) => Err(CircuitError::Timeout("CONNECTED")),
        }
    }

    /// Ask the exit to resolve `host`.
    pub async fn resolve(&self, host: &str) -> Result<Ipv4Addr, CircuitError> {
        let (reply, rx) = oneshot::channel();
        self.inbox
            .send(Event::Resolve {
                host: host.to_string(),
                reply,
            })
            .map_err(|_| CircuitError::CircuitClosed)?;
        match tokio::time::timeout(RESOLVE_TIMEOUT, rx).await {
            Ok(Ok(r)) => r,
            Ok(Err(_)) => Err(CircuitError::CircuitClosed),
            Err(_) => Err(CircuitError::Timeout("RESOLVED")),
        }
    }

    /// Tear the circuit down now.
    pub fn destroy(&self) {
        let _ = self.inbox.send(Event::Destroy);
    }

    /// Refuse new streams and tear down once existing ones finish.
    pub fn retire(&self) {
        let _ = self.inbox.send(Event::Retire);
    }

    /// The originator's per-hop keys, entry first.
    pub async fn session_keys(&self) -> Result<Vec<SessionKey>, CircuitError> {
        let (tx, rx) = oneshot::channel();
        self.inbox
            .send(Event::Keys(tx))
            .map_err(|_| CircuitError::CircuitClosed)?;
        rx.await.map_err(|_| CircuitError::CircuitClosed)
    }

    /// Streams and lookups currently in progress.
    pub async fn active_streams(&self) -> Result<usize, CircuitError> {
        let (tx, rx) = oneshot::channel();
        self.inbox
            .send(Event::StreamCount(tx))
            .map_err(|_| CircuitError::CircuitClosed)?;
        rx.await.map_err(|_| CircuitError::CircuitClosed)
    }
}
