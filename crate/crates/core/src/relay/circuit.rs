use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::Arc;

use rand::Rng;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};

use super::exit::{ExitEvent, ExitStream};
use super::{CircuitInspection, LinkRef, RelayCircuitState, RelayShared, EXTEND_TIMEOUT};
use crate::link::{spawn_writer, CellReader, CellSender, LinkId};
use crate::onion::message::{decode_extend, encode_extended};
use crate::onion::{
    Cell, CellCommand, DestroyReason, LayerFlag, RelayCommand, RelayMessage, SessionKey,
    CELL_PAYLOAD_LEN,
};

pub(crate) enum CircuitEvent {
    FromPrev(Cell),
    FromNext(Cell),
    PrevClosed,
    NextClosed,
    /// A new CREATE reused this circuit id on the previous link.
    Superseded,
    ExtendDone(Result<NextHop, u8>),
    Exit(ExitEvent),
    Inspect(oneshot::Sender<CircuitInspection>),
}

pub(crate) struct NextHop {
    tx: CellSender,
    link: LinkRef,
    created: Vec<u8>,
}

#[derive(Debug, PartialEq, Eq)]
pub(super) enum Flow {
    Continue,
    Stop,
}

pub(super) struct CircuitActor {
    pub(super) shared: Arc<RelayShared>,
    pub(super) state: RelayCircuitState,
    pub(super) prev_tx: CellSender,
    pub(super) next_tx: Option<CellSender>,
    pub(super) extending: bool,
    pub(super) streams: HashMap<u16, ExitStream>,
    pub(super) inbox: mpsc::WeakUnboundedSender<CircuitEvent>,
}

pub(super) fn spawn(
    shared: Arc<RelayShared>,
    prev: LinkRef,
    prev_tx: CellSender,
    session: SessionKey,
) -> mpsc::UnboundedSender<CircuitEvent> {
    let (tx, rx) = mpsc::unbounded_channel();
    let serial = shared.register_circuit(tx.clone());
    let actor = CircuitActor {
        shared: shared.clone(),
        state: RelayCircuitState {
            prev_link: prev,
            next_link: None,
            session,
        },
        prev_tx,
        next_tx: None,
        extending: false,
        streams: HashMap::new(),
        inbox: tx.downgrade(),
    };
    shared.tasks.spawn(actor.run(rx, serial));
    tx
}

impl CircuitActor {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<CircuitEvent>, serial: u64) {
        while let Some(event) = rx.recv().await {
            if self.handle(event).await == Flow::Stop {
                break;
            }
        }
        for (_, stream) in self.streams.drain() {
            stream.abort();
        }
        self.shared.unregister_circuit(serial);
    }

    async fn handle(&mut self, event: CircuitEvent) -> Flow {
        match event {
            CircuitEvent::FromPrev(cell) => match cell.command {
                CellCommand::Relay => self.forward(cell.payload).await,
                CellCommand::Destroy => {
                    let reason = cell.payload.first().copied().unwrap_or(0);
                    self.destroy_next(DestroyReason::from_u8(reason)).await;
                    Flow::Stop
                }
                _ => self.destroy_both(DestroyReason::Protocol).await,
            },
            CircuitEvent::FromNext(cell) => match cell.command {
                CellCommand::Relay => self.backward(cell.payload).await,
                CellCommand::Destroy => {
                    let reason = cell.payload.first().copied().unwrap_or(0);
                    self.next_tx = None;
                    let _ = self
                        .send_prev(Cell::destroy(
                            self.state.prev_link.circuit_id,
                            DestroyReason::from_u8(reason),
                        ))
                        .await;
                    Flow::Stop
                }
                _ => self.destroy_both(DestroyReason::Protocol).await,
            },
            CircuitEvent::PrevClosed => {
                self.destroy_next(DestroyReason::ConnectFailed).await;
                Flow::Stop
            }
            CircuitEvent::NextClosed => {
                self.next_tx = None;
                self.destroy_both(DestroyReason::ConnectFailed).await
            }
            CircuitEvent::Superseded => {
                self.destroy_next(DestroyReason::Requested).await;
                Flow::Stop
            }
            CircuitEvent::ExtendDone(result) => self.extend_done(result).await,
            CircuitEvent::Exit(event) => self.exit_event(event).await,
            CircuitEvent::Inspect(reply) => {
                let _ = reply.send(CircuitInspection {
                    state: self.state.clone(),
                    exit_streams: self.stream_infos(),
                });
                Flow::Continue
            }
        }
    }

    async fn send_prev(&mut self, cell: Cell) -> Flow {
        if self.prev_tx.send(cell).await.is_err() {
            self.destroy_next(DestroyReason::ConnectFailed).await;
            return Flow::Stop;
        }
        Flow::Continue
    }

    pub(super) async fn destroy_next(&mut self, reason: DestroyReason) {
        if let (Some(tx), Some(next)) = (self.next_tx.take(), self.state.next_link) {
            let _ = tx.send(Cell::destroy(next.circuit_id, reason)).await;
        }
    }

    pub(super) async fn destroy_both(&mut self, reason: DestroyReason) -> Flow {
        let _ = self
            .prev_tx
            .send(Cell::destroy(self.state.prev_link.circuit_id, reason))
            .await;
        self.destroy_next(reason).await;
        Flow::Stop
    }

    /// Seal a message originated here and send it toward the originator.
    pub(super) async fn reply(&mut self, msg: RelayMessage) -> Flow {
        let body = match self
            .state
            .session
            .backward
            .seal(LayerFlag::Deliver, &msg.encode())
        {
            Ok(b) => b,
            Err(_) => return self.destroy_both(DestroyReason::Internal).await,
        };
        let cell = Cell::new(self.state.prev_link.circuit_id, CellCommand::Relay, body);
        self.send_prev(cell).await
    }

    async fn forward(&mut self, payload: Vec<u8>) -> Flow {
        let layer = match self.state.session.forward.open(&payload) {
            Ok(layer) => layer,
            Err(e) => {
                tracing::debug!("forward layer rejected: {e}");
                return self.destroy_both(DestroyReason::AuthFailed).await;
            }
        };
        match layer.flag {
            LayerFlag::Forward => match (&self.next_tx, self.state.next_link) {
                (Some(tx), Some(next)) => {
                    let cell = Cell::new(next.circuit_id, CellCommand::Relay, layer.body);
                    if tx.send(cell).await.is_err() {
                        self.next_tx = None;
                        return self.destroy_both(DestroyReason::ConnectFailed).await;
                    }
                    Flow::Continue
                }
                _ => self.destroy_both(DestroyReason::Protocol).await,
            },
            LayerFlag::Deliver => match RelayMessage::decode(&layer.body) {
                Ok(msg) => self.deliver(msg).await,
                Err(_) => self.destroy_both(DestroyReason::Protocol).await,
            },
        }
    }

    async fn backward(&mut self, payload: Vec<u8>) -> Flow {
        let body = match self.state.session.backward.seal(LayerFlag::Forward, &payload) {
            Ok(b) if b.len() <= CELL_PAYLOAD_LEN => b,
            _ => return self.destroy_both(DestroyReason::Protocol).await,
        };
        let cell = Cell::new(self.state.prev_link.circuit_id, CellCommand::Relay, body);
        self.send_prev(cell).await
    }

    async fn deliver(&mut self, msg: RelayMessage) -> Flow {
        match msg.command {
            RelayCommand::Extend => self.extend(msg.data).await,
            RelayCommand::Begin => self.begin(msg.stream_id, msg.data).await,
            RelayCommand::Data => self.data(msg.stream_id, msg.data).await,
            RelayCommand::End => self.end(msg.stream_id, msg.data).await,
            RelayCommand::Resolve => self.resolve(msg.stream_id, msg.data).await,
            RelayCommand::Sendme => self.sendme(msg.stream_id),
            RelayCommand::Extended | RelayCommand::Resolved | RelayCommand::Connected => {
                self.destroy_both(DestroyReason::Protocol).await
            }
        }
    }

    async fn extend(&mut self, data: Vec<u8>) -> Flow {
        if self.next_tx.is_some() || self.extending {
            return self.destroy_both(DestroyReason::Protocol).await;
        }
        let (target, blob) = match decode_extend(&data) {
            Ok(v) => v,
            Err(_) => return self.destroy_both(DestroyReason::Protocol).await,
        };
        let Some(inbox) = self.inbox.upgrade() else {
            return Flow::Stop;
        };
        self.extending = true;
        let shaper = self.shared.shaper();
        let timeout = self.shared.connect_timeout;
        self.shared.tasks.spawn(async move {
            let setup = async {
                let stream = tokio::time::timeout(timeout, TcpStream::connect(target.as_str()))
                    .await
                    .map_err(|_| DestroyReason::ConnectFailed as u8)?
                    .map_err(|_| DestroyReason::ConnectFailed as u8)?;
                let _ = stream.set_nodelay(true);
                let (read, write) = stream.into_split();
                let tx = spawn_writer(write, shaper);
                let mut reader = CellReader::new(read);
                let circuit_id = loop {
                    let id: u32 = rand::thread_rng().gen();
                    if id != 0 {
                        break id;
                    }
                };
                tx.send(Cell::new(circuit_id, CellCommand::Create, blob))
                    .await
                    .map_err(|_| DestroyReason::ConnectFailed as u8)?;
                let first = tokio::time::timeout(EXTEND_TIMEOUT, reader.next())
                    .await
                    .map_err(|_| DestroyReason::HandshakeFailed as u8)?;
                match first {
                    Ok(Some(cell))
                        if cell.command == CellCommand::Created && cell.circuit_id == circuit_id =>
                    {
                        let next = NextHop {
                            tx,
                            link: LinkRef {
                                link: LinkId::fresh(),
                                circuit_id,
                            },
                            created: cell.payload,
                        };
                        Ok((next, reader))
                    }
                    _ => Err(DestroyReason::HandshakeFailed as u8),
                }
            };
            match setup.await {
                Ok((next, mut reader)) => {
                    if inbox.send(CircuitEvent::ExtendDone(Ok(next))).is_err() {
                        return;
                    }
                    loop {
                        match reader.next().await {
                            Ok(Some(cell)) => {
                                if inbox.send(CircuitEvent::FromNext(cell)).is_err() {
                                    return;
                                }
                            }
                            _ => {
                                let _ = inbox.send(CircuitEvent::NextClosed);
                                return;
                            }
                        }
                    }
                }
                Err(code) => {
                    let _ = inbox.send(CircuitEvent::ExtendDone(Err(code)));
                }
            }
        });
        Flow::Continue
    }

    async fn extend_done(&mut self, result: Result<NextHop, u8>) -> Flow {
        self.extending = false;
        let body = match result {
            Ok(next) => {
                self.next_tx = Some(next.tx);
                self.state.next_link = Some(next.link);
                encode_extended(Ok(&next.created))
            }
            Err(code) => encode_extended(Err(code)),
        };
        self.reply(RelayMessage::new(0, RelayCommand::Extended, body))
            .await
    }

    async fn resolve(&mut self, stream_id: u16, data: Vec<u8>) -> Flow {
        let Some(inbox) = self.inbox.upgrade() else {
            return Flow::Stop;
        };
        let resolver = self.shared.resolver.clone();
        self.shared.tasks.spawn(async move {
            let answer: Option<Ipv4Addr> = match std::str::from_utf8(&data) {
                Ok(host) => resolver.resolve(host).await,
                Err(_) => None,
            };
            let _ = inbox.send(CircuitEvent::Exit(ExitEvent::Resolved { stream_id, answer }));
        });
        Flow::Continue
    }
}
