//! Exit streams: plain TCP connections opened on behalf of the originator.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Semaphore};
use tokio::task::AbortHandle;

use super::circuit::{CircuitActor, CircuitEvent, Flow};
use super::ExitStreamInfo;
use crate::dns::{split_host_port, Resolver};
use crate::onion::message::{encode_resolved, MAX_BACKWARD_DATA, SENDME_INCREMENT, STREAM_WINDOW};
use crate::onion::{EndReason, RelayCommand, RelayMessage};

pub(crate) enum ExitEvent {
    Connected {
        stream_id: u16,
        writer: mpsc::UnboundedSender<Vec<u8>>,
    },
    ConnectFailed {
        stream_id: u16,
        reason: EndReason,
    },
    Data {
        stream_id: u16,
        data: Vec<u8>,
    },
    Eof {
        stream_id: u16,
    },
    Failed {
        stream_id: u16,
    },
    /// Another SENDME_INCREMENT cells reached the destination socket.
    Written {
        stream_id: u16,
    },
    Resolved {
        stream_id: u16,
        answer: Option<Ipv4Addr>,
    },
}

pub(super) struct ExitStream {
    destination: String,
    writer: Option<mpsc::UnboundedSender<Vec<u8>>>,
    window: Arc<Semaphore>,
    task: AbortHandle,
    connected: bool,
    /// Destination closed its side and END(done) went back.
    local_done: bool,
    /// Originator sent END(done).
    remote_done: bool,
}

impl ExitStream {
    pub(super) fn abort(self) {
        self.window.close();
        self.task.abort();
    }
}

fn end(stream_id: u16, reason: EndReason) -> RelayMessage {
    RelayMessage::new(stream_id, RelayCommand::End, vec![reason as u8])
}

impl CircuitActor {
    pub(super) fn stream_infos(&self) -> Vec<ExitStreamInfo> {
        self.streams
            .iter()
            .map(|(&stream_id, s)| ExitStreamInfo {
                stream_id,
                destination: s.destination.clone(),
            })
            .collect()
    }

    pub(super) async fn begin(&mut self, stream_id: u16, data: Vec<u8>) -> Flow {
        if let Some(old) = self.streams.remove(&stream_id) {
            old.abort();
            return self.reply(end(stream_id, EndReason::Protocol)).await;
        }
        let destination = match String::from_utf8(data) {
            Ok(d) => d,
            Err(_) => return self.reply(end(stream_id, EndReason::Protocol)).await,
        };
        let Some((host, port)) = split_host_port(&destination).map(|(h, p)| (h.to_string(), p))
        else {
            return self.reply(end(stream_id, EndReason::Protocol)).await;
        };
        let Some(inbox) = self.inbox.upgrade() else {
            return Flow::Stop;
        };
        let window = Arc::new(Semaphore::new(STREAM_WINDOW));
        let task = self.shared.tasks.spawn(run_exit_stream(
            stream_id,
            host,
            port,
            self.shared.resolver.clone(),
            self.shared.connect_timeout,
            window.clone(),
            inbox,
        ));
        self.streams.insert(
            stream_id,
            ExitStream {
                destination,
                writer: None,
                window,
                task,
                connected: false,
                local_done: false,
                remote_done: false,
            },
        );
        Flow::Continue
    }

    pub(super) async fn data(&mut self, stream_id: u16, data: Vec<u8>) -> Flow {
        let delivered = match self.streams.get(&stream_id) {
            Some(ExitStream {
                writer: Some(w), ..
            }) => w.send(data).is_ok(),
            Some(_) => {
                // DATA before CONNECTED or after END.
                if let Some(s) = self.streams.remove(&stream_id) {
                    s.abort();
                }
                return self.reply(end(stream_id, EndReason::Protocol)).await;
            }
            None => return self.reply(end(stream_id, EndReason::UnknownStream)).await,
        };
        if !delivered {
            if let Some(s) = self.streams.remove(&stream_id) {
                s.abort();
            }
            return self.reply(end(stream_id, EndReason::Io)).await;
        }
        Flow::Continue
    }

    pub(super) async fn end(&mut self, stream_id: u16, data: Vec<u8>) -> Flow {
        let reason = EndReason::from_payload(&data);
        if reason != EndReason::Done {
            if let Some(s) = self.streams.remove(&stream_id) {
                s.abort();
            }
            return Flow::Continue;
        }
        if let Some(s) = self.streams.get_mut(&stream_id) {
            s.remote_done = true;
            // Dropping the writer half-closes the destination socket once
            // queued data is flushed.
            s.writer = None;
            if s.local_done {
                self.streams.remove(&stream_id);
            }
        }
        Flow::Continue
    }

    pub(super) fn sendme(&mut self, stream_id: u16) -> Flow {
        if let Some(s) = self.streams.get(&stream_id) {
            s.window.add_permits(SENDME_INCREMENT);
        }
        Flow::Continue
    }

    pub(super) async fn exit_event(&mut self, event: ExitEvent) -> Flow {
        match event {
            ExitEvent::Connected { stream_id, writer } => {
                let Some(s) = self.streams.get_mut(&stream_id) else {
                    return Flow::Continue;
                };
                s.connected = true;
                if !s.remote_done {
                    s.writer = Some(writer);
                }
                self.reply(RelayMessage::new(stream_id, RelayCommand::Connected, vec![]))
                    .await
            }
            ExitEvent::ConnectFailed { stream_id, reason } => {
                if self.streams.remove(&stream_id).is_none() {
                    return Flow::Continue;
                }
                self.reply(end(stream_id, reason)).await
            }
            ExitEvent::Data { stream_id, data } => {
                if !self.streams.contains_key(&stream_id) {
                    return Flow::Continue;
                }
                self.reply(RelayMessage::new(stream_id, RelayCommand::Data, data))
                    .await
            }
            ExitEvent::Eof { stream_id } => {
                let Some(s) = self.streams.get_mut(&stream_id) else {
                    return Flow::Continue;
                };
                s.local_done = true;
                if s.remote_done {
                    self.streams.remove(&stream_id);
                }
                self.reply(end(stream_id, EndReason::Done)).await
            }
            ExitEvent::Failed { stream_id } => {
                let Some(s) = self.streams.remove(&stream_id) else {
                    return Flow::Continue;
                };
                s.abort();
                self.reply(end(stream_id, EndReason::Io)).await
            }
            ExitEvent::Written { stream_id } => {
                if !self.streams.contains_key(&stream_id) {
                    return Flow::Continue;
                }
                self.reply(RelayMessage::new(stream_id, RelayCommand::Sendme, vec![]))
                    .await
            }
            ExitEvent::Resolved { stream_id, answer } => {
                self.reply(RelayMessage::new(
                    stream_id,
                    RelayCommand::Resolved,
                    encode_resolved(answer),
                ))
                .await
            }
        }
    }
}

async fn run_exit_stream(
    stream_id: u16,
    host: String,
    port: u16,
    resolver: Resolver,
    connect_timeout: Duration,
    window: Arc<Semaphore>,
    inbox: mpsc::UnboundedSender<CircuitEvent>,
) {
    let send = |event: ExitEvent| inbox.send(CircuitEvent::Exit(event)).is_ok();
    let Some(ip) = resolver.resolve(&host).await else {
        send(ExitEvent::ConnectFailed {
            stream_id,
            reason: EndReason::ResolveFailed,
        });
        return;
    };
    let addr = SocketAddr::from((ip, port));
    let stream = match tokio::time::timeout(connect_timeout, TcpStream::connect(addr)).await {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            let reason = if e.kind() == std::io::ErrorKind::ConnectionRefused {
                EndReason::ConnectRefused
            } else {
                EndReason::Misc
            };
            send(ExitEvent::ConnectFailed { stream_id, reason });
            return;
        }
        Err(_) => {
            send(ExitEvent::ConnectFailed {
                stream_id,
                reason: EndReason::Timeout,
            });
            return;
        }
    };
    let _ = stream.set_nodelay(true);
    let (mut read, mut write) = stream.into_split();
    let (wtx, mut wrx) = mpsc::unbounded_channel::<Vec<u8>>();
    if !send(ExitEvent::Connected {
        stream_id,
        writer: wtx,
    }) {
        return;
    }

    let upstream = async {
        let mut written = 0usize;
        while let Some(buf) = wrx.recv().await {
            if write.write_all(&buf).await.is_err() {
                send(ExitEvent::Failed { stream_id });
                return;
            }
            written += 1;
            if written % SENDME_INCREMENT == 0 && !send(ExitEvent::Written { stream_id }) {
                return;
            }
        }
        let _ = write.shutdown().await;
    };
    let downstream = async {
        let mut buf = vec![0u8; MAX_BACKWARD_DATA];
        loop {
            match window.acquire().await {
                Ok(permit) => permit.forget(),
                Err(_) => return,
            }
            match read.read(&mut buf).await {
                Ok(0) => {
                    send(ExitEvent::Eof { stream_id });
                    return;
                }
                Ok(n) => {
                    if !send(ExitEvent::Data {
                        stream_id,
                        data: buf[..n].to_vec(),
                    }) {
                        return;
                    }
                }
                Err(_) => {
                    send(ExitEvent::Failed { stream_id });
                    return;
                }
            }
        }
    };
    tokio::join!(upstream, downstream);
}
