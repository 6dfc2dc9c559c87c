use std::io;
use std::pin::Pin;
use std::task::{Context, Poll};

use tokio::io::{AsyncRead, AsyncWrite, DuplexStream, ReadBuf};

/// Ordered, reliable byte stream carried over a circuit.
///
/// Shutting down the write side sends END(done) to the exit, which
/// half-closes the destination socket; reads return EOF once the destination
/// has closed its side.
#[derive(Debug)]
pub struct CircuitStream {
    stream_id: u16,
    inner: DuplexStream,
}

impl CircuitStream {
    pub(super) fn new(stream_id: u16, inner: DuplexStream) -> Self {
        CircuitStream { stream_id, inner }
    }

    pub fn stream_id(&self) -> u16 {
        self.stream_id
    }
}

impl AsyncRead for CircuitStream {
    fn poll_read(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut ReadBuf<'_>,
    ) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_read(cx, buf)
    }
}

impl AsyncWrite for CircuitStream {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<io::Result<usize>> {
        Pin::new(&mut self.inner).poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}
