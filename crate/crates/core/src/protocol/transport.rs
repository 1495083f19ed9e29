use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::protocol::message::{encode_message, read_message, ProtocolMessage};

/// A bidirectional, framed, ordered byte stream.
pub trait Connection: Send {
    /// Writes raw bytes; used by `send` and by fault-injection tests.
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()>;

    /// Blocks for at most `timeout` waiting for one complete frame.
    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage>;

    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.send_bytes(&encode_message(msg))
    }
}

/// In-process transport: two channels carrying byte chunks. Dropping one
/// end reads as end-of-stream on the other.
pub struct ChannelConnection {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
    deadline: Option<Instant>,
}

pub fn channel_pair() -> (ChannelConnection, ChannelConnection) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    let end = |tx, rx| ChannelConnection {
        tx,
        rx,
        buf: Vec::new(),
        pos: 0,
        deadline: None,
    };
    (end(a_tx, b_rx), end(b_tx, a_rx))
}

impl Read for ChannelConnection {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.buf.len() {
            let wait = self
                .deadline
                .map_or(Duration::MAX, |d| d.saturating_duration_since(Instant::now()));
            match self.rx.recv_timeout(wait) {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(RecvTimeoutError::Timeout) => return Err(io::ErrorKind::TimedOut.into()),
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Connection for ChannelConnection {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.tx
            .send(bytes.to_vec())
            .map_err(|_| Error::Io(io::ErrorKind::BrokenPipe.into()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage> {
        self.deadline = Some(Instant::now() + timeout);
        read_message(self)
    }
}

pub struct TcpConnection {
    stream: TcpStream,
}

impl TcpConnection {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self> {
        Self::new(TcpStream::connect_timeout(&addr, timeout)?)
    }
}

impl Connection for TcpConnection {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<ProtocolMessage> {
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        read_message(&mut self.stream)
    }
}

/// Accepts exactly `count` connections before `timeout` elapses.
pub fn accept_all(listener: &TcpListener, count: usize, timeout: Duration) -> Result<Vec<TcpConnection>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut conns = Vec::with_capacity(count);
    while conns.len() < count {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                conns.push(TcpConnection::new(stream)?);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "{} of {count} clients connected",
                        conns.len()
                    )));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(conns)
}
