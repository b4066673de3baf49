//! TCP transport: length-prefixed frames over std threads.
//!
//! A served broker is driven by one loop thread that owns the sans-IO
//! [`Broker`]; connection readers hand it decoded frames over a channel and
//! it writes outputs back to the sockets. Brokers dial the link peers whose
//! id sorts after their own and accept the rest.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::broker::{Broker, BrokerConfig, BrokerError, Input, Peer, Tick};
use crate::client::Client;
use crate::graph::FlowGraph;
use crate::log::{FileStorage, MemStorage, Storage};
use crate::wire::{self, Frame, Role, WireError};

/// Wall-clock length of one broker tick.
pub const TICK: Duration = Duration::from_millis(10);

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("connection closed")]
    Closed,
    #[error("timed out {0}")]
    Timeout(&'static str),
}

/// Reads whole frames from a byte stream, keeping partial input across
/// read timeouts.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, buf: Vec::new() }
    }

    /// `Ok(None)` on a read timeout; `Err(Closed)` at end of stream. An
    /// undecodable frame is returned as `Ok(Some(Err(_)))` and skipped.
    pub fn next(&mut self) -> Result<Option<Result<Frame, WireError>>, NetError> {
        loop {
            match wire::decode(&self.buf) {
                Ok(Some((frame, used))) => {
                    self.buf.drain(..used);
                    return Ok(Some(frame));
                }
                Ok(None) => {}
                // A bad length prefix leaves no way to resynchronise.
                Err(e) => return Err(e.into()),
            }
            let mut chunk = [0u8; 16 * 1024];
            match self.inner.read(&mut chunk) {
                Ok(0) => return Err(NetError::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&wire::encode(frame))
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub id: String,
    pub listen: String,
    pub graph: FlowGraph,
    /// Durable logs go to `<data_dir>/<id>`; without it everything is in memory.
    pub data_dir: Option<PathBuf>,
    /// Addresses of neighbouring brokers, by id.
    pub peers: BTreeMap<String, String>,
}

enum Msg {
    Opened { peer: Peer, conn: u64, writer: TcpStream },
    Frame { conn: u64, from: Peer, frame: Result<Frame, WireError> },
    Closed { conn: u64, peer: Peer },
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    main: Option<JoinHandle<Result<(), NetError>>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the broker loop ends (it only ends on error or shutdown).
    pub fn wait(mut self) -> Result<(), NetError> {
        let r = self.main.take().expect("joined once").join().unwrap_or(Err(NetError::Closed));
        self.stop.store(true, Ordering::SeqCst);
        r
    }

    pub fn shutdown(mut self) -> Result<(), NetError> {
        self.stop.store(true, Ordering::SeqCst);
        let r = self.main.take().expect("joined once").join().unwrap_or(Err(NetError::Closed));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        r
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn reader_loop(mut r: FrameReader<TcpStream>, conn: u64, peer: Peer, tx: Sender<Msg>, stop: Arc<AtomicBool>) {
    let _ = r.inner.set_read_timeout(Some(Duration::from_millis(50)));
    while !stop.load(Ordering::SeqCst) {
        match r.next() {
            Ok(Some(frame)) => {
                if tx.send(Msg::Frame { conn, from: peer.clone(), frame }).is_err() {
                    return;
                }
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
    let _ = tx.send(Msg::Closed { conn, peer });
}

/// Waits for the CONNECT that opens every inbound connection. The reader
/// keeps whatever arrived behind it.
fn handshake(stream: TcpStream, stop: &AtomicBool) -> Option<(Peer, Frame, FrameReader<TcpStream>)> {
    stream.set_read_timeout(Some(Duration::from_millis(50))).ok()?;
    let mut r = FrameReader::new(stream);
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline && !stop.load(Ordering::SeqCst) {
        match r.next() {
            Ok(Some(Ok(f @ Frame::Connect { .. }))) => {
                let Frame::Connect { id, role } = &f else { unreachable!() };
                let peer = match role {
                    Role::Broker => Peer::Broker(id.clone()),
                    Role::Client => Peer::Client(id.clone()),
                };
                return Some((peer, f, r));
            }
            Ok(None) => {}
            _ => return None,
        }
    }
    None
}

/// Binds, recovers the broker from its data directory and starts serving.
pub fn serve(cfg: ServeConfig) -> Result<Server, NetError> {
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let storage: Box<dyn Storage> = match &cfg.data_dir {
        Some(d) => Box::new(FileStorage::new(d.join(&cfg.id))?),
        None => Box::new(MemStorage::default()),
    };
    let mut broker = Broker::start(BrokerConfig::new(cfg.id.clone(), cfg.graph.clone()), storage)?;
    let stop = Arc::new(AtomicBool::new(false));
    let next_conn = Arc::new(AtomicU64::new(1));
    let (tx, rx) = mpsc::channel::<Msg>();
    let mut threads = Vec::new();

    {
        let (tx, stop, next_conn) = (tx.clone(), stop.clone(), next_conn.clone());
        threads.push(thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let (tx, stop, conn) = (tx.clone(), stop.clone(), next_conn.fetch_add(1, Ordering::SeqCst));
                        thread::spawn(move || {
                            let Ok(writer) = stream.try_clone() else { return };
                            let Some((peer, hello, reader)) = handshake(stream, &stop) else { return };
                            let _ = tx.send(Msg::Opened { peer: peer.clone(), conn, writer });
                            if matches!(peer, Peer::Client(_)) {
                                let _ = tx.send(Msg::Frame { conn, from: peer.clone(), frame: Ok(hello) });
                            }
                            reader_loop(reader, conn, peer, tx, stop);
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            }
        }));
    }

    let neighbours: Vec<String> = cfg.graph.neighbors(&cfg.id).map(str::to_string).collect();
    for peer in neighbours.into_iter().filter(|p| p.as_str() > cfg.id.as_str()) {
        let Some(target) = cfg.peers.get(&peer).cloned() else { continue };
        let (tx, stop, next_conn, me) = (tx.clone(), stop.clone(), next_conn.clone(), cfg.id.clone());
        threads.push(thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let addr = target.to_socket_addrs().ok().and_then(|mut a| a.next());
                if let Some(stream) = addr.and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(1)).ok()) {
                    let _ = stream.set_nodelay(true);
                    let hello = Frame::Connect { id: me.clone(), role: Role::Broker };
                    let opened = (&stream).write_all(&wire::encode(&hello)).is_ok();
                    if let (true, Ok(writer)) = (opened, stream.try_clone()) {
                        let conn = next_conn.fetch_add(1, Ordering::SeqCst);
                        let p = Peer::Broker(peer.clone());
                        if tx.send(Msg::Opened { peer: p.clone(), conn, writer }).is_err() {
                            return;
                        }
                        reader_loop(FrameReader::new(stream), conn, p, tx.clone(), stop.clone());
                    }
                }
                thread::sleep(Duration::from_millis(200));
            }
        }));
    }
    drop(tx);

    let loop_stop = stop.clone();
    let main = thread::spawn(move || broker_loop(&mut broker, rx, loop_stop));
    Ok(Server { addr, stop, threads, main: Some(main) })
}

fn broker_loop(broker: &mut Broker, rx: Receiver<Msg>, stop: Arc<AtomicBool>) -> Result<(), NetError> {
    let start = Instant::now();
    let now = || (start.elapsed().as_millis() / TICK.as_millis()) as Tick;
    let mut writers: HashMap<Peer, (u64, TcpStream)> = HashMap::new();
    let flush = |writers: &mut HashMap<Peer, (u64, TcpStream)>, outs: Vec<crate::broker::Output>| -> Vec<Peer> {
        let mut failed = Vec::new();
        for o in outs {
            if let Some((_, w)) = writers.get_mut(&o.to) {
                if write_frame(w, &o.frame).is_err() {
                    failed.push(o.to.clone());
                }
            }
        }
        failed
    };
    while !stop.load(Ordering::SeqCst) {
        let wait = match broker.next_deadline() {
            Some(d) => TICK * (d.saturating_sub(now()) as u32).clamp(0, 5),
            None => TICK * 5,
        };
        let mut outs = Vec::new();
        match rx.recv_timeout(wait) {
            Ok(Msg::Opened { peer, conn, writer }) => {
                if let Some((_, old)) = writers.insert(peer.clone(), (conn, writer)) {
                    let _ = old.shutdown(Shutdown::Both);
                }
                if let Peer::Broker(_) = peer {
                    outs.extend(broker.handle(now(), Input::LinkUp(peer)));
                }
            }
            Ok(Msg::Frame { conn, from, frame }) => {
                if writers.get(&from).is_some_and(|(c, _)| *c == conn) {
                    let input = match frame {
                        Ok(frame) => Input::Frame { from, frame },
                        Err(error) => Input::Undecodable { from, error },
                    };
                    outs.extend(broker.handle(now(), input));
                }
            }
            Ok(Msg::Closed { conn, peer }) => {
                if writers.get(&peer).is_some_and(|(c, _)| *c == conn) {
                    writers.remove(&peer);
                    outs.extend(broker.handle(now(), Input::LinkDown(peer)));
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if broker.next_deadline().is_some_and(|d| d <= now()) {
            outs.extend(broker.handle(now(), Input::Tick));
        }
        for peer in flush(&mut writers, outs) {
            if let Some((_, w)) = writers.remove(&peer) {
                let _ = w.shutdown(Shutdown::Both);
            }
            let outs = broker.handle(now(), Input::LinkDown(peer));
            flush(&mut writers, outs);
        }
    }
    for (_, (_, w)) in writers {
        let _ = w.shutdown(Shutdown::Both);
    }
    Ok(())
}

/// A client session over TCP, driving the sans-IO [`Client`].
pub struct Session {
    pub client: Client,
    stream: TcpStream,
    reader: FrameReader<TcpStream>,
    start: Instant,
}

impl Session {
    pub fn connect(addr: &str, id: &str) -> Result<Session, NetError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(TICK * 5))?;
        let reader = FrameReader::new(stream.try_clone()?);
        let mut s = Session { client: Client::new(id), stream, reader, start: Instant::now() };
        let hello = s.client.connect(s.now());
        s.send_all(&hello)?;
        Ok(s)
    }

    pub fn now(&self) -> Tick {
        (self.start.elapsed().as_millis() / TICK.as_millis()) as Tick
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), NetError> {
        Ok(write_frame(&mut self.stream, frame)?)
    }

    fn send_all(&mut self, frames: &[Frame]) -> Result<(), NetError> {
        for f in frames {
            self.send(f)?;
        }
        Ok(())
    }

    /// Handles whatever arrives within one short read timeout, plus timers.
    /// Returns the frames received.
    pub fn pump(&mut self) -> Result<Vec<Frame>, NetError> {
        let mut got = Vec::new();
        if let Some(f) = self.reader.next()? {
            let f = f?;
            let replies = self.client.handle(self.now(), f.clone());
            self.send_all(&replies)?;
            got.push(f);
        }
        let timers = self.client.tick(self.now());
        self.send_all(&timers)?;
        Ok(got)
    }

    /// Pumps until `done` holds or `timeout` passes.
    pub fn pump_until(&mut self, timeout: Duration, mut done: impl FnMut(&Client) -> bool) -> Result<(), NetError> {
        let deadline = Instant::now() + timeout;
        while !done(&self.client) {
            if Instant::now() >= deadline {
                return Err(NetError::Timeout("waiting for the broker"));
            }
            self.pump()?;
        }
        Ok(())
    }

    /// Sends one request frame and returns the first reply matching `want`.
    pub fn request(&mut self, frame: &Frame, timeout: Duration, want: impl Fn(&Frame) -> bool) -> Result<Frame, NetError> {
        self.send(frame)?;
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(f) = self.pump()?.into_iter().find(|f| want(f)) {
                return Ok(f);
            }
        }
        Err(NetError::Timeout("waiting for a reply"))
    }
}
