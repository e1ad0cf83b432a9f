//! Frame publisher over TCP.
//!
//! A subscriber opens a connection and sends `SUB 1\n`. From then on it
//! receives encoded frames, each behind a u32 little-endian length. Any
//! other greeting gets a single `ERR <reason>\n` line and the connection is
//! closed. Each subscriber has its own bounded queue; when it falls behind
//! the oldest queued frame is discarded so the scan loop never waits on a
//! socket.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::daq::frame::{self, encode_frame, Frame, FrameError, VERSION};
use crate::daq::scan::FrameSource;

pub const DEFAULT_QUEUE_DEPTH: usize = 8;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub rate_hz: f64,
    pub queue_depth: usize,
    /// Stop after this long; run until shut down when absent.
    pub duration: Option<Duration>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            rate_hz: 100.0,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            duration: None,
        }
    }
}

#[derive(Debug, Default)]
struct QueueState {
    frames: VecDeque<Arc<[u8]>>,
    dropped: u64,
    closed: bool,
}

/// Drop-oldest queue between the scan loop and one subscriber socket.
#[derive(Debug)]
struct SubscriberQueue {
    depth: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl SubscriberQueue {
    fn new(depth: usize) -> Self {
        SubscriberQueue {
            depth: depth.max(1),
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        }
    }

    fn push(&self, frame: Arc<[u8]>) {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return;
        }
        if s.frames.len() == self.depth {
            s.frames.pop_front();
            s.dropped += 1;
        }
        s.frames.push_back(frame);
        drop(s);
        self.ready.notify_one();
    }

    /// Blocks until a frame is available; `None` once closed and drained.
    fn pop(&self) -> Option<Arc<[u8]>> {
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(f) = s.frames.pop_front() {
                return Some(f);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait_timeout(s, POLL).unwrap().0;
        }
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }
}

#[derive(Debug, Default)]
struct Shared {
    subscribers: Mutex<Vec<Arc<SubscriberQueue>>>,
    produced: AtomicU64,
    last_sequence: AtomicU64,
    dropped_closed: AtomicU64,
    stop: AtomicBool,
    scan_error: Mutex<Option<String>>,
}

/// Handle to a running publisher.
#[derive(Debug)]
pub struct StreamHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    scan: Option<JoinHandle<()>>,
    accept: Option<JoinHandle<()>>,
}

impl StreamHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Frames produced by the scan loop so far.
    pub fn frames_produced(&self) -> u64 {
        self.shared.produced.load(Ordering::SeqCst)
    }

    pub fn last_sequence(&self) -> u64 {
        self.shared.last_sequence.load(Ordering::SeqCst)
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared
            .subscribers
            .lock()
            .unwrap()
            .iter()
            .filter(|q| !q.is_closed())
            .count()
    }

    /// Frames discarded from subscriber queues, including closed ones.
    pub fn frames_dropped(&self) -> u64 {
        let live: u64 = self
            .shared
            .subscribers
            .lock()
            .unwrap()
            .iter()
            .map(|q| q.state.lock().unwrap().dropped)
            .sum();
        live + self.shared.dropped_closed.load(Ordering::SeqCst)
    }

    pub fn scan_error(&self) -> Option<String> {
        self.shared.scan_error.lock().unwrap().clone()
    }

    pub fn is_finished(&self) -> bool {
        self.scan.as_ref().is_none_or(|h| h.is_finished())
    }

    /// Blocks until the scan loop ends on its own (duration elapsed or error).
    pub fn wait(mut self) -> Option<String> {
        if let Some(h) = self.scan.take() {
            let _ = h.join();
        }
        self.stop_all();
        self.scan_error()
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for q in self.shared.subscribers.lock().unwrap().iter() {
            q.close();
        }
        if let Some(h) = self.scan.take() {
            let _ = h.join();
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Binds `addr` and starts publishing frames from `source` at the
/// configured wall-clock rate.
pub fn stream_serve<A: ToSocketAddrs>(
    addr: A,
    source: Box<dyn FrameSource>,
    cfg: StreamConfig,
) -> io::Result<StreamHandle> {
    if !(cfg.rate_hz > 0.0 && cfg.rate_hz.is_finite()) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "rate must be positive"));
    }
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let shared = Arc::new(Shared::default());

    let accept = {
        let shared = Arc::clone(&shared);
        let depth = cfg.queue_depth;
        thread::spawn(move || accept_loop(listener, shared, depth))
    };
    let scan = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || scan_loop(source, shared, cfg))
    };
    Ok(StreamHandle {
        addr: local,
        shared,
        scan: Some(scan),
        accept: Some(accept),
    })
}

fn scan_loop(mut source: Box<dyn FrameSource>, shared: Arc<Shared>, cfg: StreamConfig) {
    let period = Duration::from_secs_f64(1.0 / cfg.rate_hz);
    let start = Instant::now();
    let mut tick: u32 = 0;
    while !shared.stop.load(Ordering::SeqCst) {
        let due = start + period * tick;
        if let Some(limit) = cfg.duration {
            if due - start >= limit {
                break;
            }
        }
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        let encoded = source
            .next_frame()
            .map_err(|e| e.to_string())
            .and_then(|f| encode_frame(&f).map(|b| (f, b)).map_err(|e| e.to_string()));
        let (frame, bytes) = match encoded {
            Ok(v) => v,
            Err(e) => {
                *shared.scan_error.lock().unwrap() = Some(e);
                break;
            }
        };
        let payload: Arc<[u8]> = bytes.into();
        let mut subs = shared.subscribers.lock().unwrap();
        subs.retain(|q| {
            if q.is_closed() {
                let d = q.state.lock().unwrap().dropped;
                shared.dropped_closed.fetch_add(d, Ordering::SeqCst);
                false
            } else {
                q.push(Arc::clone(&payload));
                true
            }
        });
        drop(subs);
        shared.produced.fetch_add(1, Ordering::SeqCst);
        shared
            .last_sequence
            .store(frame.sequence as u64, Ordering::SeqCst);
        tick += 1;
    }
    for q in shared.subscribers.lock().unwrap().iter() {
        q.close();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, depth: usize) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = Arc::clone(&shared);
                thread::spawn(move || {
                    let _ = serve_subscriber(stream, shared, depth);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

/// Parses a greeting line; `Err` carries the rejection reason.
pub fn parse_handshake(line: &str) -> Result<u8, String> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut parts = line.split(' ');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("SUB"), Some(v), None) => match v.parse::<u8>() {
            Ok(version) if version == VERSION => Ok(version),
            Ok(version) => Err(format!("unsupported version {version}")),
            Err(_) => Err(format!("bad version {v:?}")),
        },
        _ => Err("expected 'SUB <version>'".to_string()),
    }
}

fn serve_subscriber(stream: TcpStream, shared: Arc<Shared>, depth: usize) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut line = String::new();
    // greeting is capped so a peer cannot stream an unbounded line
    BufReader::new(io::Read::take(stream, 64)).read_line(&mut line)?;
    if let Err(reason) = parse_handshake(&line) {
        writer.write_all(format!("ERR {reason}\n").as_bytes())?;
        return Ok(());
    }
    if shared.stop.load(Ordering::SeqCst) {
        writer.write_all(b"ERR stream closed\n")?;
        return Ok(());
    }
    let queue = Arc::new(SubscriberQueue::new(depth));
    shared.subscribers.lock().unwrap().push(Arc::clone(&queue));
    while let Some(bytes) = queue.pop() {
        if frame::write_prefixed(&mut writer, &bytes).is_err() {
            break;
        }
    }
    queue.close();
    let _ = writer.flush();
    Ok(())
}

/// Minimal client used by tools and tests.
#[derive(Debug)]
pub struct Subscriber {
    stream: TcpStream,
}

#[derive(Debug, thiserror::Error)]
pub enum SubscribeError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl Subscriber {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Self::connect_with(addr, &format!("SUB {VERSION}\n"))
    }

    /// Connects and sends an arbitrary greeting.
    pub fn connect_with<A: ToSocketAddrs>(addr: A, greeting: &str) -> io::Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.write_all(greeting.as_bytes())?;
        Ok(Subscriber { stream })
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    /// Next frame; `Ok(None)` when the publisher closes the stream.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, SubscribeError> {
        let mut head = [0u8; 4];
        match io::Read::read_exact(&mut self.stream, &mut head) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        if &head[..] == b"ERR " {
            let mut rest = String::new();
            BufReader::new(&mut self.stream).read_line(&mut rest)?;
            return Err(SubscribeError::Rejected(rest.trim_end().to_string()));
        }
        let mut buf = vec![0u8; u32::from_le_bytes(head) as usize];
        io::Read::read_exact(&mut self.stream, &mut buf)?;
        Ok(Some(frame::decode_frame(&buf)?))
    }
}
