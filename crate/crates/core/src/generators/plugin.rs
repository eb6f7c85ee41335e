//! Host side of the generator plugin protocol.
//!
//! A plugin is a child process talking over its standard streams:
//!
//! 1. The host sends one JSON line `{"protocol":1,"edge":"r2m@17","tile_size":512}`
//!    and the plugin answers `{"ok":true,"name":"..."}` or
//!    `{"ok":false,"reason":"..."}`.
//! 2. Each request is a 4-byte big-endian length followed by that many bytes
//!    of RGB PNG; the reply uses the same framing.
//! 3. Closing the child's stdin asks it to exit with status 0.
//!
//! Anything the plugin writes to stderr is kept (last few KiB) and attached
//! to errors.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{Backend, EdgeId, GeneratorError, GeneratorHandle};
use crate::tile::TileImage;

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames above this size are treated as corrupt length prefixes.
pub const MAX_FRAME_BYTES: u32 = 64 << 20;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Overrides the per-tile timeout (seconds, fractional allowed).
pub const TIMEOUT_ENV: &str = "MAPSERIES_PLUGIN_TIMEOUT";

const STDERR_TAIL_BYTES: usize = 8 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub edge: String,
    pub tile_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeReply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug)]
pub enum FrameError {
    Io(io::Error),
    TooLarge(u32),
    Truncated { expected: u32, got: usize },
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Io(e) => write!(f, "{e}"),
            FrameError::TooLarge(n) => {
                write!(
                    f,
                    "length prefix {n} exceeds the {MAX_FRAME_BYTES}-byte limit"
                )
            }
            FrameError::Truncated { expected, got } => {
                write!(f, "frame truncated after {got} of {expected} bytes")
            }
        }
    }
}

impl std::error::Error for FrameError {}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, FrameError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(FrameError::Truncated {
                    expected: 4,
                    got: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrameError::Io(e)),
        }
    }
    let len = u32::from_be_bytes(prefix);
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    let mut payload = Vec::with_capacity(len as usize);
    r.take(u64::from(len))
        .read_to_end(&mut payload)
        .map_err(FrameError::Io)?;
    if payload.len() != len as usize {
        return Err(FrameError::Truncated {
            expected: len,
            got: payload.len(),
        });
    }
    Ok(Some(payload))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginOptions {
    pub timeout: Duration,
    /// Number of identical plugin processes serving this edge.
    pub processes: usize,
}

impl Default for PluginOptions {
    fn default() -> Self {
        PluginOptions {
            timeout: timeout_from_env().unwrap_or(DEFAULT_TIMEOUT),
            processes: 1,
        }
    }
}

/// Parses [`TIMEOUT_ENV`], ignoring malformed values.
pub fn timeout_from_env() -> Option<Duration> {
    let raw = std::env::var(TIMEOUT_ENV).ok()?;
    match raw.trim().parse::<f64>() {
        Ok(secs) if secs > 0.0 && secs.is_finite() => Some(Duration::from_secs_f64(secs)),
        _ => {
            warn!("ignoring {TIMEOUT_ENV}={raw:?}");
            None
        }
    }
}

enum Incoming {
    Line(String),
    Frame(Vec<u8>),
    Eof,
    Broken(String),
}

enum Failure {
    Timeout,
    Exited,
    Framing(String),
    Refused(String),
    Protocol(String),
}

struct PluginProcess {
    child: Child,
    requests: Option<Sender<Vec<u8>>>,
    replies: Receiver<Incoming>,
    stderr: Arc<Mutex<String>>,
    name: String,
}

impl PluginProcess {
    fn spawn(
        command: &[String],
        edge: EdgeId,
        tile_size: u32,
        timeout: Duration,
    ) -> Result<PluginProcess, GeneratorError> {
        let program = command.first().ok_or_else(|| GeneratorError::Spawn {
            edge,
            command: String::new(),
            source: io::Error::new(io::ErrorKind::InvalidInput, "empty plugin command"),
        })?;
        let mut child = Command::new(program)
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| GeneratorError::Spawn {
                edge,
                command: command.join(" "),
                source,
            })?;

        let stderr = Arc::new(Mutex::new(String::new()));
        let err_pipe = child.stderr.take().expect("stderr piped");
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut lines = BufReader::new(err_pipe);
            let mut line = String::new();
            while matches!(lines.read_line(&mut line), Ok(n) if n > 0) {
                let mut buf = sink.lock().unwrap();
                buf.push_str(&line);
                if buf.len() > STDERR_TAIL_BYTES {
                    let mut cut = buf.len() - STDERR_TAIL_BYTES;
                    while !buf.is_char_boundary(cut) {
                        cut += 1;
                    }
                    buf.drain(..cut);
                }
                line.clear();
            }
        });

        let (reply_tx, replies) = mpsc::channel();
        let out_pipe = child.stdout.take().expect("stdout piped");
        thread::spawn(move || reader_loop(BufReader::new(out_pipe), reply_tx));

        let stdin = child.stdin.take().expect("stdin piped");
        let (requests, request_rx) = mpsc::channel::<Vec<u8>>();
        thread::spawn(move || writer_loop(stdin, request_rx));

        let mut proc = PluginProcess {
            child,
            requests: Some(requests),
            replies,
            stderr,
            name: String::new(),
        };
        let hello = serde_json::to_string(&Handshake {
            protocol: PROTOCOL_VERSION,
            edge: edge.to_string(),
            tile_size,
        })
        .expect("handshake serializes");
        let mut line = hello.into_bytes();
        line.push(b'\n');
        proc.send(line);
        match proc.await_reply(timeout) {
            Ok(Incoming::Line(text)) => match serde_json::from_str::<HandshakeReply>(text.trim()) {
                Ok(HandshakeReply { ok: true, name, .. }) => {
                    proc.name = name.unwrap_or_default();
                    debug!("{edge}: plugin {:?} ready", proc.name);
                    Ok(proc)
                }
                Ok(HandshakeReply { reason, .. }) => Err(proc.fail(
                    edge,
                    timeout,
                    Failure::Refused(reason.unwrap_or_else(|| "no reason given".into())),
                )),
                Err(e) => Err(proc.fail(
                    edge,
                    timeout,
                    Failure::Protocol(format!("malformed handshake reply {text:?}: {e}")),
                )),
            },
            Ok(_) => Err(proc.fail(
                edge,
                timeout,
                Failure::Protocol("expected a handshake line".into()),
            )),
            Err(f) => Err(proc.fail(edge, timeout, f)),
        }
    }

    fn send(&self, bytes: Vec<u8>) {
        if let Some(tx) = &self.requests {
            // A closed channel means the writer hit a broken pipe; the reader
            // reports the exit.
            let _ = tx.send(bytes);
        }
    }

    fn await_reply(&self, timeout: Duration) -> Result<Incoming, Failure> {
        match self.replies.recv_timeout(timeout) {
            Ok(Incoming::Eof) => Err(Failure::Exited),
            Ok(Incoming::Broken(why)) => Err(Failure::Framing(why)),
            Ok(msg) => Ok(msg),
            Err(RecvTimeoutError::Timeout) => Err(Failure::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(Failure::Exited),
        }
    }

    fn request(&self, png: Vec<u8>, timeout: Duration) -> Result<Vec<u8>, Failure> {
        let mut framed = Vec::with_capacity(png.len() + 4);
        framed.extend_from_slice(&(png.len() as u32).to_be_bytes());
        framed.extend_from_slice(&png);
        self.send(framed);
        match self.await_reply(timeout)? {
            Incoming::Frame(bytes) => Ok(bytes),
            _ => Err(Failure::Protocol(
                "unexpected text on the frame channel".into(),
            )),
        }
    }

    fn diagnostics(&self) -> String {
        self.stderr.lock().map(|s| s.clone()).unwrap_or_default()
    }

    /// Kills and reaps the child, then converts the failure to an error.
    fn fail(mut self, edge: EdgeId, timeout: Duration, failure: Failure) -> GeneratorError {
        self.requests = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
        // Let the stderr drain thread catch the final lines.
        thread::sleep(Duration::from_millis(20));
        let diagnostics = self.diagnostics();
        match failure {
            Failure::Timeout => GeneratorError::Timeout {
                edge,
                seconds: timeout.as_secs_f64(),
            },
            Failure::Exited => GeneratorError::Backend {
                edge,
                message: "plugin exited".into(),
                diagnostics,
            },
            Failure::Framing(message) => GeneratorError::Framing {
                edge,
                message,
                diagnostics,
            },
            Failure::Refused(reason) => GeneratorError::Refused { edge, reason },
            Failure::Protocol(message) => GeneratorError::Backend {
                edge,
                message,
                diagnostics,
            },
        }
    }

    fn shutdown(mut self) {
        self.requests = None;
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    if !status.success() {
                        warn!("plugin {:?} exited with {status}", self.name);
                    }
                    return;
                }
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return;
                }
            }
        }
    }
}

fn reader_loop(mut out: BufReader<std::process::ChildStdout>, tx: Sender<Incoming>) {
    let mut line = String::new();
    match out.read_line(&mut line) {
        Ok(0) => {
            let _ = tx.send(Incoming::Eof);
            return;
        }
        Ok(_) => {
            if tx.send(Incoming::Line(line)).is_err() {
                return;
            }
        }
        Err(e) => {
            let _ = tx.send(Incoming::Broken(e.to_string()));
            return;
        }
    }
    loop {
        let msg = match read_frame(&mut out) {
            Ok(Some(frame)) => Incoming::Frame(frame),
            Ok(None) => Incoming::Eof,
            Err(e) => Incoming::Broken(e.to_string()),
        };
        let last = !matches!(msg, Incoming::Frame(_));
        if tx.send(msg).is_err() || last {
            return;
        }
    }
}

fn writer_loop(mut stdin: ChildStdin, rx: Receiver<Vec<u8>>) {
    for chunk in rx {
        if stdin.write_all(&chunk).and_then(|_| stdin.flush()).is_err() {
            return;
        }
    }
    // Dropping stdin closes the pipe: the plugin's cue to exit.
}

/// A pool of identical plugin processes serving one edge. Each process
/// handles one request at a time. Any process-level failure poisons the
/// whole pool.
pub struct PluginPool {
    edge: EdgeId,
    tile_size: u32,
    timeout: Duration,
    idle: Mutex<Vec<PluginProcess>>,
    available: Condvar,
    poisoned: AtomicBool,
    poison_reason: Mutex<String>,
    name: String,
}

impl std::fmt::Debug for PluginPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginPool")
            .field("edge", &self.edge)
            .field("name", &self.name)
            .field("poisoned", &self.is_poisoned())
            .finish()
    }
}

impl PluginPool {
    pub fn spawn(
        command: &[String],
        edge: EdgeId,
        tile_size: u32,
        options: &PluginOptions,
    ) -> Result<PluginPool, GeneratorError> {
        let mut procs = Vec::with_capacity(options.processes.max(1));
        for _ in 0..options.processes.max(1) {
            procs.push(PluginProcess::spawn(
                command,
                edge,
                tile_size,
                options.timeout,
            )?);
        }
        let name = procs[0].name.clone();
        Ok(PluginPool {
            edge,
            tile_size,
            timeout: options.timeout,
            idle: Mutex::new(procs),
            available: Condvar::new(),
            poisoned: AtomicBool::new(false),
            poison_reason: Mutex::new(String::new()),
            name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.load(Ordering::SeqCst)
    }

    fn poisoned_error(&self) -> GeneratorError {
        GeneratorError::Poisoned {
            edge: self.edge,
            reason: self.poison_reason.lock().unwrap().clone(),
        }
    }

    fn checkout(&self) -> Result<PluginProcess, GeneratorError> {
        let mut idle = self.idle.lock().unwrap();
        loop {
            if self.is_poisoned() {
                return Err(self.poisoned_error());
            }
            if let Some(p) = idle.pop() {
                return Ok(p);
            }
            idle = self.available.wait(idle).unwrap();
        }
    }

    fn checkin(&self, p: PluginProcess) {
        self.idle.lock().unwrap().push(p);
        self.available.notify_one();
    }

    fn poison(&self, reason: String) {
        *self.poison_reason.lock().unwrap() = reason;
        self.poisoned.store(true, Ordering::SeqCst);
        let drained: Vec<_> = self.idle.lock().unwrap().drain(..).collect();
        for p in drained {
            p.shutdown();
        }
        self.available.notify_all();
    }

    pub fn translate(&self, tile: &TileImage) -> Result<TileImage, GeneratorError> {
        let proc = self.checkout()?;
        match proc.request(tile.to_png(), self.timeout) {
            Ok(reply) => {
                let diagnostics = proc.diagnostics();
                self.checkin(proc);
                let out = TileImage::from_png(&reply).map_err(|e| GeneratorError::Backend {
                    edge: self.edge,
                    message: format!("reply is not a valid tile: {e}"),
                    diagnostics,
                })?;
                if out.size() != self.tile_size {
                    return Err(GeneratorError::Shape {
                        edge: self.edge,
                        expected: self.tile_size,
                        actual: out.size(),
                    });
                }
                Ok(out)
            }
            Err(failure) => {
                let err = proc.fail(self.edge, self.timeout, failure);
                self.poison(err.to_string());
                Err(err)
            }
        }
    }
}

impl Drop for PluginPool {
    fn drop(&mut self) {
        let procs: Vec<_> = match self.idle.get_mut() {
            Ok(v) => std::mem::take(v),
            Err(_) => Vec::new(),
        };
        for p in procs {
            p.shutdown();
        }
    }
}

/// Starts one plugin process for `edge` and performs the handshake.
pub fn spawn_plugin(
    command: &[String],
    edge: EdgeId,
    tile_size: u32,
) -> Result<GeneratorHandle, GeneratorError> {
    spawn_plugin_pool(command, edge, tile_size, &PluginOptions::default())
}

pub fn spawn_plugin_pool(
    command: &[String],
    edge: EdgeId,
    tile_size: u32,
    options: &PluginOptions,
) -> Result<GeneratorHandle, GeneratorError> {
    let pool = PluginPool::spawn(command, edge, tile_size, options)?;
    Ok(GeneratorHandle::new(
        edge,
        tile_size,
        Backend::Plugin(Arc::new(pool)),
    ))
}
