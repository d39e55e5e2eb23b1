//! Child-process classifiers speaking line-delimited JSON over stdin/stdout.
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"hello","version":1,"classes":[..],"width":W,"height":H,"channels":C,"concurrent":false}
//! -> {"type":"classify","id":n,"images":["<base64 f32-LE pixels>", ..]}
//! <- {"type":"result","id":n,"probs":[[..], ..]}
//! -> {"type":"shutdown"}
//! ```
//!
//! Any `{"type":"error","id":n,"message":..}` reply fails the request.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use super::{ClassDistribution, Classifier, ClassifierKind};
use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::substream;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub struct ExternalOptions {
    pub handshake_timeout: Duration,
    pub request_timeout: Duration,
    pub shutdown_timeout: Duration,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        Self {
            handshake_timeout: Duration::from_secs(20),
            request_timeout: Duration::from_secs(120),
            shutdown_timeout: Duration::from_secs(5),
        }
    }
}

/// Base64 of the little-endian `f32` pixel buffer.
pub fn encode_pixels(image: &Image) -> String {
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    BASE64.encode(bytes)
}

pub fn decode_pixels(text: &str) -> Result<Vec<f32>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::External(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::External(format!(
            "payload of {} bytes is not a float32 buffer",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Reply {
    Hello {
        version: u32,
        classes: Vec<String>,
        width: usize,
        height: usize,
        channels: usize,
        #[serde(default)]
        concurrent: bool,
    },
    Result {
        id: u64,
        probs: Vec<Vec<f64>>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        #[serde(default)]
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct Advertised {
    pub classes: Vec<String>,
    pub dims: (usize, usize, usize),
    pub concurrent: bool,
}

/// A running adapter process and its line stream.
struct Channel {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
}

impl Channel {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot launch {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::External("adapter stdout unavailable".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    fn send(&mut self, msg: &serde_json::Value) -> Result<()> {
        self.send_raw(&msg.to_string())
    }

    fn send_raw(&mut self, line: &str) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::External("adapter stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::External(format!("write to adapter failed: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Reply> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(Error::External(format!("read from adapter failed: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::External("adapter closed its output".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line)
                .map_err(|e| Error::External(format!("malformed response {line:?}: {e}")));
        }
    }

    fn hello(&mut self, timeout: Duration) -> Result<Advertised> {
        self.send(&json!({"type": "hello", "version": PROTOCOL_VERSION}))?;
        let reply = self.recv(timeout).map_err(|e| match e {
            Error::Timeout(_) => e,
            other => Error::Handshake(other.to_string()),
        })?;
        match reply {
            Reply::Hello {
                version,
                classes,
                width,
                height,
                channels,
                concurrent,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(Error::Handshake(format!(
                        "adapter speaks version {version}, expected {PROTOCOL_VERSION}"
                    )));
                }
                if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
                    return Err(Error::Handshake(format!(
                        "adapter advertises invalid input {width}x{height}x{channels}"
                    )));
                }
                Ok(Advertised {
                    classes,
                    dims: (width, height, channels),
                    concurrent,
                })
            }
            other => Err(Error::Handshake(format!("expected hello, got {other:?}"))),
        }
    }

    /// Sends one classify request and waits for the matching reply.
    fn classify(&mut self, id: u64, images: &[Image], timeout: Duration) -> Result<Vec<Vec<f64>>> {
        let payload: Vec<String> = images.iter().map(encode_pixels).collect();
        self.send(&json!({"type": "classify", "id": id, "images": payload}))?;
        match self.recv(timeout)? {
            Reply::Result { id: got, probs } if got == id => {
                if probs.len() != images.len() {
                    return Err(Error::External(format!(
                        "reply {id} carries {} distributions for {} images",
                        probs.len(),
                        images.len()
                    )));
                }
                Ok(probs)
            }
            Reply::Result { id: got, .. } => Err(Error::External(format!(
                "reply id {got} does not match request {id}"
            ))),
            Reply::Error { message, .. } => Err(Error::External(message)),
            other => Err(Error::External(format!("unexpected reply {other:?}"))),
        }
    }

    fn wait_exit(&mut self, timeout: Duration) -> Result<ExitStatus> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait()? {
                return Ok(status);
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout(timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    fn shutdown(&mut self, timeout: Duration) -> Result<ExitStatus> {
        self.send(&json!({"type": "shutdown"}))?;
        self.stdin = None;
        self.wait_exit(timeout)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.shutdown(Duration::from_secs(2));
            if let Ok(None) = self.child.try_wait() {
                let _ = self.child.kill();
                let _ = self.child.wait();
            }
        }
    }
}

struct Session {
    channel: Channel,
    next_id: u64,
}

/// Classifier backed by an adapter process.
pub struct ExternalClassifier {
    catalog: ClassCatalog,
    dims: (usize, usize, usize),
    concurrent: bool,
    options: ExternalOptions,
    session: Mutex<Session>,
}

impl ExternalClassifier {
    /// Launches `command` through `sh -c` and performs the handshake. When a
    /// catalog or input size is given, the adapter must advertise the same
    /// class count and dimensions.
    pub fn open(
        command: &str,
        catalog: Option<&ClassCatalog>,
        dims: Option<(usize, usize, usize)>,
        options: ExternalOptions,
    ) -> Result<Self> {
        let mut channel = Channel::spawn(command)?;
        let adv = channel.hello(options.handshake_timeout)?;
        let catalog = match catalog {
            Some(cat) if cat.len() != adv.classes.len() => {
                return Err(Error::Handshake(format!(
                    "adapter advertises K={} but the catalog has {} classes",
                    adv.classes.len(),
                    cat.len()
                )))
            }
            Some(cat) => cat.clone(),
            None => ClassCatalog::new(adv.classes.clone())
                .map_err(|e| Error::Handshake(e.to_string()))?,
        };
        if let Some(d) = dims {
            if d != adv.dims {
                return Err(Error::Handshake(format!(
                    "adapter expects {:?} inputs, engine supplies {:?}",
                    adv.dims, d
                )));
            }
        }
        Ok(Self {
            catalog,
            dims: adv.dims,
            concurrent: adv.concurrent,
            options,
            session: Mutex::new(Session { channel, next_id: 1 }),
        })
    }

    /// Sends `shutdown` and returns the adapter's exit status.
    pub fn close(self) -> Result<ExitStatus> {
        let mut session = self.session.into_inner().unwrap_or_else(|p| p.into_inner());
        session.channel.shutdown(self.options.shutdown_timeout)
    }
}

impl Classifier for ExternalClassifier {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn input_dims(&self) -> Option<(usize, usize, usize)> {
        Some(self.dims)
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::External
    }

    fn concurrent(&self) -> bool {
        self.concurrent
    }

    fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check_dims(img)?;
        }
        let raw = {
            let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
            let id = session.next_id;
            session.next_id += 1;
            session
                .channel
                .classify(id, images, self.options.request_timeout)?
        };
        raw.into_iter()
            .map(|probs| {
                if probs.len() != self.catalog.len() {
                    return Err(Error::InvalidDistribution(format!(
                        "{} entries for {} classes",
                        probs.len(),
                        self.catalog.len()
                    )));
                }
                ClassDistribution::from_external(probs)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: std::result::Result<String, String>) -> bool {
        let passed = outcome.is_ok();
        let detail = outcome.unwrap_or_else(|e| e);
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
        passed
    }
}

fn random_image(dims: (usize, usize, usize), rng: &mut impl Rng) -> Image {
    let (w, h, c) = dims;
    Image::new(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect())
        .expect("generated pixels are in range")
}

/// Drives an adapter through the handshake, `rounds` random classify
/// round-trips, the error-reply path and shutdown.
pub fn conformance_check(
    command: &str,
    rounds: usize,
    seed: u64,
    options: ExternalOptions,
) -> Result<ConformanceReport> {
    let mut report = ConformanceReport::default();
    let mut channel = Channel::spawn(command)?;
    let adv = match channel.hello(options.handshake_timeout) {
        Ok(adv) if adv.classes.len() >= 2 => {
            report.record("handshake", Ok(format!(
                "K={} input={:?} concurrent={}",
                adv.classes.len(),
                adv.dims,
                adv.concurrent
            )));
            adv
        }
        Ok(adv) => {
            report.record("handshake", Err(format!("only {} classes advertised", adv.classes.len())));
            return Ok(report);
        }
        Err(e) => {
            report.record("handshake", Err(e.to_string()));
            return Ok(report);
        }
    };
    let k = adv.classes.len();
    let mut rng = substream(seed, 0);

    let mut id = 1u64;
    let mut failure = None;
    for round in 0..rounds {
        let n = rng.random_range(1..=3);
        let images: Vec<Image> = (0..n).map(|_| random_image(adv.dims, &mut rng)).collect();
        let outcome = channel
            .classify(id, &images, options.request_timeout)
            .and_then(|probs| {
                for p in probs {
                    if p.len() != k {
                        return Err(Error::InvalidDistribution(format!("{} entries for K={k}", p.len())));
                    }
                    ClassDistribution::from_external(p)?;
                }
                Ok(())
            });
        if let Err(e) = outcome {
            failure = Some(format!("round {round} (id {id}): {e}"));
            break;
        }
        id += 1;
    }
    let ok = report.record(
        "classify round-trips",
        failure.map_or_else(|| Ok(format!("{rounds} requests")), Err),
    );
    if !ok {
        return Ok(report);
    }

    let bad_id = id;
    id += 1;
    let outcome = channel
        .send(&json!({"type": "classify", "id": bad_id, "images": ["%%% not base64 %%%"]}))
        .and_then(|_| channel.recv(options.request_timeout));
    report.record(
        "error reply",
        match outcome {
            Ok(Reply::Error { id: Some(got), message }) if got == bad_id => Ok(message),
            Ok(other) => Err(format!("expected error reply with id {bad_id}, got {other:?}")),
            Err(e) => Err(e.to_string()),
        },
    );
    let image = random_image(adv.dims, &mut rng);
    report.record(
        "recovery after error",
        channel
            .classify(id, &[image], options.request_timeout)
            .map(|_| "adapter still serving".to_string())
            .map_err(|e| e.to_string()),
    );

    report.record(
        "shutdown",
        match channel.shutdown(options.shutdown_timeout) {
            Ok(status) if status.success() => Ok("exit 0".into()),
            Ok(status) => Err(format!("exit status {status}")),
            Err(e) => Err(e.to_string()),
        },
    );
    Ok(report)
}
