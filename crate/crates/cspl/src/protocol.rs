//! External detectors over a line-delimited JSON protocol on stdio.
//!
//! The engine writes one request per line to the child's stdin and reads
//! exactly one reply line from its stdout before sending the next.
//!
//! ```text
//! > {"op":"hello","protocol":1}
//! < {"ok":true,"capabilities":["train","predict"]}
//! > {"op":"train","examples":[{"image_id":"a","path":"a.jpg","labels":[{"class":"car","bbox":[0,0,5,5]}]}]}
//! < {"ok":true}
//! > {"op":"predict","images":[{"image_id":"a","path":"a.jpg"}]}
//! < {"ok":true,"detections":{"a":[{"class":"car","bbox":[0,0,5,5],"score":0.9}]}}
//! > {"op":"shutdown"}
//! ```
//!
//! A reply of `{"ok":false,"error":"..."}` rejects a request. The child's
//! stderr is forwarded to the log.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use cspl_core::backend::TrainingExample;
use cspl_core::{Backend, BoundingBox, Detection, ImageRecord, Predictions};
use serde::Serialize;
use serde_json::{json, Value};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Idle,
    Busy,
    Closed,
    Failed,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("cannot start backend {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend did not answer {op} within {timeout:?}")]
    Timeout { op: String, timeout: Duration },
    #[error("backend closed its output during {op}")]
    Disconnected { op: String },
    #[error("cannot send {op} to backend: {source}")]
    Write {
        op: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed reply to {op}: {detail}")]
    Malformed { op: String, detail: String },
    #[error("protocol version mismatch: engine speaks {engine}, backend speaks {backend}")]
    VersionMismatch { engine: u64, backend: u64 },
    /// The backend answered `{"ok":false}`; `message` is its error text.
    #[error("backend rejected {op}: {message}")]
    Rejected { op: String, message: String },
    #[error("protocol violation: predict reply is missing image {0}")]
    MissingImage(String),
    #[error("invalid detection for image {image_id}: {source}")]
    InvalidDetection {
        image_id: String,
        #[source]
        source: cspl_core::Error,
    },
    #[error("training request with no examples")]
    EmptyTrain,
    #[error("backend handle is {0:?}")]
    Unavailable(HandleState),
}

impl ProtocolError {
    /// Bad data rather than a broken backend.
    pub fn is_validation(&self) -> bool {
        matches!(self, ProtocolError::InvalidDetection { .. } | ProtocolError::EmptyTrain)
    }
}

impl From<ProtocolError> for cspl_core::Error {
    fn from(e: ProtocolError) -> Self {
        if e.is_validation() {
            cspl_core::Error::Validation(e.to_string())
        } else {
            cspl_core::Error::Backend(e.to_string())
        }
    }
}

pub struct ProcessOptions {
    /// Longest wait for any reply.
    pub timeout: Duration,
    /// How long shutdown waits for the child to exit before killing it.
    pub shutdown_grace: Duration,
    /// Receives every request as `> line` and every reply as `< line`.
    pub wire_log: Option<Box<dyn Write + Send>>,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            shutdown_grace: Duration::from_secs(5),
            wire_log: None,
        }
    }
}

/// A running backend process.
pub struct ProcessBackend {
    child: Child,
    stdin: Option<ChildStdin>,
    replies: Receiver<std::io::Result<String>>,
    state: HandleState,
    requests: u64,
    timeout: Duration,
    shutdown_grace: Duration,
    wire_log: Option<Box<dyn Write + Send>>,
    capabilities: Vec<String>,
    exit_status: Option<ExitStatus>,
    force_killed: bool,
}

#[derive(Serialize)]
struct WireImage<'a> {
    image_id: &'a str,
    path: &'a str,
}

#[derive(Serialize)]
struct WireExample<'a> {
    image_id: &'a str,
    path: &'a str,
    labels: &'a [cspl_core::GroundTruthObject],
}

impl ProcessBackend {
    /// Starts `command` and completes the hello handshake.
    pub fn spawn(command: &str, args: &[String], options: ProcessOptions) -> Result<Self, ProtocolError> {
        let mut backend = Self::launch(command, args, options)?;
        backend.handshake()?;
        Ok(backend)
    }

    /// Starts the process without talking to it.
    pub fn launch(command: &str, args: &[String], options: ProcessOptions) -> Result<Self, ProtocolError> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ProtocolError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");
        let (tx, replies) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                log::info!(target: "cspl::backend", "{line}");
            }
        });
        Ok(Self {
            stdin: child.stdin.take(),
            child,
            replies,
            state: HandleState::Idle,
            requests: 0,
            timeout: options.timeout,
            shutdown_grace: options.shutdown_grace,
            wire_log: options.wire_log,
            capabilities: Vec::new(),
            exit_status: None,
            force_killed: false,
        })
    }

    pub fn state(&self) -> HandleState {
        self.state
    }

    /// Requests sent so far, the handshake and shutdown included.
    pub fn requests_sent(&self) -> u64 {
        self.requests
    }

    pub fn capabilities(&self) -> &[String] {
        &self.capabilities
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.exit_status
    }

    pub fn was_force_killed(&self) -> bool {
        self.force_killed
    }

    fn log_wire(&mut self, prefix: char, line: &str) {
        if let Some(w) = self.wire_log.as_mut() {
            let res = writeln!(w, "{prefix} {line}").and_then(|_| w.flush());
            if let Err(e) = res {
                log::warn!("cannot write backend transcript: {e}");
                self.wire_log = None;
            }
        }
    }

    fn fail(&mut self, e: ProtocolError) -> ProtocolError {
        self.state = HandleState::Failed;
        log::error!("backend failed: {e}");
        e
    }

    fn send(&mut self, op: &str, request: &str) -> Result<(), ProtocolError> {
        self.log_wire('>', request);
        self.requests += 1;
        let stdin = self.stdin.as_mut().ok_or(ProtocolError::Unavailable(HandleState::Closed))?;
        stdin
            .write_all(request.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush())
            .map_err(|source| ProtocolError::Write { op: op.to_string(), source })
    }

    fn receive(&mut self, op: &str) -> Result<String, ProtocolError> {
        match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(line)) => {
                self.log_wire('<', &line);
                Ok(line)
            }
            Ok(Err(e)) => Err(ProtocolError::Malformed {
                op: op.to_string(),
                detail: e.to_string(),
            }),
            Err(RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout {
                op: op.to_string(),
                timeout: self.timeout,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Disconnected { op: op.to_string() }),
        }
    }

    /// One request, one reply line parsed as a JSON object.
    fn exchange_raw(&mut self, op: &str, request: &Value) -> Result<serde_json::Map<String, Value>, ProtocolError> {
        if self.state != HandleState::Idle {
            return Err(ProtocolError::Unavailable(self.state));
        }
        self.state = HandleState::Busy;
        let line = request.to_string();
        let reply = self
            .send(op, &line)
            .and_then(|_| self.receive(op))
            .and_then(|reply| match serde_json::from_str::<Value>(&reply) {
                Ok(Value::Object(m)) => Ok(m),
                _ => Err(ProtocolError::Malformed {
                    op: op.to_string(),
                    detail: format!("not a JSON object: {reply:?}"),
                }),
            });
        match reply {
            Ok(r) => {
                self.state = HandleState::Idle;
                Ok(r)
            }
            Err(e) => Err(self.fail(e)),
        }
    }

    /// `ok:false` becomes [`ProtocolError::Rejected`] with the handle still
    /// usable; a reply without `ok` fails the handle.
    fn accepted(
        &mut self,
        op: &str,
        reply: serde_json::Map<String, Value>,
    ) -> Result<serde_json::Map<String, Value>, ProtocolError> {
        match reply.get("ok") {
            Some(Value::Bool(true)) => Ok(reply),
            Some(Value::Bool(false)) => {
                let message = match reply.get("error") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => String::new(),
                };
                Err(ProtocolError::Rejected {
                    op: op.to_string(),
                    message,
                })
            }
            _ => Err(self.fail(ProtocolError::Malformed {
                op: op.to_string(),
                detail: "reply has no boolean \"ok\"".into(),
            })),
        }
    }

    fn exchange(&mut self, op: &str, request: &Value) -> Result<serde_json::Map<String, Value>, ProtocolError> {
        let reply = self.exchange_raw(op, request)?;
        self.accepted(op, reply)
    }

    /// Sends `hello` and checks the protocol version and capability list.
    /// Any failure leaves the handle failed.
    pub fn handshake(&mut self) -> Result<(), ProtocolError> {
        let request = json!({"op": "hello", "protocol": PROTOCOL_VERSION});
        let reply = self.exchange_raw("hello", &request)?;
        if let Some(v) = reply.get("protocol") {
            match v.as_u64() {
                Some(PROTOCOL_VERSION) => {}
                Some(backend) => {
                    return Err(self.fail(ProtocolError::VersionMismatch {
                        engine: PROTOCOL_VERSION,
                        backend,
                    }))
                }
                None => {
                    return Err(self.fail(ProtocolError::Malformed {
                        op: "hello".into(),
                        detail: format!("protocol is not an integer: {v}"),
                    }))
                }
            }
        }
        let reply = self.accepted("hello", reply).inspect_err(|_| self.state = HandleState::Failed)?;
        let caps = reply.get("capabilities").and_then(Value::as_array).and_then(|a| {
            a.iter().map(|c| c.as_str().map(String::from)).collect::<Option<Vec<_>>>()
        });
        match caps {
            Some(caps) => {
                self.capabilities = caps;
                Ok(())
            }
            None => Err(self.fail(ProtocolError::Malformed {
                op: "hello".into(),
                detail: "capabilities must be a list of strings".into(),
            })),
        }
    }

    /// Sends all `examples` in a single request.
    pub fn request_train(&mut self, examples: &[TrainingExample]) -> Result<(), ProtocolError> {
        if examples.is_empty() {
            return Err(ProtocolError::EmptyTrain);
        }
        let wire: Vec<WireExample> = examples
            .iter()
            .map(|e| WireExample {
                image_id: &e.image.image_id,
                path: &e.image.path,
                labels: &e.labels,
            })
            .collect();
        let request = json!({"op": "train", "examples": wire});
        self.exchange("train", &request).map(|_| ())
    }

    /// Detections for every image in `images`; no request is sent for an
    /// empty list.
    pub fn request_predict(&mut self, images: &[ImageRecord]) -> Result<Predictions, ProtocolError> {
        if images.is_empty() {
            return Ok(Predictions::new());
        }
        let wire: Vec<WireImage> = images
            .iter()
            .map(|i| WireImage {
                image_id: &i.image_id,
                path: &i.path,
            })
            .collect();
        let request = json!({"op": "predict", "images": wire});
        let mut reply = self.exchange("predict", &request)?;
        let Some(Value::Object(mut detections)) = reply.remove("detections") else {
            return Err(self.fail(ProtocolError::Malformed {
                op: "predict".into(),
                detail: "reply has no detections object".into(),
            }));
        };
        let mut out = Predictions::new();
        for img in images {
            let Some(list) = detections.remove(&img.image_id) else {
                return Err(self.fail(ProtocolError::MissingImage(img.image_id.clone())));
            };
            let dets = match parse_detections(&img.image_id, list) {
                Ok(d) => d,
                Err(e @ ProtocolError::Malformed { .. }) => return Err(self.fail(e)),
                Err(e) => return Err(e),
            };
            out.insert(img.image_id.clone(), dets);
        }
        if !detections.is_empty() {
            log::warn!("predict reply has {} unrequested images", detections.len());
        }
        Ok(out)
    }

    /// Asks the backend to exit, waits, then kills it. Later calls return
    /// the recorded status without doing anything.
    pub fn shutdown(&mut self) -> Option<ExitStatus> {
        if self.state == HandleState::Closed {
            return self.exit_status;
        }
        if self.stdin.is_some() {
            let _ = self.send("shutdown", r#"{"op":"shutdown"}"#);
        }
        self.stdin = None;
        let deadline = Instant::now() + self.shutdown_grace;
        let mut status = None;
        while Instant::now() < deadline {
            match self.child.try_wait() {
                Ok(Some(s)) => {
                    status = Some(s);
                    break;
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    log::warn!("cannot poll backend process: {e}");
                    break;
                }
            }
        }
        if status.is_none() {
            log::warn!("backend did not exit within {:?}; killing it", self.shutdown_grace);
            let _ = self.child.kill();
            self.force_killed = true;
            status = self.child.wait().ok();
        }
        while let Ok(Ok(line)) = self.replies.try_recv() {
            self.log_wire('<', &line);
        }
        if let Some(w) = self.wire_log.as_mut() {
            let _ = w.flush();
        }
        self.exit_status = status;
        self.state = HandleState::Closed;
        status
    }
}

fn parse_detections(image_id: &str, list: Value) -> Result<Vec<Detection>, ProtocolError> {
    let malformed = |detail: String| ProtocolError::Malformed {
        op: "predict".into(),
        detail: format!("image {image_id}: {detail}"),
    };
    let Value::Array(items) = list else {
        return Err(malformed("detections must be a list".into()));
    };
    items
        .into_iter()
        .map(|item| {
            let class = item.get("class").and_then(Value::as_str).ok_or_else(|| malformed("detection without class".into()))?;
            let bbox: [f64; 4] = item
                .get("bbox")
                .and_then(|b| serde_json::from_value(b.clone()).ok())
                .ok_or_else(|| malformed("bbox must be four numbers".into()))?;
            let score = item.get("score").and_then(Value::as_f64).ok_or_else(|| malformed("detection without score".into()))?;
            let invalid = |source| ProtocolError::InvalidDetection {
                image_id: image_id.to_string(),
                source,
            };
            let bbox = BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(invalid)?;
            Detection::new(class, bbox, score).map_err(invalid)
        })
        .collect()
}

impl Backend for ProcessBackend {
    fn train(&mut self, examples: &[TrainingExample]) -> cspl_core::Result<()> {
        Ok(self.request_train(examples)?)
    }

    fn predict(&mut self, images: &[ImageRecord]) -> cspl_core::Result<Predictions> {
        Ok(self.request_predict(images)?)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        self.shutdown();
    }
}
