//! Client for out-of-process evaluators.
//!
//! The evaluator speaks line-delimited JSON (one object per line, UTF-8):
//!
//! ```text
//! <- {"proto":1,"depth":N,"objective":"perplexity"|"margin","name":"..."}
//! -> {"id":7,"remove":[3,5]}
//! <- {"id":7,"loss":12.25}            or  {"id":7,"error":"..."}
//! ```
//!
//! The same framing runs over a spawned process's stdio or a TCP socket.
//! Requests are pipelined up to an in-flight limit and matched by id.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LossFn, ObjectiveKind};
use crate::error::{Error, Result};
use crate::mask::LayerMask;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub proto: u32,
    pub depth: usize,
    pub objective: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments of an evaluator that talks over stdin/stdout.
    Command(Vec<String>),
    /// `host:port` of a listening evaluator.
    Tcp(String),
}

#[derive(Serialize, Deserialize)]
struct Request {
    id: u64,
    remove: Vec<usize>,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    #[serde(default)]
    loss: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn recv_line(&self, timeout: Duration) -> Result<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Protocol(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol("evaluator closed the connection".into()))
            }
        }
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Protocol(format!("write failed: {e}")))
    }
}

fn spawn_reader<R: std::io::Read + Send + 'static>(src: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(src).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

pub struct ExternalEvaluator {
    handshake: Handshake,
    timeout: Duration,
    in_flight: usize,
    conn: Mutex<Connection>,
}

impl ExternalEvaluator {
    /// Connects, reads the handshake and validates it.
    pub fn connect(endpoint: &Endpoint, timeout: Duration, in_flight: usize) -> Result<Self> {
        let conn = match endpoint {
            Endpoint::Command(argv) => {
                let (prog, args) = argv
                    .split_first()
                    .ok_or_else(|| Error::InvalidConfig("empty evaluator command".into()))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdout = child.stdout.take().expect("piped stdout");
                let stdin = child.stdin.take().expect("piped stdin");
                Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    next_id: 0,
                    child: Some(child),
                }
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Connection {
                    writer: Box::new(stream.try_clone()?),
                    lines: spawn_reader(stream),
                    next_id: 0,
                    child: None,
                }
            }
        };
        Self::from_connection(conn, timeout, in_flight)
    }

    fn from_connection(conn: Connection, timeout: Duration, in_flight: usize) -> Result<Self> {
        let line = conn.recv_line(timeout)?;
        let handshake: Handshake = serde_json::from_str(&line)
            .map_err(|e| Error::HandshakeMismatch(format!("unparseable handshake: {e}")))?;
        if handshake.proto != PROTOCOL_VERSION {
            return Err(Error::HandshakeMismatch(format!(
                "protocol version {} (expected {PROTOCOL_VERSION})",
                handshake.proto
            )));
        }
        if handshake.depth == 0 {
            return Err(Error::HandshakeMismatch("depth 0".into()));
        }
        if !matches!(handshake.objective.as_str(), "perplexity" | "margin") {
            return Err(Error::HandshakeMismatch(format!(
                "unknown objective {:?}",
                handshake.objective
            )));
        }
        Ok(Self {
            handshake,
            timeout,
            in_flight: in_flight.max(1),
            conn: Mutex::new(conn),
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }
}

impl LossFn for ExternalEvaluator {
    fn depth(&self) -> usize {
        self.handshake.depth
    }

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::External
    }

    fn name(&self) -> String {
        format!("{}:{}", self.handshake.objective, self.handshake.name)
    }

    fn loss(&self, mask: &LayerMask) -> Result<f64> {
        self.loss_batch(std::slice::from_ref(mask))
            .pop()
            .expect("one outcome")
    }

    fn loss_batch(&self, masks: &[LayerMask]) -> Vec<Result<f64>> {
        let mut out: Vec<Option<Result<f64>>> = (0..masks.len()).map(|_| None).collect();
        let mut conn = self.conn.lock().unwrap();
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let mut next = 0;
        while next < masks.len() || !pending.is_empty() {
            while next < masks.len() && pending.len() < self.in_flight {
                let id = conn.next_id;
                conn.next_id += 1;
                let req = Request {
                    id,
                    remove: masks[next].removed().to_vec(),
                };
                if let Err(e) = conn.send(&req) {
                    return fail_all(out, e);
                }
                pending.insert(id, next);
                next += 1;
            }
            let line = match conn.recv_line(self.timeout) {
                Ok(l) => l,
                Err(e) => return fail_all(out, e),
            };
            let resp: Response = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return fail_all(out, Error::Protocol(format!("bad response {line:?}: {e}")))
                }
            };
            let Some(slot) = pending.remove(&resp.id) else {
                return fail_all(out, Error::Protocol(format!("unexpected id {}", resp.id)));
            };
            out[slot] = Some(match (resp.loss, resp.error) {
                (_, Some(err)) => Err(Error::Protocol(err)),
                (Some(loss), None) => Ok(loss),
                (None, None) => Err(Error::Protocol("response without loss or error".into())),
            });
        }
        out.into_iter().map(|o| o.expect("answered")).collect()
    }
}

fn fail_all(out: Vec<Option<Result<f64>>>, err: Error) -> Vec<Result<f64>> {
    let msg = err.to_string();
    let mut err = Some(err);
    out.into_iter()
        .map(|o| match o {
            Some(r) => r,
            None => Err(err.take().unwrap_or_else(|| Error::Protocol(msg.clone()))),
        })
        .collect()
}

/// Evaluator side of the protocol: writes the handshake, then answers each
/// request line with `loss` until the input ends. Malformed requests get an
/// error reply and the loop keeps going.
pub fn serve_lines<R: BufRead, W: Write>(
    handshake: &Handshake,
    loss: &dyn LossFn,
    reader: R,
    mut writer: W,
) -> std::io::Result<()> {
    writeln!(writer, "{}", serde_json::to_string(handshake)?)?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                serde_json::json!({"id": id, "error": format!("malformed request: {e}")})
            }
            Ok(req) => match LayerMask::new(handshake.depth, req.remove)
                .and_then(|m| loss.loss(&m))
            {
                Ok(v) if v.is_finite() => serde_json::json!({"id": req.id, "loss": v}),
                Ok(_) => serde_json::json!({"id": req.id, "error": "non-finite loss"}),
                Err(e) => serde_json::json!({"id": req.id, "error": e.to_string()}),
            },
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}
