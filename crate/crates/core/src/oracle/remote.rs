//! Newline-delimited JSON score-oracle protocol.
//!
//! One JSON object per line. Requests carry
//! `{"id", "x_t", "t", "slot", "text"}`; responses carry `{"id", "eps"}` or
//! `{"id", "error"}` and may come back in any order. A request with an
//! empty `x_t` is a health probe and is answered with an empty `eps`.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{PromptSet, ScoreOracle, Slot};
use crate::diffusion::Timestep;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub id: String,
    pub x_t: Vec<f64>,
    pub t: f64,
    pub slot: Slot,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleResponse {
    Eps { id: String, eps: Vec<f64> },
    Error { id: String, error: String },
}

impl OracleResponse {
    pub fn id(&self) -> &str {
        match self {
            OracleResponse::Eps { id, .. } | OracleResponse::Error { id, .. } => id,
        }
    }
}

/// Where a remote oracle lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port` or a bare `host:port`.
    Tcp(String),
    /// `stdio:<program> [args...]`: spawn a child and talk over its pipes.
    Stdio(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::Config("stdio endpoint needs a command".into()));
            }
            return Ok(Endpoint::Stdio(argv));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.is_empty() || !addr.contains(':') {
            return Err(Error::Config(format!(
                "endpoint `{s}` is neither tcp://host:port nor stdio:<command>"
            )));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
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

/// Client side of the protocol. Requests on one connection are serialized
/// behind a mutex.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    prompts: PromptSet,
    dim: Option<usize>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for RemoteOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteOracle")
            .field("prompts", &self.prompts)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

fn transport(slot: Slot, message: impl Into<String>) -> Error {
    Error::Oracle {
        slot,
        message: message.into(),
    }
}

impl RemoteOracle {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn connect(endpoint: &Endpoint, prompts: PromptSet, dim: Option<usize>) -> Result<Self> {
        Self::connect_with_timeout(endpoint, prompts, dim, Self::DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(
        endpoint: &Endpoint,
        prompts: PromptSet,
        dim: Option<usize>,
        timeout: Duration,
    ) -> Result<Self> {
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let addrs: Vec<_> = addr
                    .to_socket_addrs()
                    .map_err(|e| transport(Slot::Target, format!("resolve {addr}: {e}")))?
                    .collect();
                let mut last = None;
                let mut stream = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, timeout) {
                        Ok(s) => {
                            stream = Some(s);
                            break;
                        }
                        Err(e) => last = Some(e),
                    }
                }
                let stream = stream.ok_or_else(|| {
                    let why = last.map_or_else(|| "no address".to_string(), |e| e.to_string());
                    transport(Slot::Target, format!("connect {addr}: {why}"))
                })?;
                stream
                    .set_read_timeout(Some(timeout))
                    .map_err(|e| transport(Slot::Target, e.to_string()))?;
                let _ = stream.set_nodelay(true);
                let read_half = stream
                    .try_clone()
                    .map_err(|e| transport(Slot::Target, e.to_string()))?;
                Connection {
                    reader: Box::new(BufReader::new(read_half)),
                    writer: Box::new(stream),
                    child: None,
                }
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| transport(Slot::Target, format!("spawn {}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                }
            }
        };
        Ok(Self::from_parts(conn, prompts, dim))
    }

    /// Wraps an already-open reader/writer pair.
    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        prompts: PromptSet,
        dim: Option<usize>,
    ) -> Self {
        Self::from_parts(
            Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                child: None,
            },
            prompts,
            dim,
        )
    }

    fn from_parts(conn: Connection, prompts: PromptSet, dim: Option<usize>) -> Self {
        RemoteOracle {
            conn: Mutex::new(conn),
            prompts,
            dim,
            next_id: AtomicU64::new(0),
        }
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Sends a zero-dimensional probe and waits for its answer.
    pub fn healthcheck(&self) -> Result<()> {
        let t = Timestep::new(0.5)?;
        let out = self.exchange(&[], t, &[Slot::Null])?;
        if out[0].is_empty() {
            Ok(())
        } else {
            Err(transport(Slot::Null, "probe answered with a non-empty eps"))
        }
    }

    fn exchange(&self, x_t: &[f64], t: Timestep, slots: &[Slot]) -> Result<Vec<Vec<f64>>> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut pending: HashMap<String, usize> = HashMap::with_capacity(slots.len());
        let mut out: Vec<Option<Vec<f64>>> = vec![None; slots.len()];

        for (i, &slot) in slots.iter().enumerate() {
            let id = format!("q{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            let req = OracleRequest {
                id: id.clone(),
                x_t: x_t.to_vec(),
                t: t.value(),
                slot,
                text: self.prompts.text(slot),
            };
            let mut line = serde_json::to_string(&req)
                .map_err(|e| transport(slot, format!("encode request: {e}")))?;
            line.push('\n');
            conn.writer
                .write_all(line.as_bytes())
                .map_err(|e| transport(slot, format!("send: {e}")))?;
            pending.insert(id, i);
        }
        conn.writer
            .flush()
            .map_err(|e| transport(slots[0], format!("send: {e}")))?;

        let first_pending = |pending: &HashMap<String, usize>| {
            pending
                .values()
                .min()
                .map_or(slots[0], |&i| slots[i])
        };

        let mut line = String::new();
        while !pending.is_empty() {
            line.clear();
            let n = conn
                .reader
                .read_line(&mut line)
                .map_err(|e| transport(first_pending(&pending), format!("receive: {e}")))?;
            if n == 0 {
                return Err(transport(first_pending(&pending), "connection closed"));
            }
            if line.trim().is_empty() {
                continue;
            }
            let resp: OracleResponse = serde_json::from_str(line.trim()).map_err(|e| {
                transport(first_pending(&pending), format!("malformed response: {e}"))
            })?;
            // responses to requests from an earlier, failed batch are stale
            let Some(i) = pending.remove(resp.id()) else {
                continue;
            };
            match resp {
                OracleResponse::Error { error, .. } => return Err(transport(slots[i], error)),
                OracleResponse::Eps { eps, .. } => {
                    if eps.len() != x_t.len() {
                        return Err(transport(
                            slots[i],
                            format!("response dim {} for request dim {}", eps.len(), x_t.len()),
                        ));
                    }
                    out[i] = Some(eps);
                }
            }
        }
        Ok(out.into_iter().map(|e| e.expect("all answered")).collect())
    }
}

impl ScoreOracle for RemoteOracle {
    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn predict_noise(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        Ok(self.exchange(x_t, t, &[slot])?.remove(0))
    }

    fn predict_slots(&self, x_t: &[f64], t: Timestep, slots: &[Slot]) -> Result<Vec<Vec<f64>>> {
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        self.exchange(x_t, t, slots)
    }
}

fn answer<O: ScoreOracle + ?Sized>(oracle: &O, line: &str) -> OracleResponse {
    let req: OracleRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
                .unwrap_or_default();
            return OracleResponse::Error {
                id,
                error: format!("malformed request: {e}"),
            };
        }
    };
    if req.x_t.is_empty() {
        return OracleResponse::Eps {
            id: req.id,
            eps: Vec::new(),
        };
    }
    let result = Timestep::new(req.t).and_then(|t| oracle.predict_noise(&req.x_t, t, req.slot));
    match result {
        Ok(eps) => OracleResponse::Eps { id: req.id, eps },
        Err(e) => OracleResponse::Error {
            id: req.id,
            error: e.to_string(),
        },
    }
}

/// Answers protocol requests read from `reader` until end of input.
/// Malformed requests get error responses; only I/O failures end the loop
/// early.
pub fn serve_connection<O, R, W>(oracle: &O, reader: R, mut writer: W) -> io::Result<()>
where
    O: ScoreOracle + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = answer(oracle, line.trim());
        let mut out = serde_json::to_string(&resp).map_err(io::Error::other)?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_listener<O>(oracle: Arc<O>, listener: TcpListener) -> io::Result<()>
where
    O: ScoreOracle + Send + Sync + 'static + ?Sized,
{
    for stream in listener.incoming() {
        let stream = stream?;
        let oracle = Arc::clone(&oracle);
        thread::spawn(move || {
            let Ok(read_half) = stream.try_clone() else {
                return;
            };
            let _ = serve_connection(&*oracle, BufReader::new(read_half), stream);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("tcp://127.0.0.1:7070").unwrap(),
            Endpoint::Tcp("127.0.0.1:7070".into())
        );
        assert_eq!(
            Endpoint::parse("localhost:9").unwrap(),
            Endpoint::Tcp("localhost:9".into())
        );
        assert_eq!(
            Endpoint::parse("stdio:python3 bridge.py --echo").unwrap(),
            Endpoint::Stdio(vec!["python3".into(), "bridge.py".into(), "--echo".into()])
        );
        assert!(Endpoint::parse("stdio:").is_err());
        assert!(Endpoint::parse("nowhere").is_err());
    }

    #[test]
    fn wire_shapes() {
        let req = OracleRequest {
            id: "a".into(),
            x_t: vec![0.1, -2.5],
            t: 0.25,
            slot: Slot::TargetNegative,
            text: "x".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":"a","x_t":[0.1,-2.5],"t":0.25,"slot":"tnp","text":"x"}"#
        );
        let ok: OracleResponse = serde_json::from_str(r#"{"id":"a","eps":[1.0]}"#).unwrap();
        assert_eq!(ok, OracleResponse::Eps { id: "a".into(), eps: vec![1.0] });
        let err: OracleResponse = serde_json::from_str(r#"{"id":"b","error":"loading"}"#).unwrap();
        assert_eq!(err.id(), "b");
    }

    #[test]
    fn shortest_round_trip_numbers() {
        let v = vec![0.1 + 0.2, 1.0 / 3.0, 1e-300, -7.0];
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[0.30000000000000004,0.3333333333333333,1e-300,-7.0]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
