//! Newline-delimited JSON protocol for external logit servers.
//!
//! The server speaks first with a `hello` line, then answers each `logits`
//! request with one `logits` response (or an `error`). Masked generation
//! slots travel as `-1`. Floats use the shortest decimal that round-trips
//! an IEEE double.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LogitBundle, LogitProvider, PositionLogits, ProviderError, QueryOptions};
use crate::diffusion::{Canvas, TokenId, Vocabulary};

/// Wire value for a masked slot.
pub const WIRE_MASK: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        vocab_size: u32,
        mask_id: u32,
        name: String,
    },
    Logits {
        positions: Vec<PositionLogits>,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Logits(LogitsRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub step: usize,
    pub budget: usize,
    pub prompt: Vec<TokenId>,
    pub gen: Vec<i64>,
    pub want_full: bool,
    pub want_entropy: bool,
}

impl LogitsRequest {
    pub fn from_canvas(canvas: &Canvas, opts: QueryOptions) -> Self {
        let mask = canvas.vocab().mask_id();
        Self {
            step: canvas.step(),
            budget: canvas.budget(),
            prompt: canvas.prompt().to_vec(),
            gen: canvas
                .gen()
                .iter()
                .map(|&t| if t == mask { WIRE_MASK } else { i64::from(t) })
                .collect(),
            want_full: opts.want_full,
            want_entropy: opts.want_entropy,
        }
    }

    /// Rebuilds the canvas on the serving side.
    pub fn to_canvas(&self, vocab: Vocabulary) -> Result<Canvas, ProviderError> {
        let gen = self
            .gen
            .iter()
            .map(|&t| match t {
                WIRE_MASK => Ok(vocab.mask_id()),
                t if t >= 0 && t < i64::from(vocab.size()) => Ok(t as TokenId),
                t => Err(ProviderError::Protocol(format!("invalid gen token {t}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Canvas::from_parts(
            vocab,
            self.prompt.clone(),
            gen,
            self.step,
            self.budget,
        )?)
    }

    pub fn options(&self) -> QueryOptions {
        QueryOptions {
            want_full: self.want_full,
            want_entropy: self.want_entropy,
        }
    }
}

pub fn encode_line<T: Serialize>(msg: &T) -> Result<String, ProviderError> {
    let mut line = serde_json::to_string(msg)
        .map_err(|e| ProviderError::Protocol(format!("encode failed: {e}")))?;
    line.push('\n');
    Ok(line)
}

pub fn decode_server_line(line: &str) -> Result<ServerMessage, ProviderError> {
    serde_json::from_str(line.trim_end())
        .map_err(|e| ProviderError::Protocol(format!("malformed server message: {e}")))
}

pub fn decode_client_line(line: &str) -> Result<ClientMessage, ProviderError> {
    serde_json::from_str(line.trim_end())
        .map_err(|e| ProviderError::Protocol(format!("malformed request: {e}")))
}

/// Contents of the server handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Handshake {
    pub vocab_size: u32,
    pub mask_id: u32,
    pub name: String,
}

impl Handshake {
    /// Engine-side vocabulary. A server mask id inside the real range is
    /// replaced by a sentinel past the range; the server id is still
    /// rejected as an argmax.
    pub fn vocabulary(&self) -> Result<Vocabulary, ProviderError> {
        if self.vocab_size < 2 {
            return Err(ProviderError::Protocol(format!(
                "handshake vocab_size {} is below 2",
                self.vocab_size
            )));
        }
        let mask = if self.mask_id >= self.vocab_size {
            self.mask_id
        } else {
            self.vocab_size
        };
        Ok(Vocabulary::new(self.vocab_size, mask)?)
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    poisoned: bool,
}

impl Connection {
    fn read_line(&mut self) -> Result<String, ProviderError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line)?;
        if n == 0 {
            return Err(ProviderError::Transport("server closed the stream".into()));
        }
        Ok(line)
    }

    fn round_trip(&mut self, request: &str) -> Result<ServerMessage, ProviderError> {
        self.writer.write_all(request.as_bytes())?;
        self.writer.flush()?;
        decode_server_line(&self.read_line()?)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// One connection to a logit server. Requests on a connection are
/// serialized.
pub struct WireClient {
    conn: Mutex<Connection>,
    handshake: Handshake,
    vocab: Vocabulary,
}

impl std::fmt::Debug for WireClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireClient")
            .field("handshake", &self.handshake)
            .finish_non_exhaustive()
    }
}

impl WireClient {
    /// Wraps an already-open stream pair and consumes the handshake.
    pub fn from_streams(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
    ) -> Result<Self, ProviderError> {
        Self::with_connection(Connection {
            reader,
            writer,
            child: None,
            poisoned: false,
        })
    }

    /// Launches `program` and talks to it over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ProviderError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("failed to launch {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::with_connection(Connection {
            reader: Box::new(BufReader::new(stdout)),
            writer: Box::new(stdin),
            child: Some(child),
            poisoned: false,
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, ProviderError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::from_streams(Box::new(reader), Box::new(stream))
    }

    fn with_connection(mut conn: Connection) -> Result<Self, ProviderError> {
        let handshake = match decode_server_line(&conn.read_line()?)? {
            ServerMessage::Hello {
                vocab_size,
                mask_id,
                name,
            } => Handshake {
                vocab_size,
                mask_id,
                name,
            },
            ServerMessage::Error { message } => {
                return Err(ProviderError::Transport(format!(
                    "server refused connection: {message}"
                )))
            }
            other => {
                return Err(ProviderError::Protocol(format!(
                    "expected hello as first message, got {other:?}"
                )))
            }
        };
        let vocab = handshake.vocabulary()?;
        Ok(Self {
            conn: Mutex::new(conn),
            handshake,
            vocab,
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn query_locked(
        &self,
        conn: &mut Connection,
        canvas: &Canvas,
        opts: QueryOptions,
    ) -> Result<LogitBundle, ProviderError> {
        if conn.poisoned {
            return Err(ProviderError::Transport(
                "connection closed after an earlier failure".into(),
            ));
        }
        let request = encode_line(&ClientMessage::Logits(LogitsRequest::from_canvas(
            canvas, opts,
        )))?;
        let result = conn.round_trip(&request).and_then(|msg| match msg {
            ServerMessage::Logits { positions } => {
                let bundle = LogitBundle::new(positions);
                self.check_response(&bundle, canvas.gen_len())?;
                Ok(bundle)
            }
            ServerMessage::Error { message } => {
                Err(ProviderError::Transport(format!("server error: {message}")))
            }
            ServerMessage::Hello { .. } => Err(ProviderError::Protocol(
                "unexpected hello after handshake".into(),
            )),
        });
        if result.is_err() {
            conn.poisoned = true;
        }
        result
    }

    fn check_response(&self, bundle: &LogitBundle, gen_len: usize) -> Result<(), ProviderError> {
        if let Some(p) = bundle
            .positions
            .iter()
            .find(|p| p.argmax == self.handshake.mask_id)
        {
            return Err(ProviderError::Protocol(format!(
                "position {} predicts the mask token",
                p.index
            )));
        }
        bundle
            .validate(gen_len, self.vocab)
            .map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

impl LogitProvider for WireClient {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| ProviderError::Transport("connection lock poisoned".into()))?;
        self.query_locked(&mut conn, canvas, opts)
    }

    fn name(&self) -> String {
        self.handshake.name.clone()
    }
}

/// Several connections to equivalent servers, used for parallel decodes.
#[derive(Debug)]
pub struct WirePool {
    clients: Vec<WireClient>,
    next: AtomicUsize,
}

impl WirePool {
    pub fn new(clients: Vec<WireClient>) -> Result<Self, ProviderError> {
        let first = clients
            .first()
            .ok_or_else(|| ProviderError::Config("connection pool is empty".into()))?;
        if clients
            .iter()
            .any(|c| c.handshake.vocab_size != first.handshake.vocab_size)
        {
            return Err(ProviderError::Config(
                "pooled servers disagree on vocabulary size".into(),
            ));
        }
        Ok(Self {
            clients,
            next: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

impl LogitProvider for WirePool {
    fn vocab(&self) -> Vocabulary {
        self.clients[0].vocab
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        for client in &self.clients {
            if let Ok(mut conn) = client.conn.try_lock() {
                return client.query_locked(&mut conn, canvas, opts);
            }
        }
        let idx = self.next.fetch_add(1, Ordering::Relaxed) % self.clients.len();
        self.clients[idx].query(canvas, opts)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        format!("{}x{}", self.clients[0].name(), self.clients.len())
    }
}

/// Serves `provider` over a stream pair until the client hangs up.
///
/// Malformed requests get an error reply and the loop continues; a provider
/// failure is reported and ends the session with that error.
pub fn serve<P, R, W>(
    provider: &P,
    name: &str,
    reader: R,
    mut writer: W,
) -> Result<(), ProviderError>
where
    P: LogitProvider + ?Sized,
    R: BufRead,
    W: Write,
{
    let vocab = provider.vocab();
    let hello = ServerMessage::Hello {
        vocab_size: vocab.size(),
        mask_id: vocab.mask_id(),
        name: name.to_string(),
    };
    writer.write_all(encode_line(&hello)?.as_bytes())?;
    writer.flush()?;

    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request = match decode_client_line(&line) {
            Ok(ClientMessage::Logits(req)) => req,
            Err(e) => {
                reply_error(&mut writer, &e.to_string())?;
                continue;
            }
        };
        let canvas = match request.to_canvas(vocab) {
            Ok(c) => c,
            Err(e) => {
                reply_error(&mut writer, &e.to_string())?;
                continue;
            }
        };
        match provider.query(&canvas, request.options()) {
            Ok(bundle) => {
                let msg = ServerMessage::Logits {
                    positions: bundle.positions,
                };
                writer.write_all(encode_line(&msg)?.as_bytes())?;
                writer.flush()?;
            }
            Err(e) => {
                reply_error(&mut writer, &e.to_string())?;
                return Err(e);
            }
        }
    }
    Ok(())
}

fn reply_error<W: Write>(writer: &mut W, message: &str) -> Result<(), ProviderError> {
    let msg = ServerMessage::Error {
        message: message.to_string(),
    };
    writer.write_all(encode_line(&msg)?.as_bytes())?;
    writer.flush()?;
    Ok(())
}
