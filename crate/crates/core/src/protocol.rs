//! Framed binary wire protocol between the master and its workers.
//!
//! Every message travels as one frame: a 4-byte big-endian payload length
//! followed by the payload. The payload starts with a one-byte message tag.
//! All integers are big-endian and reals are raw binary64 bit patterns, so
//! encoding is deterministic and lossless. See `protocol.md` at the
//! repository root for the byte-level layout.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::linalg::DenseMatrix;

/// Version announced in `Hello`; workers refuse any other.
pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a frame payload.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

/// Maximum nesting depth of `List` values accepted by the decoder.
pub const MAX_LIST_DEPTH: usize = 32;

mod tag {
    pub const HELLO: u8 = 0x01;
    pub const HELLO_ACK: u8 = 0x02;
    pub const ENV_EXPORT: u8 = 0x03;
    pub const ENV_ACK: u8 = 0x04;
    pub const TASK_SUBMIT: u8 = 0x05;
    pub const TASK_RESULT: u8 = 0x06;
    pub const SHUTDOWN: u8 = 0x07;
    pub const PROTO_ERROR: u8 = 0x08;

    pub const UNIT: u8 = 0x00;
    pub const BOOL: u8 = 0x01;
    pub const INT: u8 = 0x02;
    pub const REAL: u8 = 0x03;
    pub const STR: u8 = 0x04;
    pub const LIST: u8 = 0x05;
    pub const MATRIX: u8 = 0x06;

    pub const OUTCOME_VALUE: u8 = 0x00;
    pub const OUTCOME_FAILED: u8 = 0x01;
    pub const OUTCOME_UNKNOWN_TASK: u8 = 0x02;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("truncated frame: expected {expected} bytes, got {received}")]
    TruncatedFrame {
        expected: usize,
        received: usize,
        /// True when the source ended inside the length prefix.
        in_prefix: bool,
    },
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    OversizeFrame(usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl ProtocolError {
    /// The source ended exactly at a frame boundary.
    pub fn is_clean_eof(&self) -> bool {
        matches!(
            self,
            ProtocolError::TruncatedFrame {
                received: 0,
                in_prefix: true,
                ..
            }
        )
    }
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedPayload(msg.into())
}

/// A datum exchanged between master and workers.
///
/// Equality is bitwise for reals and matrix entries, so `-0.0 != 0.0` and a
/// NaN equals itself.
#[derive(Clone, Debug)]
pub enum Value {
    Unit,
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    List(Vec<Value>),
    Matrix(DenseMatrix),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Unit, Unit) => true,
            (Bool(a), Bool(b)) => a == b,
            (Int(a), Int(b)) => a == b,
            (Real(a), Real(b)) => a.to_bits() == b.to_bits(),
            (Str(a), Str(b)) => a == b,
            (List(a), List(b)) => a == b,
            (Matrix(a), Matrix(b)) => {
                a.rows() == b.rows()
                    && a.cols() == b.cols()
                    && a.as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Unit => "unit",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Real(_) => "real",
            Value::Str(_) => "str",
            Value::List(_) => "list",
            Value::Matrix(_) => "matrix",
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Reals, and integers widened to reals.
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&DenseMatrix> {
        match self {
            Value::Matrix(m) => Some(m),
            _ => None,
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Real(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<DenseMatrix> for Value {
    fn from(m: DenseMatrix) -> Self {
        Value::Matrix(m)
    }
}

impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::List(v)
    }
}

/// What a worker reports about itself during the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerIdentity {
    pub host: String,
    pub os: String,
    pub process: u32,
    pub version: String,
}

/// Worker descriptor: the handshake identity plus the master-assigned id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlaveInfo {
    pub id: u64,
    pub host: String,
    pub os: String,
    pub process: u32,
    pub version: String,
}

impl SlaveInfo {
    pub fn new(id: u64, identity: WorkerIdentity) -> Self {
        Self {
            id,
            host: identity.host,
            os: identity.os,
            process: identity.process,
            version: identity.version,
        }
    }

    /// Reads the `[host, os, process, version, ..]` list returned by the
    /// `worker_info` task.
    pub fn from_value(id: u64, value: &Value) -> Option<Self> {
        let items = value.as_list()?;
        let text = |i: usize| items.get(i).and_then(Value::as_str).map(str::to_owned);
        Some(Self {
            id,
            host: text(0)?,
            os: text(1)?,
            process: u32::try_from(items.get(2)?.as_int()?).ok()?,
            version: text(3)?,
        })
    }
}

/// Result carried by `TaskResult`.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Value(Value),
    /// The handler ran and reported a failure.
    Failed(String),
    /// The worker has no handler under the submitted name.
    UnknownTask(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u32,
    },
    HelloAck(WorkerIdentity),
    EnvExport {
        scope: String,
        bindings: Vec<(String, Value)>,
    },
    /// Acknowledges an `EnvExport`; carries the worker's binding count.
    EnvAck {
        stored: u32,
    },
    TaskSubmit {
        task_id: u64,
        name: String,
        args: Vec<Value>,
    },
    TaskResult {
        task_id: u64,
        outcome: TaskOutcome,
    },
    Shutdown,
    ProtoError(String),
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::HelloAck(_) => "HelloAck",
            Message::EnvExport { .. } => "EnvExport",
            Message::EnvAck { .. } => "EnvAck",
            Message::TaskSubmit { .. } => "TaskSubmit",
            Message::TaskResult { .. } => "TaskResult",
            Message::Shutdown => "Shutdown",
            Message::ProtoError(_) => "ProtoError",
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---- encoding ----

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    // lengths above u32::MAX cannot fit in a frame anyway; the frame check
    // rejects the message before it is sent
    put_u32(out, u32::try_from(len).unwrap_or(u32::MAX));
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_len(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &Value) {
    match v {
        Value::Unit => out.push(tag::UNIT),
        Value::Bool(b) => {
            out.push(tag::BOOL);
            out.push(u8::from(*b));
        }
        Value::Int(i) => {
            out.push(tag::INT);
            out.extend_from_slice(&i.to_be_bytes());
        }
        Value::Real(x) => {
            out.push(tag::REAL);
            out.extend_from_slice(&x.to_bits().to_be_bytes());
        }
        Value::Str(s) => {
            out.push(tag::STR);
            put_str(out, s);
        }
        Value::List(items) => {
            out.push(tag::LIST);
            put_len(out, items.len());
            for item in items {
                put_value(out, item);
            }
        }
        Value::Matrix(m) => {
            out.push(tag::MATRIX);
            put_len(out, m.rows());
            put_len(out, m.cols());
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_bits().to_be_bytes());
            }
        }
    }
}

/// Canonical byte encoding of a value (no frame).
pub fn encode_value(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    put_value(&mut out, v);
    out
}

fn encode_payload(m: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match m {
        Message::Hello { version } => {
            out.push(tag::HELLO);
            put_u32(&mut out, *version);
        }
        Message::HelloAck(id) => {
            out.push(tag::HELLO_ACK);
            put_str(&mut out, &id.host);
            put_str(&mut out, &id.os);
            put_u32(&mut out, id.process);
            put_str(&mut out, &id.version);
        }
        Message::EnvExport { scope, bindings } => {
            out.push(tag::ENV_EXPORT);
            put_str(&mut out, scope);
            put_len(&mut out, bindings.len());
            for (name, value) in bindings {
                put_str(&mut out, name);
                put_value(&mut out, value);
            }
        }
        Message::EnvAck { stored } => {
            out.push(tag::ENV_ACK);
            put_u32(&mut out, *stored);
        }
        Message::TaskSubmit { task_id, name, args } => {
            out.push(tag::TASK_SUBMIT);
            out.extend_from_slice(&task_id.to_be_bytes());
            put_str(&mut out, name);
            put_len(&mut out, args.len());
            for a in args {
                put_value(&mut out, a);
            }
        }
        Message::TaskResult { task_id, outcome } => {
            out.push(tag::TASK_RESULT);
            out.extend_from_slice(&task_id.to_be_bytes());
            match outcome {
                TaskOutcome::Value(v) => {
                    out.push(tag::OUTCOME_VALUE);
                    put_value(&mut out, v);
                }
                TaskOutcome::Failed(text) => {
                    out.push(tag::OUTCOME_FAILED);
                    put_str(&mut out, text);
                }
                TaskOutcome::UnknownTask(name) => {
                    out.push(tag::OUTCOME_UNKNOWN_TASK);
                    put_str(&mut out, name);
                }
            }
        }
        Message::Shutdown => out.push(tag::SHUTDOWN),
        Message::ProtoError(text) => {
            out.push(tag::PROTO_ERROR);
            put_str(&mut out, text);
        }
    }
    out
}

/// Encodes one message as a complete frame.
pub fn encode_message(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    let payload = encode_payload(m);
    if payload.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::OversizeFrame(payload.len()));
    }
    let mut frame = Vec::with_capacity(4 + payload.len());
    put_len(&mut frame, payload.len());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Encodes `m` and writes the frame, flushing the sink.
pub fn write_message<W: Write>(w: &mut W, m: &Message) -> Result<(), ProtocolError> {
    let frame = encode_message(m)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

// ---- decoding ----

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(malformed(format!(
                "payload ends early: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> Result<String, ProtocolError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed("string is not valid UTF-8"))
    }

    /// Element count for a sequence whose elements occupy at least
    /// `min_size` bytes each; rejects counts the payload cannot hold.
    fn count(&mut self, min_size: usize) -> Result<usize, ProtocolError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_size) > self.remaining() {
            return Err(malformed(format!("count {n} exceeds remaining payload")));
        }
        Ok(n)
    }

    fn value(&mut self, depth: usize) -> Result<Value, ProtocolError> {
        let t = self.u8()?;
        Ok(match t {
            tag::UNIT => Value::Unit,
            tag::BOOL => match self.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(malformed(format!("invalid bool byte {b:#04x}"))),
            },
            tag::INT => Value::Int(self.u64()? as i64),
            tag::REAL => Value::Real(self.f64()?),
            tag::STR => Value::Str(self.str()?),
            tag::LIST => {
                if depth >= MAX_LIST_DEPTH {
                    return Err(malformed(format!("list nesting exceeds {MAX_LIST_DEPTH}")));
                }
                let n = self.count(1)?;
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Value::List(items)
            }
            tag::MATRIX => {
                let rows = self.u32()? as usize;
                let cols = self.u32()? as usize;
                let len = rows
                    .checked_mul(cols)
                    .filter(|len| len.saturating_mul(8) <= self.remaining())
                    .ok_or_else(|| malformed(format!("matrix {rows}x{cols} exceeds remaining payload")))?;
                let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
                Value::Matrix(DenseMatrix::new(rows, cols, data).map_err(|e| malformed(e.to_string()))?)
            }
            other => return Err(malformed(format!("unknown value tag {other:#04x}"))),
        })
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Decodes a value produced by [`encode_value`]; the whole slice must be
/// consumed.
pub fn decode_value(bytes: &[u8]) -> Result<Value, ProtocolError> {
    let mut c = Cursor::new(bytes);
    let v = c.value(0)?;
    c.finish()?;
    Ok(v)
}

/// Decodes a frame payload (without its length prefix).
pub fn decode_payload(payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut c = Cursor::new(payload);
    let m = match c.u8()? {
        tag::HELLO => Message::Hello { version: c.u32()? },
        tag::HELLO_ACK => Message::HelloAck(WorkerIdentity {
            host: c.str()?,
            os: c.str()?,
            process: c.u32()?,
            version: c.str()?,
        }),
        tag::ENV_EXPORT => {
            let scope = c.str()?;
            // a binding is at least a 4-byte name length and a 1-byte tag
            let n = c.count(5)?;
            let mut bindings = Vec::with_capacity(n);
            for _ in 0..n {
                let name = c.str()?;
                bindings.push((name, c.value(0)?));
            }
            Message::EnvExport { scope, bindings }
        }
        tag::ENV_ACK => Message::EnvAck { stored: c.u32()? },
        tag::TASK_SUBMIT => {
            let task_id = c.u64()?;
            let name = c.str()?;
            let n = c.count(1)?;
            let args = (0..n).map(|_| c.value(0)).collect::<Result<Vec<_>, _>>()?;
            Message::TaskSubmit { task_id, name, args }
        }
        tag::TASK_RESULT => {
            let task_id = c.u64()?;
            let outcome = match c.u8()? {
                tag::OUTCOME_VALUE => TaskOutcome::Value(c.value(0)?),
                tag::OUTCOME_FAILED => TaskOutcome::Failed(c.str()?),
                tag::OUTCOME_UNKNOWN_TASK => TaskOutcome::UnknownTask(c.str()?),
                other => return Err(malformed(format!("unknown outcome tag {other:#04x}"))),
            };
            Message::TaskResult { task_id, outcome }
        }
        tag::SHUTDOWN => Message::Shutdown,
        tag::PROTO_ERROR => Message::ProtoError(c.str()?),
        other => return Err(malformed(format!("unknown message tag {other:#04x}"))),
    };
    c.finish()?;
    Ok(m)
}

// Fills `buf`, returning how many bytes arrived before end of stream.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Reads exactly one frame from `r` and decodes it.
pub fn decode_message<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let mut prefix = [0u8; 4];
    let got = read_full(r, &mut prefix)?;
    if got < 4 {
        return Err(ProtocolError::TruncatedFrame {
            expected: 4,
            received: got,
            in_prefix: true,
        });
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::OversizeFrame(len));
    }
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got < len {
        return Err(ProtocolError::TruncatedFrame {
            expected: len,
            received: got,
            in_prefix: false,
        });
    }
    decode_payload(&payload)
}
