//! Worker runtime: handshake, binding store and the sequential task loop.

pub mod records;
mod tasks;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;

use thiserror::Error;

use crate::protocol::{self, Message, ProtocolError, TaskOutcome, Value, WorkerIdentity, PROTOCOL_VERSION};

pub use tasks::{register_builtin_tasks, ORDER_BINDING};

/// Version string reported by workers.
pub const WORKER_VERSION: &str = concat!("parkernel ", env!("CARGO_PKG_VERSION"));

/// Task handler: positional arguments plus a read-only view of the bindings.
pub type Handler = Box<dyn Fn(&[Value], &BindingStore) -> Result<Value, String> + Send>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("task `{0}` is already registered")]
    DuplicateName(String),
    #[error("tasks cannot be registered once serving has started")]
    AlreadyServing,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Values exported by the master, keyed by name.
#[derive(Debug, Default)]
pub struct BindingStore {
    scope: String,
    entries: HashMap<String, Value>,
}

impl BindingStore {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.get(name)
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn apply(&mut self, scope: String, bindings: Vec<(String, Value)>) {
        self.scope = scope;
        self.entries.extend(bindings);
    }
}

/// Why `serve` returned.
#[derive(Debug, Clone, PartialEq)]
pub enum ExitReason {
    Shutdown,
    /// The master closed the channel without sending `Shutdown`.
    Disconnected,
    /// The peer broke the protocol; a `ProtoError` was sent if possible.
    ProtocolViolation(String),
}

impl WorkerIdentity {
    /// Identity of the current process. `host` overrides the reported host
    /// name.
    pub fn current(host: Option<String>) -> Self {
        Self {
            host: host.unwrap_or_else(hostname),
            os: std::env::consts::OS.to_owned(),
            process: std::process::id(),
            version: WORKER_VERSION.to_owned(),
        }
    }
}

fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buf is valid for buf.len() bytes
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    let name = if rc == 0 {
        let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
        String::from_utf8_lossy(&buf[..end]).into_owned()
    } else {
        String::new()
    };
    if name.is_empty() {
        "localhost".to_owned()
    } else {
        name
    }
}

pub struct Worker {
    identity: WorkerIdentity,
    tasks: BTreeMap<String, Handler>,
    store: BindingStore,
    started: bool,
}

impl Worker {
    pub fn new(identity: WorkerIdentity) -> Self {
        Self {
            identity,
            tasks: BTreeMap::new(),
            store: BindingStore::default(),
            started: false,
        }
    }

    /// A worker with the standard task pack registered.
    pub fn with_builtin_tasks(identity: WorkerIdentity) -> Self {
        let mut w = Self::new(identity);
        register_builtin_tasks(&mut w).expect("builtin task names are unique");
        w
    }

    pub fn identity(&self) -> &WorkerIdentity {
        &self.identity
    }

    pub fn working_dir() -> PathBuf {
        std::env::current_dir().unwrap_or_default()
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn register_task<F>(&mut self, name: &str, handler: F) -> Result<(), WorkerError>
    where
        F: Fn(&[Value], &BindingStore) -> Result<Value, String> + Send + 'static,
    {
        if self.started {
            return Err(WorkerError::AlreadyServing);
        }
        if self.tasks.contains_key(name) {
            return Err(WorkerError::DuplicateName(name.to_owned()));
        }
        self.tasks.insert(name.to_owned(), Box::new(handler));
        Ok(())
    }

    fn run_task(&self, name: &str, args: &[Value]) -> TaskOutcome {
        let Some(handler) = self.tasks.get(name) else {
            return TaskOutcome::UnknownTask(name.to_owned());
        };
        match panic::catch_unwind(AssertUnwindSafe(|| handler(args, &self.store))) {
            Ok(Ok(v)) => TaskOutcome::Value(v),
            Ok(Err(text)) => TaskOutcome::Failed(text),
            Err(payload) => {
                let text = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".to_owned());
                TaskOutcome::Failed(format!("task `{name}` panicked: {text}"))
            }
        }
    }

    /// Runs the handshake and then the task loop until `Shutdown` or the end
    /// of the input stream.
    pub fn serve<R: Read, W: Write>(&mut self, input: R, output: W) -> Result<ExitReason, WorkerError> {
        self.started = true;
        let mut input = BufReader::new(input);
        let mut output = BufWriter::new(output);

        let violation = |out: &mut BufWriter<W>, text: String| -> Result<ExitReason, WorkerError> {
            log::warn!("protocol violation: {text}");
            let _ = protocol::write_message(out, &Message::ProtoError(text.clone()));
            Ok(ExitReason::ProtocolViolation(text))
        };

        match protocol::decode_message(&mut input) {
            Ok(Message::Hello { version }) if version == PROTOCOL_VERSION => {}
            Ok(Message::Hello { version }) => {
                return violation(
                    &mut output,
                    format!("protocol version mismatch: master speaks {version}, worker speaks {PROTOCOL_VERSION}"),
                )
            }
            Ok(other) => return violation(&mut output, format!("expected Hello, got {other}")),
            Err(e) if e.is_clean_eof() => return Ok(ExitReason::Disconnected),
            Err(e) => return violation(&mut output, e.to_string()),
        }
        protocol::write_message(&mut output, &Message::HelloAck(self.identity.clone()))?;

        loop {
            let msg = match protocol::decode_message(&mut input) {
                Ok(m) => m,
                Err(e) if e.is_clean_eof() => return Ok(ExitReason::Disconnected),
                Err(ProtocolError::Io(e)) => return Err(ProtocolError::Io(e).into()),
                Err(e) => return violation(&mut output, e.to_string()),
            };
            let reply = match msg {
                Message::EnvExport { scope, bindings } => {
                    self.store.apply(scope, bindings);
                    Message::EnvAck {
                        stored: u32::try_from(self.store.len()).unwrap_or(u32::MAX),
                    }
                }
                Message::TaskSubmit { task_id, name, args } => {
                    log::debug!("task {task_id}: {name}");
                    Message::TaskResult {
                        task_id,
                        outcome: self.run_task(&name, &args),
                    }
                }
                Message::Shutdown => return Ok(ExitReason::Shutdown),
                other => return violation(&mut output, format!("unexpected {other} after handshake")),
            };
            protocol::write_message(&mut output, &reply)?;
        }
    }
}
