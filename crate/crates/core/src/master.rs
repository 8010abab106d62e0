//! Master side: worker registry, handshakes, environment export and
//! synchronous task dispatch.
//!
//! Each worker connection carries at most one outstanding request. Callers
//! targeting the same worker queue up in arrival order; calls to different
//! workers proceed concurrently.

use std::fmt::Write as _;
use std::process::ExitStatus;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, TryLockError};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{Message, SlaveInfo, TaskOutcome, Value, PROTOCOL_VERSION};
use crate::transport::{self, Connection, Endpoint, TransportError, SHUTDOWN_GRACE};

/// Upper bound on the wait for a worker's `HelloAck`.
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasterError {
    #[error(transparent)]
    Spawn(TransportError),
    #[error("handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("worker has no task named `{0}`")]
    UnknownTask(String),
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("transport error on worker {id}: {reason}")]
    Transport { id: u64, reason: String },
    #[error("no live workers")]
    NoLiveWorkers,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// FIFO admission: callers are served strictly in the order they arrived.
#[derive(Default)]
struct TicketGate {
    state: Mutex<(u64, u64)>,
    turn: Condvar,
}

struct Ticket<'a>(&'a TicketGate);

impl TicketGate {
    fn enter(&self) -> Ticket<'_> {
        let mut st = lock(&self.state);
        let mine = st.0;
        st.0 += 1;
        while st.1 != mine {
            st = self.turn.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        Ticket(self)
    }
}

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        lock(&self.0.state).1 += 1;
        self.0.turn.notify_all();
    }
}

struct Link {
    conn: Connection,
    next_task: u64,
}

struct SlaveEntry {
    info: SlaveInfo,
    endpoint: Endpoint,
    launcher_pid: u32,
    alive: AtomicBool,
    gate: TicketGate,
    link: Mutex<Option<Link>>,
}

impl SlaveEntry {
    fn fail(&self, reason: impl Into<String>) -> MasterError {
        MasterError::Transport {
            id: self.info.id,
            reason: reason.into(),
        }
    }

    fn mark_dead(&self, reason: &str) {
        if self.alive.swap(false, Ordering::SeqCst) {
            log::warn!("worker {} marked dead: {reason}", self.info.id);
        }
    }

    /// One request/response exchange on this worker's connection.
    fn exchange(&self, request: &Message, deadline: Option<Duration>) -> Result<Message, MasterError> {
        let _turn = self.gate.enter();
        if !self.alive.load(Ordering::SeqCst) {
            return Err(self.fail("worker is marked dead"));
        }
        let mut guard = lock(&self.link);
        let link = guard.as_mut().ok_or_else(|| self.fail("connection closed"))?;

        let request = match request {
            Message::TaskSubmit { name, args, .. } => {
                link.next_task += 1;
                Message::TaskSubmit {
                    task_id: link.next_task,
                    name: name.clone(),
                    args: args.clone(),
                }
            }
            other => other.clone(),
        };

        let result = link.conn.send(&request).and_then(|()| match deadline {
            Some(d) => link.conn.recv_timeout(d),
            None => link.conn.recv(),
        });
        let reply = match result {
            Ok(reply) => reply,
            Err(e) => {
                let reason = e.to_string();
                self.mark_dead(&reason);
                if matches!(e, TransportError::Timeout(_)) {
                    // state of the in-flight task is unknown; the worker cannot be reused
                    link.conn.kill();
                }
                return Err(self.fail(reason));
            }
        };

        let expected_id = match &request {
            Message::TaskSubmit { task_id, .. } => Some(*task_id),
            _ => None,
        };
        match (&reply, expected_id) {
            (Message::TaskResult { task_id, .. }, Some(id)) if *task_id == id => Ok(reply),
            (Message::EnvAck { .. }, None) => Ok(reply),
            (Message::ProtoError(text), _) => {
                self.mark_dead(text);
                Err(self.fail(format!("worker reported protocol error: {text}")))
            }
            _ => {
                let reason = format!("unexpected reply {reply} to {request}");
                self.mark_dead(&reason);
                Err(self.fail(reason))
            }
        }
    }
}

/// Reference to a registered worker.
#[derive(Clone)]
pub struct SlaveHandle {
    entry: Arc<SlaveEntry>,
}

impl SlaveHandle {
    pub fn id(&self) -> u64 {
        self.entry.info.id
    }

    pub fn info(&self) -> &SlaveInfo {
        &self.entry.info
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.entry.endpoint
    }

    /// Pid of the launched command as seen by the master (the shell that ran
    /// the template).
    pub fn launcher_pid(&self) -> u32 {
        self.entry.launcher_pid
    }

    pub fn is_alive(&self) -> bool {
        self.entry.alive.load(Ordering::SeqCst)
    }
}

impl std::fmt::Debug for SlaveHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlaveHandle")
            .field("id", &self.id())
            .field("host", &self.info().host)
            .field("alive", &self.is_alive())
            .finish()
    }
}

/// Named values exported to workers before tasks run.
#[derive(Debug, Clone, PartialEq)]
pub struct Bindings {
    scope: String,
    entries: Vec<(String, Value)>,
}

impl Bindings {
    pub fn new(scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            entries: Vec::new(),
        }
    }

    /// Adds a binding, replacing any earlier one of the same name.
    pub fn set(&mut self, name: impl Into<String>, value: impl Into<Value>) -> &mut Self {
        let name = name.into();
        let value = value.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.set(name, value);
        self
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }
}

pub enum Targets<'a> {
    All,
    Subset(&'a [SlaveHandle]),
}

/// Per-worker outcome of a broadcast operation, in id order.
pub type Outcomes<T> = Vec<(u64, Result<T, MasterError>)>;

/// Launches workers and dispatches tasks to them.
pub struct Master {
    registry: Mutex<Registry>,
}

struct Registry {
    entries: Vec<Arc<SlaveEntry>>,
    next_id: u64,
}

impl Default for Master {
    fn default() -> Self {
        Self::new()
    }
}

impl Master {
    pub fn new() -> Self {
        Self {
            registry: Mutex::new(Registry {
                entries: Vec::new(),
                next_id: 1,
            }),
        }
    }

    /// Spawns a worker, performs the handshake and registers it.
    ///
    /// A failed launch does not consume an id and leaves no process behind.
    pub fn launch_slave(&self, endpoint: &Endpoint) -> Result<SlaveHandle, MasterError> {
        let mut conn = transport::spawn(endpoint, endpoint.connection_token()).map_err(MasterError::Spawn)?;
        let identity = match handshake(&mut conn) {
            Ok(identity) => identity,
            Err(reason) => {
                let err = match conn.diagnose_startup() {
                    Some(spawn_err) => MasterError::Spawn(spawn_err),
                    None => {
                        let stderr = conn.stderr_tail();
                        let stderr = stderr.trim();
                        if stderr.is_empty() {
                            MasterError::HandshakeFailed(reason)
                        } else {
                            MasterError::HandshakeFailed(format!("{reason}; stderr: {stderr}"))
                        }
                    }
                };
                conn.kill();
                return Err(err);
            }
        };

        let mut reg = lock(&self.registry);
        let id = reg.next_id;
        reg.next_id += 1;
        let entry = Arc::new(SlaveEntry {
            info: SlaveInfo::new(id, identity),
            endpoint: endpoint.clone(),
            launcher_pid: conn.pid(),
            alive: AtomicBool::new(true),
            gate: TicketGate::default(),
            link: Mutex::new(Some(Link { conn, next_task: 0 })),
        });
        reg.entries.push(Arc::clone(&entry));
        log::info!("launched worker {id} on {}", entry.info.host);
        Ok(SlaveHandle { entry })
    }

    /// Live workers in launch order.
    pub fn slaves(&self) -> Vec<SlaveHandle> {
        lock(&self.registry)
            .entries
            .iter()
            .filter(|e| e.alive.load(Ordering::SeqCst))
            .map(|e| SlaveHandle { entry: Arc::clone(e) })
            .collect()
    }

    /// Every registered worker, dead or alive, in launch order.
    pub fn all_slaves(&self) -> Vec<SlaveHandle> {
        lock(&self.registry)
            .entries
            .iter()
            .map(|e| SlaveHandle { entry: Arc::clone(e) })
            .collect()
    }

    pub fn export_environment(&self, bindings: &Bindings, targets: Targets<'_>) -> Outcomes<()> {
        let handles = match targets {
            Targets::All => self.slaves(),
            Targets::Subset(hs) => hs.to_vec(),
        };
        let msg = Message::EnvExport {
            scope: bindings.scope.clone(),
            bindings: bindings.entries.clone(),
        };
        fan_out(&handles, |h| h.entry.exchange(&msg, None).map(|_| ()))
    }

    /// Runs `task` on one worker and blocks until it answers.
    pub fn remote_evaluate(&self, target: &SlaveHandle, task: &str, args: Vec<Value>) -> Result<Value, MasterError> {
        self.remote_evaluate_with_deadline(target, task, args, None)
    }

    /// Like [`Master::remote_evaluate`] but gives up after `deadline`, in
    /// which case the worker is killed and marked dead.
    pub fn remote_evaluate_with_deadline(
        &self,
        target: &SlaveHandle,
        task: &str,
        args: Vec<Value>,
        deadline: Option<Duration>,
    ) -> Result<Value, MasterError> {
        let request = Message::TaskSubmit {
            task_id: 0,
            name: task.to_owned(),
            args,
        };
        match target.entry.exchange(&request, deadline)? {
            Message::TaskResult { outcome, .. } => match outcome {
                TaskOutcome::Value(v) => Ok(v),
                TaskOutcome::Failed(text) => Err(MasterError::TaskFailed(text)),
                TaskOutcome::UnknownTask(name) => Err(MasterError::UnknownTask(name)),
            },
            _ => unreachable!("exchange validates the reply kind"),
        }
    }

    /// Runs `task` on every live worker concurrently.
    pub fn remote_evaluate_all(&self, task: &str, args: Vec<Value>) -> Result<Outcomes<Value>, MasterError> {
        let live = self.slaves();
        if live.is_empty() {
            return Err(MasterError::NoLiveWorkers);
        }
        Ok(fan_out(&live, |h| self.remote_evaluate(h, task, args.clone())))
    }

    /// Shuts down every registered worker and empties the registry.
    ///
    /// Live workers get `Shutdown` and a grace period; anything still running
    /// afterwards is killed. Returns the exit status of each worker.
    pub fn close_slaves(&self) -> Vec<(u64, ExitStatus)> {
        let entries = std::mem::take(&mut lock(&self.registry).entries);
        let mut statuses: Vec<(u64, ExitStatus)> = thread::scope(|s| {
            let jobs: Vec<_> = entries
                .iter()
                .map(|e| {
                    s.spawn(move || {
                        e.alive.store(false, Ordering::SeqCst);
                        let link = take_link(e);
                        link.map(|l| (e.info.id, transport::close_channel(l.conn)))
                    })
                })
                .collect();
            jobs.into_iter()
                .filter_map(|j| j.join().expect("close thread panicked"))
                .collect()
        });
        statuses.sort_by_key(|(id, _)| *id);
        statuses
    }
}

impl Drop for Master {
    fn drop(&mut self) {
        self.close_slaves();
    }
}

/// Takes the connection out of `e`. A caller blocked in a task holds it; if
/// that lasts beyond the shutdown grace period the worker is killed so the
/// call fails and releases the connection.
fn take_link(e: &SlaveEntry) -> Option<Link> {
    let deadline = Instant::now() + SHUTDOWN_GRACE;
    loop {
        match e.link.try_lock() {
            Ok(mut g) => return g.take(),
            Err(TryLockError::Poisoned(p)) => return p.into_inner().take(),
            Err(TryLockError::WouldBlock) => {}
        }
        if Instant::now() >= deadline {
            log::warn!("worker {} busy past shutdown grace; killing", e.info.id);
            transport::kill_process_group(e.launcher_pid);
            return lock(&e.link).take();
        }
        thread::sleep(Duration::from_millis(10));
    }
}

fn handshake(conn: &mut Connection) -> Result<crate::protocol::WorkerIdentity, String> {
    conn.send(&Message::Hello {
        version: PROTOCOL_VERSION,
    })
    .map_err(|e| format!("sending Hello: {e}"))?;
    match conn.recv_timeout(HANDSHAKE_TIMEOUT) {
        Ok(Message::HelloAck(identity)) => {
            if [&identity.host, &identity.os, &identity.version]
                .iter()
                .any(|s| s.is_empty())
            {
                Err("HelloAck has empty identity fields".to_owned())
            } else {
                Ok(identity)
            }
        }
        Ok(Message::ProtoError(text)) => Err(format!("worker refused: {text}")),
        Ok(other) => Err(format!("expected HelloAck, got {other}")),
        Err(e) => Err(format!("waiting for HelloAck: {e}")),
    }
}

fn fan_out<T: Send>(
    handles: &[SlaveHandle],
    op: impl Fn(&SlaveHandle) -> Result<T, MasterError> + Sync,
) -> Outcomes<T> {
    let mut out: Outcomes<T> = thread::scope(|s| {
        let op = &op;
        let jobs: Vec<_> = handles.iter().map(|h| (h.id(), s.spawn(move || op(h)))).collect();
        jobs.into_iter()
            .map(|(id, j)| (id, j.join().expect("dispatch thread panicked")))
            .collect()
    });
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Renders worker descriptors as an aligned text table with the columns
/// ID, host, OS, process and Version, one row per worker in id order.
pub fn slave_table(handles: &[SlaveHandle]) -> String {
    let mut infos: Vec<&SlaveInfo> = handles.iter().map(SlaveHandle::info).collect();
    infos.sort_by_key(|i| i.id);
    render_table(&infos)
}

pub fn render_table(infos: &[&SlaveInfo]) -> String {
    const HEADER: [&str; 5] = ["ID", "host", "OS", "process", "Version"];
    let rows: Vec<[String; 5]> = infos
        .iter()
        .map(|i| {
            [
                i.id.to_string(),
                i.host.clone(),
                i.os.clone(),
                i.process.to_string(),
                i.version.clone(),
            ]
        })
        .collect();
    let mut widths = HEADER.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 5]| {
        let mut l = String::new();
        for (k, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if k + 1 == cells.len() {
                l.push_str(cell);
            } else {
                let _ = write!(l, "{cell:<w$}  ");
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(HEADER);
    for row in &rows {
        line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}
