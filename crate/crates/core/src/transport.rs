//! Worker process launch and the stdio byte channel to each worker.
//!
//! A worker is any command whose standard input and output speak the framed
//! protocol. Local and remote workers differ only in their launch template:
//! a remote template simply routes the worker command through a remote shell
//! such as `ssh`, so nothing above this module branches on location.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{self, Message, ProtocolError};

/// Placeholder replaced by the connection token in launch templates.
pub const PLACEHOLDER: &str = "`1`";

/// How long `close_channel` waits for a worker to exit before killing it.
pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

/// Optional path that receives a copy of every worker's standard error.
pub const WORKER_LOG_ENV: &str = "PARKERNEL_WORKER_LOG";

const STDERR_TAIL_BYTES: usize = 8 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("failed to launch `{command}`: {reason}{}", stderr_suffix(.stderr))]
    SpawnFailed {
        command: String,
        reason: String,
        stderr: String,
    },
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("channel closed by worker")]
    Closed,
    #[error("no message within {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn stderr_suffix(stderr: &str) -> String {
    let s = stderr.trim();
    if s.is_empty() {
        String::new()
    } else {
        format!("; stderr: {s}")
    }
}

/// Launch command template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchSpec {
    template: String,
}

impl LaunchSpec {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
        }
    }

    pub fn template(&self) -> &str {
        &self.template
    }
}

/// Replaces every occurrence of the `` `1` `` placeholder with `token`.
pub fn render_launch_command(spec: &LaunchSpec, connection_token: &str) -> String {
    spec.template.replace(PLACEHOLDER, connection_token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointKind {
    Local,
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    kind: EndpointKind,
    spec: LaunchSpec,
}

impl Endpoint {
    pub fn local(template: impl Into<String>) -> Self {
        Self {
            kind: EndpointKind::Local,
            spec: LaunchSpec::new(template),
        }
    }

    pub fn remote(host: impl Into<String>, template: impl Into<String>) -> Result<Self, TransportError> {
        let host = host.into();
        if host.is_empty() || host.chars().any(char::is_whitespace) {
            return Err(TransportError::InvalidEndpoint(format!(
                "remote host must be a non-empty word, got {host:?}"
            )));
        }
        Ok(Self {
            kind: EndpointKind::Remote(host),
            spec: LaunchSpec::new(template),
        })
    }

    pub fn kind(&self) -> &EndpointKind {
        &self.kind
    }

    pub fn spec(&self) -> &LaunchSpec {
        &self.spec
    }

    /// Token substituted for the placeholder: the host name for remote
    /// endpoints, `localhost` otherwise.
    pub fn connection_token(&self) -> &str {
        match &self.kind {
            EndpointKind::Local => "localhost",
            EndpointKind::Remote(host) => host,
        }
    }
}

/// Live duplex channel to one worker process.
///
/// Frames from the worker are decoded on a dedicated reader thread, which
/// lets callers wait with a deadline. A connection is owned by one handler at
/// a time; dropping it kills the worker.
pub struct Connection {
    child: Child,
    command: String,
    stdin: Option<BufWriter<ChildStdin>>,
    inbox: Receiver<Result<Message, ProtocolError>>,
    stderr_tail: Arc<Mutex<String>>,
    exit: Option<ExitStatus>,
}

/// Starts the endpoint's command with its stdio attached to a new channel.
pub fn spawn(endpoint: &Endpoint, connection_token: &str) -> Result<Connection, TransportError> {
    let command = render_launch_command(&endpoint.spec, connection_token);
    let spawn_failed = |reason: String| TransportError::SpawnFailed {
        command: command.clone(),
        reason,
        stderr: String::new(),
    };
    if command.trim().is_empty() {
        return Err(spawn_failed("empty launch command".into()));
    }

    let mut child = shell_command(&command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| spawn_failed(e.to_string()))?;

    let stdin = child.stdin.take().map(BufWriter::new);
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");

    let (tx, inbox) = mpsc::channel();
    let pid = child.id();
    thread::Builder::new()
        .name(format!("worker-{pid}-reader"))
        .spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = protocol::decode_message(&mut reader);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        })
        .map_err(|e| spawn_failed(e.to_string()))?;

    let stderr_tail = Arc::new(Mutex::new(String::new()));
    let tail = Arc::clone(&stderr_tail);
    let log_path = std::env::var_os(WORKER_LOG_ENV);
    thread::Builder::new()
        .name(format!("worker-{pid}-stderr"))
        .spawn(move || {
            let mut log = log_path.and_then(|p| OpenOptions::new().create(true).append(true).open(p).ok());
            for line in BufReader::new(stderr).lines() {
                let Ok(line) = line else { break };
                if let Some(f) = log.as_mut() {
                    let _ = writeln!(f, "[worker {pid}] {line}");
                }
                let mut t = tail.lock().unwrap_or_else(|e| e.into_inner());
                t.push_str(&line);
                t.push('\n');
                if t.len() > STDERR_TAIL_BYTES {
                    let mut cut = t.len() - STDERR_TAIL_BYTES;
                    while !t.is_char_boundary(cut) {
                        cut += 1;
                    }
                    t.drain(..cut);
                }
            }
        })
        .map_err(|e| spawn_failed(e.to_string()))?;

    log::debug!("spawned worker pid {pid}: {command}");
    Ok(Connection {
        child,
        command,
        stdin,
        inbox,
        stderr_tail,
        exit: None,
    })
}

#[cfg(unix)]
fn shell_command(command: &str) -> Command {
    use std::os::unix::process::CommandExt;

    let mut c = Command::new("sh");
    c.arg("-c").arg(command);
    // own process group, so a forced stop also reaches anything the shell forked
    c.process_group(0);
    c
}

#[cfg(windows)]
fn shell_command(command: &str) -> Command {
    let mut c = Command::new("cmd");
    c.arg("/C").arg(command);
    c
}

impl Connection {
    /// OS process id of the launched command (the shell running the
    /// template, not necessarily the worker itself).
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn stderr_tail(&self) -> String {
        self.stderr_tail.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn send(&mut self, m: &Message) -> Result<(), TransportError> {
        let stdin = self.stdin.as_mut().ok_or(TransportError::Closed)?;
        protocol::write_message(stdin, m).map_err(|e| match e {
            ProtocolError::Io(_) => TransportError::Closed,
            other => other.into(),
        })
    }

    pub fn recv(&mut self) -> Result<Message, TransportError> {
        match self.inbox.recv() {
            Ok(frame) => Self::unwrap_frame(frame),
            Err(_) => Err(TransportError::Closed),
        }
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Message, TransportError> {
        match self.inbox.recv_timeout(timeout) {
            Ok(frame) => Self::unwrap_frame(frame),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn unwrap_frame(frame: Result<Message, ProtocolError>) -> Result<Message, TransportError> {
        frame.map_err(|e| match e {
            e if e.is_clean_eof() => TransportError::Closed,
            ProtocolError::Io(_) => TransportError::Closed,
            other => other.into(),
        })
    }

    /// Exit status if the process has already terminated.
    pub fn try_exit_status(&mut self) -> Option<ExitStatus> {
        if self.exit.is_none() {
            self.exit = self.child.try_wait().ok().flatten();
        }
        self.exit
    }

    fn wait_for_exit(&mut self, limit: Duration) -> Option<ExitStatus> {
        let deadline = Instant::now() + limit;
        loop {
            if let Some(status) = self.try_exit_status() {
                return Some(status);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Classifies a channel that failed before the handshake completed.
    ///
    /// Returns `SpawnFailed` when the launch command itself could not run
    /// (shell exit 126/127) or the remote shell gave up (exit 255); `None`
    /// when the command ran and something else went wrong.
    pub fn diagnose_startup(&mut self) -> Option<TransportError> {
        let status = self.wait_for_exit(Duration::from_secs(2))?;
        let reason = match status.code() {
            Some(127) => "command not found (exit 127)".to_owned(),
            Some(126) => "command not executable (exit 126)".to_owned(),
            Some(255) => "remote shell failed (exit 255)".to_owned(),
            _ => return None,
        };
        // give the stderr thread a moment to drain
        thread::sleep(Duration::from_millis(50));
        Some(TransportError::SpawnFailed {
            command: self.command.clone(),
            reason,
            stderr: self.stderr_tail(),
        })
    }

    /// Kills the process (and its process group) immediately and reaps it.
    pub fn kill(&mut self) -> ExitStatus {
        if let Some(status) = self.try_exit_status() {
            return status;
        }
        kill_process_group(self.child.id());
        let _ = self.child.kill();
        let status = self.child.wait().expect("child was spawned by us");
        self.exit = Some(status);
        self.stdin = None;
        status
    }

    fn shutdown(&mut self, grace: Duration) -> ExitStatus {
        if let Some(status) = self.try_exit_status() {
            self.stdin = None;
            return status;
        }
        let _ = self.send(&Message::Shutdown);
        self.stdin = None;
        match self.wait_for_exit(grace) {
            Some(status) => status,
            None => {
                log::warn!("worker pid {} ignored shutdown for {grace:?}; killing", self.pid());
                self.kill()
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if self.exit.is_none() {
            self.kill();
        }
    }
}

/// Sends SIGKILL to every process in the group led by `pgid`.
///
/// Launched commands lead their own group, so passing [`Connection::pid`]
/// reaches the worker even when the shell did not exec it.
pub fn kill_process_group(pgid: u32) {
    // SAFETY: plain syscall on a process group id
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

/// Sends `Shutdown`, waits up to [`SHUTDOWN_GRACE`] for the worker to exit,
/// then kills it. The process is always reaped before this returns.
pub fn close_channel(mut conn: Connection) -> ExitStatus {
    conn.shutdown(SHUTDOWN_GRACE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_remote_shell_template() {
        let spec = LaunchSpec::new("ssh -e none `1` math -mathlink");
        assert_eq!(render_launch_command(&spec, "lnk7"), "ssh -e none lnk7 math -mathlink");
    }

    #[test]
    fn template_without_placeholder_is_verbatim() {
        let spec = LaunchSpec::new("math -noinit -mathlink");
        assert_eq!(render_launch_command(&spec, "x"), "math -noinit -mathlink");
    }

    #[test]
    fn every_placeholder_replaced() {
        assert_eq!(
            render_launch_command(&LaunchSpec::new("run `1` and `1`"), "a"),
            "run a and a"
        );
        // a lone backtick or a different digit is not a placeholder
        assert_eq!(render_launch_command(&LaunchSpec::new("`2` ` 1`"), "a"), "`2` ` 1`");
    }

    #[test]
    fn remote_host_validation() {
        assert!(Endpoint::remote("", "ssh `1` w").is_err());
        assert!(Endpoint::remote("a b", "ssh `1` w").is_err());
        let e = Endpoint::remote("tcmpxeon", "ssh -e none `1` w").unwrap();
        assert_eq!(e.connection_token(), "tcmpxeon");
        assert_eq!(Endpoint::local("w").connection_token(), "localhost");
    }

    #[test]
    fn missing_binary_is_spawn_failure() {
        let mut conn = spawn(&Endpoint::local("no-such-binary-xyz"), "localhost").unwrap();
        assert!(matches!(conn.recv(), Err(TransportError::Closed)));
        match conn.diagnose_startup() {
            Some(TransportError::SpawnFailed { reason, stderr, .. }) => {
                assert!(reason.contains("127"));
                assert!(stderr.contains("no-such-binary-xyz"), "stderr: {stderr}");
            }
            other => panic!("expected SpawnFailed, got {other:?}"),
        }
    }

    #[test]
    fn empty_template_rejected() {
        assert!(matches!(
            spawn(&Endpoint::local("   "), "localhost"),
            Err(TransportError::SpawnFailed { .. })
        ));
    }

    #[test]
    fn dead_process_closes_promptly() {
        let mut conn = spawn(&Endpoint::local("exit 3"), "localhost").unwrap();
        assert!(conn.recv().is_err());
        let started = Instant::now();
        let status = close_channel(conn);
        assert_eq!(status.code(), Some(3));
        assert!(started.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn recv_deadline() {
        let mut conn = spawn(&Endpoint::local("sleep 5"), "localhost").unwrap();
        assert!(matches!(
            conn.recv_timeout(Duration::from_millis(50)),
            Err(TransportError::Timeout(_))
        ));
        let status = conn.kill();
        assert!(!status.success());
    }

    #[test]
    fn garbage_output_is_a_protocol_error() {
        // 4-byte prefix announcing 2^31 bytes
        let mut conn = spawn(&Endpoint::local("printf '\\200\\000\\000\\000'"), "localhost").unwrap();
        assert!(matches!(
            conn.recv(),
            Err(TransportError::Protocol(ProtocolError::OversizeFrame(_)))
        ));
        close_channel(conn);
    }
}
