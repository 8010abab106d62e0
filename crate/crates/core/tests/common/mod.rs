#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use parkernel::master::SlaveHandle;
use parkernel::transport::Endpoint;

pub const WORKER: &str = env!("CARGO_BIN_EXE_parkernel-worker");

/// Local endpoint whose worker runs inside `dir`.
pub fn local_in(dir: &Path) -> Endpoint {
    Endpoint::local(format!("cd '{}' && '{WORKER}'", dir.display()))
}

/// Local endpoint whose worker reports `host` as its host name.
pub fn local_as(dir: &Path, host: &str) -> Endpoint {
    Endpoint::local(format!("cd '{}' && '{WORKER}' --host-name {host}", dir.display()))
}

/// Remote endpoint backed by a local shell: the placeholder is substituted
/// with the host name and handed to the worker as its reported host.
pub fn remote_standin(dir: &Path, host: &str) -> Endpoint {
    Endpoint::remote(host, format!("cd '{}' && '{WORKER}' --host-name `1`", dir.display())).unwrap()
}

/// One-letter process state from /proc, or None if the pid is gone.
pub fn proc_state(pid: u32) -> Option<char> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let after = &stat[stat.rfind(')')? + 1..];
    after.trim_start().chars().next()
}

pub fn parent_pid(pid: u32) -> Option<u32> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let after = &stat[stat.rfind(')')? + 1..];
    after.split_whitespace().nth(1)?.parse().ok()
}

/// True once the process no longer runs; a zombie left for another parent
/// counts as gone.
pub fn wait_gone(pid: u32, within: Duration) -> bool {
    let end = Instant::now() + within;
    loop {
        match proc_state(pid) {
            None | Some('Z') | Some('X') => return true,
            _ if Instant::now() >= end => return false,
            _ => thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Our direct children must be reaped, not merely dead.
pub fn assert_reaped(pid: u32) {
    if let Some(state) = proc_state(pid) {
        assert_ne!(
            parent_pid(pid),
            Some(std::process::id()),
            "child {pid} still present in state {state}"
        );
    }
}

/// After teardown: the launcher shell was reaped and the worker is gone.
pub fn assert_torn_down(handles: &[SlaveHandle]) {
    for h in handles {
        assert_reaped(h.launcher_pid());
        assert!(
            wait_gone(h.info().process, Duration::from_secs(2)),
            "worker pid {} still running",
            h.info().process
        );
    }
}
