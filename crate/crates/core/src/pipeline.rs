//! The demo workflow: three tridiagonal matrices, two of them produced by
//! workers through the file channel, multiplied and diagonalized on the
//! master.
//!
//! Host configuration is a line-oriented text file:
//!
//! ```text
//! # comment
//! local  parkernel-worker
//! remote tcmpxeon ssh -e none `1` parkernel-worker --host-name `1`
//! ```

use std::fmt::{self, Write as _};
use std::path::Path;
use std::process::ExitStatus;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::linalg::{self, chop, eig_qr, mat_mul, DenseMatrix, EigenSet, LinalgError, TridiagonalSpec, CHOP_EPS};
use crate::master::{slave_table, Bindings, Master, MasterError, SlaveHandle, Targets};
use crate::protocol::Value;
use crate::transport::Endpoint;
use crate::worker::ORDER_BINDING;

/// Scope name used for the exported bindings.
pub const ENV_SCOPE: &str = "Global";
pub const DATA_FILES: [&str; 2] = ["data1.dat", "data2.dat"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("configuration defines no endpoints")]
    Empty,
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    endpoints: Vec<Endpoint>,
}

impl ClusterConfig {
    pub fn new(endpoints: Vec<Endpoint>) -> Result<Self, ConfigError> {
        if endpoints.is_empty() {
            return Err(ConfigError::Empty);
        }
        Ok(Self { endpoints })
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        parse_config(&text)
    }
}

/// Splits off the first whitespace-delimited token.
fn next_token(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    if s.is_empty() {
        return None;
    }
    let end = s.find(char::is_whitespace).unwrap_or(s.len());
    Some((&s[..end], s[end..].trim()))
}

pub fn parse_config(text: &str) -> Result<ClusterConfig, ConfigError> {
    let mut endpoints = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let bad = |reason: &str| ConfigError::BadLine {
            line,
            reason: reason.to_owned(),
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (role, rest) = next_token(trimmed).expect("line is non-empty");
        let endpoint = match role {
            "local" => {
                if rest.is_empty() {
                    return Err(bad("missing template"));
                }
                Endpoint::local(rest)
            }
            "remote" => {
                let (host, template) = next_token(rest).ok_or_else(|| bad("missing host"))?;
                if template.is_empty() {
                    return Err(bad("missing template"));
                }
                Endpoint::remote(host, template).map_err(|e| bad(&e.to_string()))?
            }
            other => return Err(bad(&format!("unknown role `{other}`"))),
        };
        endpoints.push(endpoint);
    }
    ClusterConfig::new(endpoints)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSpec {
    pub ns: usize,
    pub specs: [TridiagonalSpec; 3],
    pub chop_eps: f64,
}

impl WorkflowSpec {
    /// The three parameter sets of the reference workflow at order `ns`.
    pub fn standard(ns: usize) -> Self {
        Self {
            ns,
            specs: [
                TridiagonalSpec::new(ns, 0.0, 1.2, 2.1),
                TridiagonalSpec::new(ns, 0.0, 2.6, 1.8),
                TridiagonalSpec::new(ns, 0.0, 2.0, 3.0),
            ],
            chop_eps: CHOP_EPS,
        }
    }

    pub fn with_chop(mut self, eps: f64) -> Self {
        self.chop_eps = eps;
        self
    }

    fn validate(&self) -> Result<(), String> {
        if self.ns == 0 {
            return Err("ns must be at least 1".into());
        }
        if let Some(s) = self.specs.iter().find(|s| s.n != self.ns) {
            return Err(format!("matrix spec has order {}, expected {}", s.n, self.ns));
        }
        if !(self.chop_eps.is_finite() && self.chop_eps >= 0.0) {
            return Err(format!(
                "chop epsilon must be finite and non-negative, got {}",
                self.chop_eps
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Precondition,
    Launch,
    ExportEnvironment,
    BuildLocal,
    ExportData,
    ReadData,
    Multiply,
    Eigenvalues,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Precondition => "precondition",
            Stage::Launch => "launch",
            Stage::ExportEnvironment => "export_environment",
            Stage::BuildLocal => "build_local",
            Stage::ExportData => "export_data",
            Stage::ReadData => "read_data",
            Stage::Multiply => "multiply",
            Stage::Eigenvalues => "eigenvalues",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("workflow failed at stage {stage}: {reason}")]
pub struct WorkflowError {
    pub stage: Stage,
    pub reason: String,
}

fn at(stage: Stage) -> impl Fn(String) -> WorkflowError {
    move |reason| WorkflowError { stage, reason }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub spec: WorkflowSpec,
    pub product: DenseMatrix,
    pub eigenvalues: EigenSet,
    pub timings: Vec<(Stage, Duration)>,
    pub total: Duration,
    pub workers: String,
    pub exit_statuses: Vec<(u64, ExitStatus)>,
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "eigenvalues of mat1.mat2.mat3 (ns = {}, chop = {:e})",
            self.spec.ns, self.spec.chop_eps
        );
        let _ = writeln!(out, "{:>4}  {:>24}  {:>24}", "k", "re", "im");
        for (k, z) in self.eigenvalues.values().iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>4}  {:>24}  {:>24}",
                k + 1,
                crate::worker::records::format_number(z.re),
                crate::worker::records::format_number(z.im)
            );
        }
        out.push('\n');
        out.push_str("timing\n");
        for (stage, d) in &self.timings {
            let _ = writeln!(out, "  {:<20} {:>10.3} ms", stage.to_string(), d.as_secs_f64() * 1e3);
        }
        let _ = writeln!(out, "  {:<20} {:>10.3} ms", "total", self.total.as_secs_f64() * 1e3);
        out.push('\n');
        out.push_str("workers\n");
        out.push_str(&self.workers);
        out
    }
}

/// Runs the workflow on the first two endpoints of `cfg`.
///
/// Workers write their data files relative to their own working directory.
/// All launched workers are shut down before this returns, on success or
/// failure.
pub fn run_workflow(cfg: &ClusterConfig, w: &WorkflowSpec) -> Result<Report, WorkflowError> {
    let start = Instant::now();
    w.validate().map_err(at(Stage::Precondition))?;
    if cfg.endpoints.len() < 2 {
        return Err(at(Stage::Precondition)(format!(
            "workflow needs at least 2 endpoints, config has {}",
            cfg.endpoints.len()
        )));
    }

    let master = Master::new();
    let mut timings = Vec::new();
    let result = drive(&master, cfg, w, &mut timings);
    let exit_statuses = master.close_slaves();
    let (product, eigenvalues, workers) = result?;
    Ok(Report {
        spec: w.clone(),
        product,
        eigenvalues,
        timings,
        total: start.elapsed(),
        workers,
        exit_statuses,
    })
}

fn timed<T>(
    timings: &mut Vec<(Stage, Duration)>,
    stage: Stage,
    f: impl FnOnce() -> Result<T, String>,
) -> Result<T, WorkflowError> {
    let t = Instant::now();
    let out = f().map_err(at(stage));
    timings.push((stage, t.elapsed()));
    out
}

fn drive(
    master: &Master,
    cfg: &ClusterConfig,
    w: &WorkflowSpec,
    timings: &mut Vec<(Stage, Duration)>,
) -> Result<(DenseMatrix, EigenSet, String), WorkflowError> {
    let workers: Vec<SlaveHandle> = timed(timings, Stage::Launch, || {
        cfg.endpoints[..2]
            .iter()
            .map(|ep| master.launch_slave(ep).map_err(|e| e.to_string()))
            .collect()
    })?;
    let table = slave_table(&workers);

    timed(timings, Stage::ExportEnvironment, || {
        let ns = i64::try_from(w.ns).map_err(|_| "ns does not fit in an int".to_owned())?;
        let bindings = Bindings::new(ENV_SCOPE).with(ORDER_BINDING, Value::Int(ns));
        for (id, r) in master.export_environment(&bindings, Targets::Subset(&workers)) {
            r.map_err(|e| format!("worker {id}: {e}"))?;
        }
        Ok(())
    })?;

    // local build overlaps the two remote export/read round trips
    let t_remote = Instant::now();
    let (mat1, remote) = thread::scope(|s| {
        let jobs: Vec<_> = workers
            .iter()
            .zip(DATA_FILES)
            .zip(&w.specs[1..])
            .map(|((h, file), spec)| s.spawn(move || fetch_via_file(master, h, file, spec)))
            .collect();
        let t = Instant::now();
        let mat1 = linalg::build_tridiagonal(&w.specs[0]).map_err(|e| e.to_string());
        let local_time = t.elapsed();
        let remote: Vec<_> = jobs
            .into_iter()
            .map(|j| j.join().expect("dispatch thread panicked"))
            .collect();
        ((mat1, local_time), remote)
    });
    timings.push((Stage::BuildLocal, mat1.1));
    let mat1 = mat1.0.map_err(at(Stage::BuildLocal))?;
    let mut fetched = Vec::with_capacity(2);
    for r in remote {
        fetched.push(r?);
    }
    timings.push((Stage::ReadData, t_remote.elapsed()));
    let [mat2, mat3]: [DenseMatrix; 2] = fetched.try_into().expect("two workers");

    let product = timed(timings, Stage::Multiply, || {
        multiply3(&mat1, &mat2, &mat3).map_err(|e| e.to_string())
    })?;
    let eigenvalues = timed(timings, Stage::Eigenvalues, || {
        eig_qr(&product)
            .map(|e| chop(&e, w.chop_eps))
            .map_err(|e| e.to_string())
    })?;
    Ok((product, eigenvalues, table))
}

/// Has the worker build and write one matrix, then read it back.
fn fetch_via_file(
    master: &Master,
    h: &SlaveHandle,
    file: &str,
    spec: &TridiagonalSpec,
) -> Result<DenseMatrix, WorkflowError> {
    let describe = |e: MasterError| format!("worker {} ({}): {e}", h.id(), h.info().host);
    master
        .remote_evaluate(
            h,
            "export_tridiagonal",
            vec![file.into(), spec.diag.into(), spec.sup.into(), spec.sub.into()],
        )
        .map_err(describe)
        .map_err(at(Stage::ExportData))?;
    let value = master
        .remote_evaluate(h, "read_records", vec![file.into()])
        .map_err(describe)
        .map_err(at(Stage::ReadData))?;
    match value {
        Value::Matrix(m) if m.rows() == spec.n && m.cols() == spec.n => Ok(m),
        Value::Matrix(m) => Err(at(Stage::ReadData)(format!(
            "worker {} returned a {}x{} matrix, expected {}x{}",
            h.id(),
            m.rows(),
            m.cols(),
            spec.n,
            spec.n
        ))),
        other => Err(at(Stage::ReadData)(format!(
            "worker {} returned {}, expected a matrix",
            h.id(),
            other.kind()
        ))),
    }
}

fn multiply3(a: &DenseMatrix, b: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    mat_mul(&mat_mul(a, b)?, c)
}

/// The same computation in one process, without workers.
pub fn sequential_reference(w: &WorkflowSpec) -> Result<(DenseMatrix, EigenSet), LinalgError> {
    let [m1, m2, m3] = [0, 1, 2].map(|k| linalg::build_tridiagonal(&w.specs[k]));
    let product = multiply3(&m1?, &m2?, &m3?)?;
    let eigenvalues = chop(&eig_qr(&product)?, w.chop_eps);
    Ok((product, eigenvalues))
}

#[derive(Debug)]
pub struct TableReport {
    pub table: String,
    /// Endpoints that failed to launch, by config position (1-based).
    pub failures: Vec<(usize, MasterError)>,
}

impl TableReport {
    pub fn render(&self) -> String {
        let mut out = self.table.clone();
        for (pos, e) in &self.failures {
            let _ = writeln!(out, "endpoint {pos}: {e}");
        }
        out
    }
}

/// Launches every endpoint, renders the worker table and shuts them down.
pub fn cmd_table(cfg: &ClusterConfig) -> TableReport {
    let master = Master::new();
    let mut failures = Vec::new();
    for (k, ep) in cfg.endpoints.iter().enumerate() {
        if let Err(e) = master.launch_slave(ep) {
            failures.push((k + 1, e));
        }
    }
    let table = slave_table(&master.slaves());
    master.close_slaves();
    TableReport { table, failures }
}
