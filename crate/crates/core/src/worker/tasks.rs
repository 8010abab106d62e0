//! The standard task pack every worker executable registers.
//!
//! | task                 | arguments                         | result          |
//! |----------------------|-----------------------------------|-----------------|
//! | `echo`               | any                               | its single argument, or a list |
//! | `sleep_ms`           | Int ms                            | Unit            |
//! | `get_binding`        | Str name                          | bound value     |
//! | `worker_info`        | none                              | [host, os, pid, version, cwd] |
//! | `build_tridiagonal`  | Int n, Real diag, Real sup, Real sub | Matrix       |
//! | `export_tridiagonal` | Str path, Real diag, Real sup, Real sub; order from binding `ns` | Unit |
//! | `export_file`        | Str path, Matrix                  | Unit            |
//! | `read_records`       | Str path                          | Matrix          |

use std::path::Path;
use std::thread;
use std::time::Duration;

use super::{records, BindingStore, Worker, WorkerError};
use crate::linalg::{build_tridiagonal, TridiagonalSpec};
use crate::protocol::Value;

/// Binding that holds the matrix order for `export_tridiagonal`.
pub const ORDER_BINDING: &str = "ns";

fn arity(args: &[Value], n: usize) -> Result<(), String> {
    if args.len() == n {
        Ok(())
    } else {
        Err(format!("expected {n} argument(s), got {}", args.len()))
    }
}

fn int_arg(args: &[Value], i: usize) -> Result<i64, String> {
    args[i]
        .as_int()
        .ok_or_else(|| format!("argument {} must be an int, got {}", i + 1, args[i].kind()))
}

fn real_arg(args: &[Value], i: usize) -> Result<f64, String> {
    args[i]
        .as_real()
        .ok_or_else(|| format!("argument {} must be a number, got {}", i + 1, args[i].kind()))
}

fn str_arg(args: &[Value], i: usize) -> Result<&str, String> {
    args[i]
        .as_str()
        .ok_or_else(|| format!("argument {} must be a string, got {}", i + 1, args[i].kind()))
}

fn order(n: i64) -> Result<usize, String> {
    usize::try_from(n)
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("matrix order must be a positive integer, got {n}"))
}

fn tridiagonal(n: usize, args: &[Value], first: usize) -> Result<Value, String> {
    let spec = TridiagonalSpec::new(
        n,
        real_arg(args, first)?,
        real_arg(args, first + 1)?,
        real_arg(args, first + 2)?,
    );
    build_tridiagonal(&spec).map(Value::Matrix).map_err(|e| e.to_string())
}

pub fn register_builtin_tasks(w: &mut Worker) -> Result<(), WorkerError> {
    let identity = w.identity().clone();

    w.register_task("echo", |args, _| {
        Ok(match args {
            [single] => single.clone(),
            _ => Value::List(args.to_vec()),
        })
    })?;

    w.register_task("sleep_ms", |args, _| {
        arity(args, 1)?;
        let ms = u64::try_from(int_arg(args, 0)?).map_err(|_| "duration must be non-negative".to_owned())?;
        thread::sleep(Duration::from_millis(ms));
        Ok(Value::Unit)
    })?;

    w.register_task("get_binding", |args, store: &BindingStore| {
        arity(args, 1)?;
        let name = str_arg(args, 0)?;
        store
            .get(name)
            .cloned()
            .ok_or_else(|| format!("unknown binding `{name}`"))
    })?;

    w.register_task("worker_info", move |args, _| {
        arity(args, 0)?;
        Ok(Value::List(vec![
            identity.host.clone().into(),
            identity.os.clone().into(),
            Value::Int(i64::from(identity.process)),
            identity.version.clone().into(),
            Worker::working_dir().display().to_string().into(),
        ]))
    })?;

    w.register_task("build_tridiagonal", |args, _| {
        arity(args, 4)?;
        tridiagonal(order(int_arg(args, 0)?)?, args, 1)
    })?;

    w.register_task("export_tridiagonal", |args, store| {
        arity(args, 4)?;
        let path = str_arg(args, 0)?;
        let n = store
            .get(ORDER_BINDING)
            .and_then(Value::as_int)
            .ok_or_else(|| format!("binding `{ORDER_BINDING}` is missing or not an int"))?;
        let Value::Matrix(m) = tridiagonal(order(n)?, args, 1)? else {
            unreachable!("tridiagonal returns a matrix")
        };
        records::export_file(Path::new(path), &m).map_err(|e| e.to_string())?;
        Ok(Value::Unit)
    })?;

    w.register_task("export_file", |args, _| {
        arity(args, 2)?;
        let path = str_arg(args, 0)?;
        let m = args[1]
            .as_matrix()
            .ok_or_else(|| format!("argument 2 must be a matrix, got {}", args[1].kind()))?;
        records::export_file(Path::new(path), m).map_err(|e| e.to_string())?;
        Ok(Value::Unit)
    })?;

    w.register_task("read_records", |args, _| {
        arity(args, 1)?;
        records::read_records(Path::new(str_arg(args, 0)?))
            .map(Value::Matrix)
            .map_err(|e| e.to_string())
    })?;

    Ok(())
}
