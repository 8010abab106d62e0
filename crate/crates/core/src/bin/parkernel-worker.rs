//! Worker executable: speaks the framed protocol on stdin/stdout and logs to
//! stderr. Launch templates point at this binary.

use std::io;
use std::process::ExitCode;

use clap::Parser;
use parkernel::protocol::WorkerIdentity;
use parkernel::worker::{ExitReason, Worker};

#[derive(Parser)]
#[command(
    name = "parkernel-worker",
    version,
    about = "parkernel worker process (stdio transport)"
)]
struct Args {
    /// Host name to report instead of the machine's own.
    #[arg(long)]
    host_name: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let args = Args::parse();

    let mut worker = Worker::with_builtin_tasks(WorkerIdentity::current(args.host_name));
    log::info!(
        "worker {} serving in {}",
        std::process::id(),
        Worker::working_dir().display()
    );
    match worker.serve(io::stdin().lock(), io::stdout().lock()) {
        Ok(ExitReason::Shutdown) | Ok(ExitReason::Disconnected) => ExitCode::SUCCESS,
        Ok(ExitReason::ProtocolViolation(text)) => {
            eprintln!("parkernel-worker: {text}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("parkernel-worker: {e}");
            ExitCode::FAILURE
        }
    }
}
