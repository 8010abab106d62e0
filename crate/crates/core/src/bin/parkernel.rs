use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parkernel::pipeline::{self, ClusterConfig, WorkflowSpec};
use parkernel::worker::records;

const EXIT_WORKFLOW: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "parkernel",
    version,
    about = "Launch workers and run the tridiagonal product workflow"
)]
struct Cli {
    /// Host configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the workflow on the first two configured endpoints.
    Run {
        /// Matrix order.
        #[arg(long, default_value_t = 4, value_name = "N")]
        ns: usize,
        /// Eigenvalue parts below this magnitude are reported as zero.
        #[arg(long, default_value_t = parkernel::linalg::CHOP_EPS, value_name = "EPS")]
        chop: f64,
        /// Also write the product matrix here, in record-file format.
        #[arg(long, value_name = "PATH")]
        emit_matrix: Option<PathBuf>,
    },
    /// Launch every configured endpoint and print the worker table.
    Table,
}

fn load_config(path: Option<PathBuf>) -> Result<ClusterConfig, String> {
    let path = path.ok_or("--config PATH is required")?;
    ClusterConfig::load(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let cfg = match load_config(cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("parkernel: config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    match cli.command {
        Command::Run { ns, chop, emit_matrix } => {
            let spec = WorkflowSpec::standard(ns).with_chop(chop);
            let report = match pipeline::run_workflow(&cfg, &spec) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("parkernel: {e}");
                    return ExitCode::from(EXIT_WORKFLOW);
                }
            };
            print!("{}", report.render());
            if let Some(path) = emit_matrix {
                if let Err(e) = records::export_file(&path, &report.product) {
                    eprintln!("parkernel: {e}");
                    return ExitCode::from(EXIT_WORKFLOW);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Table => {
            let report = pipeline::cmd_table(&cfg);
            print!("{}", report.table);
            for (pos, e) in &report.failures {
                eprintln!("parkernel: endpoint {pos}: {e}");
            }
            if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_WORKFLOW)
            }
        }
    }
}
