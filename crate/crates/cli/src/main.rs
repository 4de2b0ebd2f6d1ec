//! `lake`: command-line front end for a lakekernel data directory.
//!
//! Exit codes: 0 success, 1 domain failure (denied, conflict, failed run),
//! 2 usage error.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "lake",
    version,
    about = "Versioned tables, transactional pipeline runs and governance"
)]
pub struct Cli {
    /// Data directory.
    #[arg(
        long,
        global = true,
        default_value = "./.lakekernel",
        env = "LAKE_DATA_DIR"
    )]
    pub data_dir: PathBuf,
    /// Policy file. Defaults to `<data-dir>/policy.toml`; a missing file denies everything.
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
    /// Principal to act as.
    #[arg(long = "as", global = true, env = "LAKE_PRINCIPAL")]
    pub principal: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create the data directory, root commit and main branch.
    Init,
    #[command(subcommand)]
    Branch(BranchCmd),
    /// First-parent history of a ref, newest first.
    Log {
        #[arg(default_value = "main")]
        r#ref: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Table-level differences between two refs.
    Diff { a: String, b: String },
    #[command(subcommand)]
    Table(TableCmd),
    /// Run a query against one pinned commit.
    Query {
        sql: String,
        #[arg(long = "ref", default_value = "main")]
        r#ref: String,
    },
    /// Run a pipeline file transactionally against a branch.
    Run {
        file: PathBuf,
        #[arg(long, default_value = "main")]
        branch: String,
        /// Inject a failure right after this node commits.
        #[arg(long)]
        fail_after: Option<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Merge a ref into a branch.
    Merge {
        source: String,
        #[arg(long)]
        into: String,
    },
    #[command(subcommand)]
    Verifier(VerifierCmd),
    /// Drive concurrent agents against a scratch lake and record a trace.
    Simulate(SimulateArgs),
    /// Check a recorded trace for isolation and serializability.
    Check {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Try to repair a failed run with a list of patched pipelines.
    Heal {
        #[arg(long)]
        run: String,
        /// Directory of `*.pipe` files, tried in file-name order.
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, default_value_t = 3)]
        budget: u32,
    },
    /// Merge a verified repair proposal into its target.
    Approve {
        #[arg(long)]
        proposal: String,
    },
    #[command(subcommand)]
    Runs(RunsCmd),
    #[command(subcommand)]
    Proposals(ProposalsCmd),
}

#[derive(Subcommand, Debug)]
pub enum BranchCmd {
    Create {
        name: String,
        #[arg(long, default_value = "main")]
        from: String,
    },
    List,
    Delete {
        name: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum TableCmd {
    /// Load a file in the canonical table format and commit it.
    Import {
        name: String,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "main")]
        branch: String,
        #[arg(long)]
        message: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum VerifierCmd {
    Register {
        name: String,
        /// Glob over pipeline names.
        #[arg(long)]
        pipeline: String,
        /// Query returning exactly one bool column.
        #[arg(long)]
        check: String,
    },
    List,
    /// Re-evaluate the verifiers of a run against its temp branch.
    Run {
        run_id: String,
    },
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 4)]
    pub agents: usize,
    #[arg(long, default_value_t = 20)]
    pub ops: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub w_read: u32,
    #[arg(long, default_value_t = 2)]
    pub w_run: u32,
    #[arg(long, default_value_t = 1)]
    pub w_fault: u32,
    #[arg(long, default_value_t = 2)]
    pub w_merge: u32,
}

#[derive(Subcommand, Debug)]
pub enum RunsCmd {
    List,
    Show {
        run_id: String,
    },
    /// Delete a run's temp branch.
    Cleanup {
        run_id: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum ProposalsCmd {
    List,
    /// By id or branch name.
    Show {
        key: String,
    },
}

/// Prints a line, ignoring a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match commands::execute(cli) {
        Ok(out) => {
            if json {
                emit(&serde_json::to_string_pretty(&out.json).expect("json values serialize"));
            } else if !out.text.is_empty() {
                emit(out.text.trim_end());
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            if json {
                let v =
                    serde_json::json!({ "error": { "kind": e.kind(), "message": e.message() } });
                emit(&serde_json::to_string_pretty(&v).expect("json values serialize"));
            } else {
                eprintln!("error: {}", e.message());
            }
            ExitCode::from(e.code())
        }
    }
}
