//! `multisk` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
//! The last line on stdout is always a JSON object with a `status` field.

mod bench;
mod model_file;
mod solve;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "multisk", version, about = "Multi-assignment Sinkhorn solvers and a toy multi-modal trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve an assignment problem for a similarity matrix CSV.
    Solve(solve::SolveArgs),
    /// Exact many-to-many assignment by exhaustive search (small inputs only).
    Oracle(solve::OracleArgs),
    /// Train the toy model and write per-epoch metrics.
    Train(train::TrainArgs),
    /// Evaluate a saved model on the held-out split of its config.
    Eval(train::EvalArgs),
    /// Train every ablation variant on the same data.
    Ablate(train::AblateArgs),
    /// Time solver convergence over sizes and regularization strengths.
    Bench(bench::BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Multi,
    Vanilla,
    Modified,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Multi => "multi",
            SolverKind::Vanilla => "vanilla",
            SolverKind::Modified => "modified",
        }
    }
}

/// A failed run: the exit code plus the summary to print.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// Non-convergence or divergence. Carries the summary fields gathered so far.
    Numerical(String, Value),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(..) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn summary(&self) -> Value {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Numerical(m, _) => ("numerical", m),
            CliError::Io(m) => ("io", m),
        };
        let mut out = json!({ "status": "error", "error": kind, "message": msg });
        if let CliError::Numerical(_, Value::Object(extra)) = self {
            for (k, v) in extra {
                out[k] = v.clone();
            }
        }
        out
    }
}

impl From<multisk::MatrixIoError> for CliError {
    fn from(e: multisk::MatrixIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn write_file(path: &PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                println!("{}", json!({ "status": "ok" }));
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            println!("{}", CliError::Usage(first.to_string()).summary());
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Solve(a) => solve::run_solve(&a),
        Command::Oracle(a) => solve::run_oracle(&a),
        Command::Train(a) => train::run_train(&a),
        Command::Eval(a) => train::run_eval(&a),
        Command::Ablate(a) => train::run_ablate(&a),
        Command::Bench(a) => bench::run_bench(&a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (CliError::Usage(m) | CliError::Numerical(m, _) | CliError::Io(m)) = &e;
            eprintln!("error: {m}");
            println!("{}", e.summary());
            ExitCode::from(e.code())
        }
    }
}
