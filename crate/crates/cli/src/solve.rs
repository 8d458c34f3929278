use std::path::PathBuf;

use clap::Args;
use multisk::matrix_io::{read_matrix_csv, write_matrix_csv, write_tensor3};
use multisk::{modified_sinkhorn, multi_sinkhorn, solve_exact, vanilla_sinkhorn, OracleError, SolverConfig, SolverError};
use serde_json::{json, Value};

use crate::{CliError, SolverKind};

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Similarity matrix S (N×K, headerless CSV).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k_prime: usize,
    #[arg(long, default_value_t = 0.25)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    /// Where to write the assignment Q.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverKind::Multi)]
    pub solver: SolverKind,
    /// Also write the K×N×K channel tensor (multi solver only).
    #[arg(long)]
    pub dump_tensor: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k_prime: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn solver_error(e: SolverError) -> CliError {
    match e {
        SolverError::NonConvergence { .. } => CliError::Numerical(e.to_string(), Value::Null),
        other => CliError::Usage(other.to_string()),
    }
}

pub fn run_solve(a: &SolveArgs) -> Result<Value, CliError> {
    let cfg = SolverConfig {
        epsilon: a.epsilon,
        max_iters: a.max_iters,
        tol: a.tol,
        mu: a.mu,
        k_prime: a.k_prime,
    };
    // Flag values are checked before touching the file system.
    cfg.validate(None).map_err(solver_error)?;
    if a.dump_tensor.is_some() && a.solver != SolverKind::Multi {
        return Err(CliError::Usage("--dump-tensor requires --solver multi".into()));
    }
    let s = read_matrix_csv(&a.input)?;
    let (n, k) = s.shape();
    cfg.validate(Some(k)).map_err(solver_error)?;

    let (q, report) = match a.solver {
        SolverKind::Multi => {
            let out = multi_sinkhorn(&s, &cfg).map_err(solver_error)?;
            if let Some(path) = &a.dump_tensor {
                write_tensor3(&out.q_prime, path)?;
            }
            (out.q, out.report)
        }
        SolverKind::Modified => {
            let out = modified_sinkhorn(&s, &cfg).map_err(solver_error)?;
            (out.q, out.report)
        }
        SolverKind::Vanilla => {
            // Unit row mass, spread evenly over the columns.
            let rows = vec![1.0; n];
            let cols = vec![n as f64 / k as f64; k];
            let out = vanilla_sinkhorn(&s, &rows, &cols, &cfg).map_err(solver_error)?;
            (out.q, out.report)
        }
    };
    write_matrix_csv(&q, &a.out)?;

    let summary = json!({
        "command": "solve",
        "solver": a.solver.name(),
        "n": n,
        "k": k,
        "k_prime": a.k_prime,
        "iterations": report.iterations_used,
        "final_violation": report.final_violation,
        "converged": report.converged,
        "log_domain": report.log_domain,
        "objective": q.dot(&s),
        "out": a.out.display().to_string(),
    });
    if report.converged {
        let mut s = summary;
        s["status"] = json!("ok");
        Ok(s)
    } else {
        Err(CliError::Numerical(
            format!(
                "no convergence after {} sweeps (violation {:e}); best iterate written",
                report.iterations_used, report.final_violation
            ),
            summary,
        ))
    }
}

pub fn run_oracle(a: &OracleArgs) -> Result<Value, CliError> {
    if a.k_prime == 0 {
        return Err(CliError::Usage("k_prime must be at least 1".into()));
    }
    let s = read_matrix_csv(&a.input)?;
    let res = solve_exact(&s, a.k_prime).map_err(|e| match e {
        OracleError::InfeasibleDivisibility { .. }
        | OracleError::InstanceTooLarge { .. }
        | OracleError::InvalidKPrime { .. }
        | OracleError::EmptyInput => CliError::Usage(e.to_string()),
    })?;
    write_matrix_csv(&res.q_binary, &a.out)?;
    Ok(json!({
        "status": "ok",
        "command": "oracle",
        "n": s.rows(),
        "k": s.cols(),
        "k_prime": a.k_prime,
        "objective": res.objective,
        "candidates_enumerated": res.candidates_enumerated,
        "out": a.out.display().to_string(),
    }))
}
