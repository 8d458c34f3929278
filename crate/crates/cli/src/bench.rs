use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use multisk::{modified_sinkhorn, multi_sinkhorn, vanilla_sinkhorn, DenseMatrix, SolveReport, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{write_file, CliError, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub n: usize,
    pub k: usize,
}

fn parse_size(s: &str) -> Result<Size, String> {
    let (n, k) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} is not of the form NxK"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(format!("size {s:?} needs positive integer dimensions")),
    };
    Ok(Size { n: dim(n)?, k: dim(k)? })
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated NxK sizes, e.g. 16x8,64x16.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_size)]
    pub sizes: Vec<Size>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.01")]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = SolverKind::Multi)]
    pub solver: SolverKind,
    /// Anchors per sample; defaults to K/2 (at least 1).
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    pub mu: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Results CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sweep violation curves CSV.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
}

struct Job {
    size: Size,
    epsilon: f64,
    repeat: usize,
}

struct Outcome {
    report: SolveReport,
    seconds: f64,
}

/// Uniform[0,1] instance, identical across epsilons for the same size and repeat.
fn instance(seed: u64, size: Size, repeat: usize) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((size.n as u64) << 40) ^ ((size.k as u64) << 20) ^ repeat as u64);
    DenseMatrix::from_fn(size.n, size.k, |_, _| rng.random::<f64>())
}

fn solve(kind: SolverKind, s: &DenseMatrix, cfg: &SolverConfig) -> Result<SolveReport, String> {
    let (n, k) = s.shape();
    let r = match kind {
        SolverKind::Multi => multi_sinkhorn(s, cfg).map(|o| o.report),
        SolverKind::Modified => modified_sinkhorn(s, cfg).map(|o| o.report),
        SolverKind::Vanilla => {
            vanilla_sinkhorn(s, &vec![1.0; n], &vec![n as f64 / k as f64; k], cfg).map(|o| o.report)
        }
    };
    r.map_err(|e| e.to_string())
}

pub fn run_bench(a: &BenchArgs) -> Result<Value, CliError> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if a.epsilons.is_empty() {
        return Err(CliError::Usage("--epsilons needs at least one value".into()));
    }
    let cfg_for = |size: Size, epsilon: f64| SolverConfig {
        epsilon,
        max_iters: a.max_iters,
        tol: a.tol,
        mu: a.mu,
        k_prime: a.k_prime.unwrap_or((size.k / 2).max(1)),
    };
    for &size in &a.sizes {
        for &eps in &a.epsilons {
            cfg_for(size, eps)
                .validate(Some(size.k))
                .map_err(|e| CliError::Usage(format!("{}x{}: {e}", size.n, size.k)))?;
        }
    }

    let mut jobs = Vec::new();
    for &size in &a.sizes {
        for &epsilon in &a.epsilons {
            for repeat in 0..a.repeats {
                jobs.push(Job { size, epsilon, repeat });
            }
        }
    }
    // Each job is independent; results come back in job order.
    let outcomes: Vec<Result<Outcome, String>> = jobs
        .par_iter()
        .map(|j| {
            let s = instance(a.seed, j.size, j.repeat);
            let start = Instant::now();
            let report = solve(a.solver, &s, &cfg_for(j.size, j.epsilon))?;
            Ok(Outcome {
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect();

    let mut table = String::from("solver,n,k,k_prime,epsilon,repeat,iterations,wall_time_s,final_violation,converged\n");
    let mut curves = String::from("solver,n,k,epsilon,repeat,sweep,violation\n");
    let mut unconverged = 0;
    for (j, o) in jobs.iter().zip(outcomes) {
        let o = o.map_err(CliError::Usage)?;
        let r = &o.report;
        unconverged += usize::from(!r.converged);
        let kp = cfg_for(j.size, j.epsilon).k_prime;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{:.6},{:e},{}",
            a.solver.name(),
            j.size.n,
            j.size.k,
            kp,
            j.epsilon,
            j.repeat,
            r.iterations_used,
            o.seconds,
            r.final_violation,
            r.converged
        );
        for (sweep, v) in r.history.iter().enumerate() {
            let _ = writeln!(
                curves,
                "{},{},{},{},{},{},{:e}",
                a.solver.name(),
                j.size.n,
                j.size.k,
                j.epsilon,
                j.repeat,
                sweep + 1,
                v
            );
        }
    }

    match &a.out {
        Some(p) => write_file(p, &table)?,
        None => print!("{table}"),
    }
    if let Some(p) = &a.curve_out {
        write_file(p, &curves)?;
    }
    Ok(json!({
        "status": "ok",
        "command": "bench",
        "solver": a.solver.name(),
        "runs": jobs.len(),
        "unconverged": unconverged,
    }))
}
