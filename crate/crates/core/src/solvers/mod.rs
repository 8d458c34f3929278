//! Entropic assignment solvers.
//!
//! Three solvers share one configuration type:
//!
//! - [`vanilla_sinkhorn`]: classic two-marginal Sinkhorn-Knopp scaling of the
//!   Gibbs kernel `exp(S/ε)`.
//! - [`modified_sinkhorn`]: the same 2D scaling with row sums `K'` and column
//!   sums `N·K'/K`. Cells are not bounded by one, which is why it is only a
//!   baseline for many-to-many assignment.
//! - [`multi_sinkhorn`]: the multi-assignment solver. `S` is lifted to a
//!   `K×N×K` tensor whose first `K'` channels equal `S` and whose remaining
//!   channels equal `μ·S`. The tensor kernel is scaled so that, per channel,
//!   every row sums to one and every column to `N/K`, and so that every
//!   `(sample, anchor)` cell sums to one across channels. Summing the first
//!   `K'` channels yields an `N×K` assignment with row sums `K'`, column sums
//!   `N·K'/K` and entries in `[0, 1]`.
//!
//! All solvers first run with multiplicative scaling on a max-stabilized
//! kernel and restart in the log domain when the kernel's dynamic range is
//! too large or a scaling sum under/overflows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_io::{DenseMatrix, DenseTensor3};

mod anderson;
mod multi;

pub use multi::{build_similarity_tensor, extract_assignment, multi_sinkhorn, multi_sinkhorn_with, Acceleration};

/// `N×K` soft assignment of samples to anchors.
pub type AssignmentMatrix = DenseMatrix;

/// Kernel exponents below this (after max-stabilization) go to the log domain.
const MIN_STABLE_EXPONENT: f64 = -600.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("empty similarity matrix")]
    EmptyInput,
    #[error("marginal length mismatch: expected {expected}, got {found}")]
    MarginalLength { expected: usize, found: usize },
    #[error("marginals must be strictly positive and finite")]
    NonPositiveMarginal,
    #[error("marginal totals differ: rows sum to {rows}, columns sum to {cols}")]
    MarginalMismatch { rows: f64, cols: f64 },
    #[error("no convergence after {iterations} sweeps (violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Entropic regularization weight.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Maximum absolute marginal violation accepted as converged.
    pub tol: f64,
    /// Damping applied to the channels beyond the first `k_prime`.
    pub mu: f64,
    /// Anchors selected per sample.
    pub k_prime: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 1000,
            tol: 1e-6,
            mu: 0.25,
            k_prime: 32,
        }
    }
}

impl SolverConfig {
    /// Checks the scalar invariants. `k` is the number of anchors (columns
    /// of `S`), or `None` to skip the `k_prime ≤ K` check.
    pub fn validate(&self, k: Option<usize>) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad(format!("mu must lie in (0, 1), got {}", self.mu));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.k_prime == 0 {
            return bad("k_prime must be at least 1".into());
        }
        if let Some(k) = k {
            if self.k_prime > k {
                return bad(format!("k_prime {} exceeds anchor count {k}", self.k_prime));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations_used: usize,
    pub final_violation: f64,
    pub converged: bool,
    /// Whether the log-domain path produced the result.
    pub log_domain: bool,
    /// Maximum absolute constraint violation after each full sweep.
    pub history: Vec<f64>,
}

impl SolveReport {
    fn trivial() -> Self {
        Self {
            iterations_used: 0,
            final_violation: 0.0,
            converged: true,
            log_domain: false,
            history: Vec::new(),
        }
    }

    fn check(&self) -> Result<(), SolverError> {
        if self.converged {
            Ok(())
        } else {
            Err(SolverError::NonConvergence {
                iterations: self.iterations_used,
                violation: self.final_violation,
            })
        }
    }
}

/// Result of a 2D scaling solve.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub q: AssignmentMatrix,
    pub report: SolveReport,
}

impl Assignment {
    /// Turns a non-converged result into [`SolverError::NonConvergence`].
    pub fn into_converged(self) -> Result<Self, SolverError> {
        self.report.check().map(|_| self)
    }
}

/// Result of a multi-assignment solve.
#[derive(Debug, Clone)]
pub struct MultiAssignment {
    /// The `K×N×K` channel tensor.
    pub q_prime: DenseTensor3,
    /// Depth-wise sum of the first `k_prime` channels.
    pub q: AssignmentMatrix,
    pub report: SolveReport,
}

impl MultiAssignment {
    pub fn into_converged(self) -> Result<Self, SolverError> {
        self.report.check().map(|_| self)
    }
}

// ---------------------------------------------------------------------------
// 2D scaling

fn validate_marginals(
    s: &DenseMatrix,
    rows: &[f64],
    cols: &[f64],
) -> Result<(), SolverError> {
    if s.rows() == 0 || s.cols() == 0 {
        return Err(SolverError::EmptyInput);
    }
    if rows.len() != s.rows() {
        return Err(SolverError::MarginalLength {
            expected: s.rows(),
            found: rows.len(),
        });
    }
    if cols.len() != s.cols() {
        return Err(SolverError::MarginalLength {
            expected: s.cols(),
            found: cols.len(),
        });
    }
    if rows.iter().chain(cols).any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(SolverError::NonPositiveMarginal);
    }
    let (rt, ct): (f64, f64) = (rows.iter().sum(), cols.iter().sum());
    if (rt - ct).abs() > 1e-9 * rt.max(ct).max(1.0) {
        return Err(SolverError::MarginalMismatch { rows: rt, cols: ct });
    }
    Ok(())
}

/// Classic Sinkhorn-Knopp: scales `exp(S/ε)` to the given row and column
/// marginals. Only `epsilon`, `tol` and `max_iters` of `cfg` are used.
pub fn vanilla_sinkhorn(
    s: &DenseMatrix,
    row_marginals: &[f64],
    col_marginals: &[f64],
    cfg: &SolverConfig,
) -> Result<Assignment, SolverError> {
    validate_scaling_cfg(cfg)?;
    validate_marginals(s, row_marginals, col_marginals)?;
    Ok(scale_2d(s, row_marginals, col_marginals, cfg))
}

/// 2D baseline for many-to-many assignment: row sums `K'`, column sums
/// `N·K'/K`. Entries may exceed one.
pub fn modified_sinkhorn(s: &DenseMatrix, cfg: &SolverConfig) -> Result<Assignment, SolverError> {
    cfg.validate(Some(s.cols()))?;
    if s.rows() == 0 || s.cols() == 0 {
        return Err(SolverError::EmptyInput);
    }
    let (n, k) = s.shape();
    let kp = cfg.k_prime as f64;
    let rows = vec![kp; n];
    let cols = vec![n as f64 * kp / k as f64; k];
    Ok(scale_2d(s, &rows, &cols, cfg))
}

fn validate_scaling_cfg(cfg: &SolverConfig) -> Result<(), SolverError> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(SolverError::InvalidConfig(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 {
        return Err(SolverError::InvalidConfig(
            "tol must be positive and max_iters at least 1".into(),
        ));
    }
    Ok(())
}

/// Row-max-stabilized exponents `(S_ij - max_j S_ij)/ε`.
fn stabilized_exponents(s: &DenseMatrix, eps: f64) -> (Vec<f64>, f64) {
    let (n, k) = s.shape();
    let mut out = Vec::with_capacity(n * k);
    let mut min_exp = 0.0f64;
    for i in 0..n {
        let row = s.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in row {
            let e = (v - m) / eps;
            min_exp = min_exp.min(e);
            out.push(e);
        }
    }
    (out, min_exp)
}

fn scale_2d(s: &DenseMatrix, r: &[f64], c: &[f64], cfg: &SolverConfig) -> Assignment {
    let (exponents, min_exp) = stabilized_exponents(s, cfg.epsilon);
    if min_exp >= MIN_STABLE_EXPONENT {
        if let Some(a) = scale_2d_multiplicative(s.shape(), &exponents, r, c, cfg) {
            return a;
        }
    }
    scale_2d_log(s.shape(), &exponents, r, c, cfg)
}

fn violation_2d(q: &[f64], n: usize, k: usize, r: &[f64], c: &[f64]) -> f64 {
    let mut col = vec![0.0; k];
    let mut worst = 0.0f64;
    for i in 0..n {
        let row = &q[i * k..(i + 1) * k];
        worst = worst.max((row.iter().sum::<f64>() - r[i]).abs());
        for (acc, v) in col.iter_mut().zip(row) {
            *acc += v;
        }
    }
    col.iter()
        .zip(c)
        .fold(worst, |w, (s, t)| w.max((s - t).abs()))
}

fn scale_2d_multiplicative(
    (n, k): (usize, usize),
    exponents: &[f64],
    r: &[f64],
    c: &[f64],
    cfg: &SolverConfig,
) -> Option<Assignment> {
    let kernel: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut q = vec![0.0; n * k];
    let mut history = Vec::new();
    let mut violation = f64::INFINITY;

    for _ in 0..cfg.max_iters {
        for i in 0..n {
            let row = &kernel[i * k..(i + 1) * k];
            let kv: f64 = row.iter().zip(&v).map(|(g, vj)| g * vj).sum();
            u[i] = r[i] / kv;
        }
        let mut ktu = vec![0.0; k];
        for i in 0..n {
            let row = &kernel[i * k..(i + 1) * k];
            for (acc, g) in ktu.iter_mut().zip(row) {
                *acc += g * u[i];
            }
        }
        for j in 0..k {
            v[j] = c[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return None;
        }
        for i in 0..n {
            for j in 0..k {
                q[i * k + j] = u[i] * kernel[i * k + j] * v[j];
            }
        }
        violation = violation_2d(&q, n, k, r, c);
        history.push(violation);
        if violation <= cfg.tol {
            break;
        }
    }
    if q.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let converged = violation <= cfg.tol;
    Some(Assignment {
        q: DenseMatrix::new(n, k, q).ok()?,
        report: SolveReport {
            iterations_used: history.len(),
            final_violation: violation,
            converged,
            log_domain: false,
            history,
        },
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn scale_2d_log(
    (n, k): (usize, usize),
    exponents: &[f64],
    r: &[f64],
    c: &[f64],
    cfg: &SolverConfig,
) -> Assignment {
    let log_r: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut q = vec![0.0; n * k];
    let mut history = Vec::new();
    let mut violation = f64::INFINITY;

    for _ in 0..cfg.max_iters {
        for i in 0..n {
            let row = &exponents[i * k..(i + 1) * k];
            f[i] = log_r[i] - log_sum_exp(row.iter().zip(&g).map(|(e, gj)| e + gj));
        }
        for j in 0..k {
            g[j] = log_c[j] - log_sum_exp((0..n).map(|i| exponents[i * k + j] + f[i]));
        }
        for i in 0..n {
            for j in 0..k {
                q[i * k + j] = (exponents[i * k + j] + f[i] + g[j]).exp();
            }
        }
        violation = violation_2d(&q, n, k, r, c);
        history.push(violation);
        if violation <= cfg.tol {
            break;
        }
    }
    let converged = violation <= cfg.tol;
    Assignment {
        q: DenseMatrix::new(n, k, q).expect("log-domain plan is finite"),
        report: SolveReport {
            iterations_used: history.len(),
            final_violation: violation,
            converged,
            log_domain: true,
            history,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k_prime: usize, epsilon: f64) -> SolverConfig {
        SolverConfig {
            epsilon,
            k_prime,
            max_iters: 20_000,
            tol: 1e-9,
            ..SolverConfig::default()
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, k, |_, _| rng.random::<f64>())
    }

    fn diag2() -> DenseMatrix {
        DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap()
    }

    #[test]
    fn config_validation() {
        let good = SolverConfig::default();
        assert!(good.validate(Some(64)).is_ok());
        assert!(good.validate(Some(16)).is_err());
        for bad in [
            SolverConfig { epsilon: 0.0, ..good },
            SolverConfig { mu: 1.0, ..good },
            SolverConfig { mu: 0.0, ..good },
            SolverConfig { tol: 0.0, ..good },
            SolverConfig { max_iters: 0, ..good },
            SolverConfig { k_prime: 0, ..good },
        ] {
            assert!(bad.validate(None).is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn vanilla_uniform_is_uniform() {
        let s = DenseMatrix::filled(3, 3, 1.0);
        let a = vanilla_sinkhorn(&s, &[1.0; 3], &[1.0; 3], &cfg(1, 0.05)).unwrap();
        assert!(a.report.converged);
        for v in a.q.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanilla_diagonal_dominant_picks_identity() {
        let a = vanilla_sinkhorn(&diag2(), &[1.0; 2], &[1.0; 2], &cfg(1, 0.01)).unwrap();
        let id = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(a.q.max_abs_diff(&id) < 1e-3);
    }

    #[test]
    fn vanilla_single_cell() {
        let s = DenseMatrix::from_rows(&[[5.0]]).unwrap();
        let a = vanilla_sinkhorn(&s, &[1.0], &[1.0], &cfg(1, 0.05)).unwrap();
        assert!((a.q[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vanilla_rejects_bad_marginals() {
        let s = DenseMatrix::filled(2, 2, 1.0);
        let c = cfg(1, 0.05);
        assert_eq!(
            vanilla_sinkhorn(&s, &[1.0, 1.0], &[1.0, 2.0], &c).unwrap_err(),
            SolverError::MarginalMismatch { rows: 2.0, cols: 3.0 }
        );
        assert_eq!(
            vanilla_sinkhorn(&s, &[2.0, 0.0], &[1.0, 1.0], &c).unwrap_err(),
            SolverError::NonPositiveMarginal
        );
        assert!(matches!(
            vanilla_sinkhorn(&s, &[1.0], &[1.0, 1.0], &c),
            Err(SolverError::MarginalLength { .. })
        ));
    }

    #[test]
    fn vanilla_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_matrix(&mut rng, 8, 8);
        let c = SolverConfig { max_iters: 2, tol: 1e-14, ..cfg(1, 0.01) };
        let a = vanilla_sinkhorn(&s, &[1.0; 8], &[1.0; 8], &c).unwrap();
        assert!(!a.report.converged);
        assert_eq!(a.report.iterations_used, 2);
        assert!(matches!(
            a.into_converged(),
            Err(SolverError::NonConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn vanilla_log_domain_matches_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_matrix(&mut rng, 6, 5);
        let r = vec![5.0 / 6.0; 6];
        let c = vec![1.0; 5];
        let conf = cfg(1, 0.1);
        let (e, _) = stabilized_exponents(&s, conf.epsilon);
        let mult = scale_2d_multiplicative((6, 5), &e, &r, &c, &conf).unwrap();
        let log = scale_2d_log((6, 5), &e, &r, &c, &conf);
        assert!(log.report.log_domain && !mult.report.log_domain);
        assert!(mult.q.max_abs_diff(&log.q) < 1e-9);
    }

    #[test]
    fn vanilla_extreme_epsilon_uses_log_domain() {
        let s = DenseMatrix::from_rows(&[[0.0, 10.0], [10.0, 0.0]]).unwrap();
        let a = vanilla_sinkhorn(&s, &[1.0; 2], &[1.0; 2], &cfg(1, 1e-3)).unwrap();
        assert!(a.report.log_domain);
        assert!(a.report.converged);
        assert!((a.q[(0, 1)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn modified_uniform_cases() {
        let s = DenseMatrix::filled(4, 4, 0.3);
        let a = modified_sinkhorn(&s, &cfg(2, 0.05)).unwrap();
        assert!(a.q.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let a = modified_sinkhorn(&s, &cfg(4, 0.05)).unwrap();
        assert!(a.q.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn modified_diagonal_dominant() {
        let a = modified_sinkhorn(&diag2(), &cfg(1, 0.01)).unwrap();
        let id = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(a.q.max_abs_diff(&id) < 1e-3);
    }

    #[test]
    fn modified_can_exceed_one() {
        // Row sums 2 over two strongly preferred columns pile mass past one
        // when the damped alternative is weak.
        let s = DenseMatrix::from_rows(&[[5.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
            .unwrap();
        let a = modified_sinkhorn(&s, &cfg(2, 0.5)).unwrap();
        assert!(a.report.converged);
        assert!(a.q[(0, 0)] > 1.0, "{:?}", a.q);
    }
}
