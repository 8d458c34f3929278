//! Multi-assignment Sinkhorn-Knopp on the `K×N×K` channel tensor.
//!
//! The plan has the product form `Q'[c,i,j] = a[c,i]·b[c,j]·d[i,j]·exp(S'[c,i,j]/ε)`
//! with one scaling family per constraint: `a` fixes per-channel row sums,
//! `b` per-channel column sums and `d` depth sums. A sweep updates `a`, then
//! `b`, then `d`, each exactly. Plain alternating scaling crawls once the
//! optimum approaches the boundary of the feasible set (small ε), so sweeps
//! are combined with Anderson mixing on the log-potentials `(b, d)`, restarted
//! from the best iterate whenever the violation stagnates.

use crate::matrix_io::{DenseMatrix, DenseTensor3};

use super::anderson::Anderson;
use super::{AssignmentMatrix, MultiAssignment, SolveReport, SolverConfig, SolverError};
use super::MIN_STABLE_EXPONENT;

/// Sweeps without a new best violation before mixing restarts.
const STAGNATION_WINDOW: usize = 30;
const ANDERSON_REG: f64 = 1e-4;

/// How successive sweeps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceleration {
    /// Plain alternating scaling.
    None,
    /// Anderson mixing over the last `memory` sweeps.
    Anderson { memory: usize },
}

impl Default for Acceleration {
    fn default() -> Self {
        Acceleration::Anderson { memory: 8 }
    }
}

/// Lifts `S` (`N×K`) to the `K×N×K` tensor whose first `k_prime` channels
/// are `S` and whose remaining channels are `mu·S`.
pub fn build_similarity_tensor(s: &DenseMatrix, cfg: &SolverConfig) -> DenseTensor3 {
    let (n, k) = s.shape();
    let mut t = DenseTensor3::zeros(k, n, k);
    let block = n * k;
    let data = t.as_mut_slice();
    for ch in 0..k {
        let w = if ch < cfg.k_prime { 1.0 } else { cfg.mu };
        for (dst, src) in data[ch * block..(ch + 1) * block]
            .iter_mut()
            .zip(s.as_slice())
        {
            *dst = w * src;
        }
    }
    t
}

/// Depth-wise sum of the first `k_prime` channels, clamped to `[0, 1]`.
pub fn extract_assignment(q_prime: &DenseTensor3, k_prime: usize) -> AssignmentMatrix {
    let (_, n, k) = q_prime.shape();
    let mut q = vec![0.0; n * k];
    for ch in 0..k_prime.min(q_prime.channels()) {
        for (acc, v) in q.iter_mut().zip(q_prime.channel(ch)) {
            *acc += v;
        }
    }
    for v in &mut q {
        *v = v.clamp(0.0, 1.0);
    }
    DenseMatrix::new(n, k, q).expect("finite channel sums")
}

/// Multi-assignment Sinkhorn-Knopp with the default acceleration.
///
/// Finds the entropic maximizer of `<Q', S'> + ε·H(Q')` over `K×N×K`
/// tensors with per-channel row sums 1, per-channel column sums `N/K` and
/// depth sums 1, then sums the first `k_prime` channels into `Q`.
/// Non-convergence is reported through `report.converged`; the returned
/// plan is the best iterate seen.
pub fn multi_sinkhorn(s: &DenseMatrix, cfg: &SolverConfig) -> Result<MultiAssignment, SolverError> {
    multi_sinkhorn_with(s, cfg, Acceleration::default())
}

pub fn multi_sinkhorn_with(
    s: &DenseMatrix,
    cfg: &SolverConfig,
    accel: Acceleration,
) -> Result<MultiAssignment, SolverError> {
    let (n, k) = s.shape();
    if n == 0 || k == 0 {
        return Err(SolverError::EmptyInput);
    }
    cfg.validate(Some(k))?;

    if cfg.k_prime == k {
        // Every channel carries the same kernel, so the unique entropic
        // optimum is uniform across channels: Q' = 1/K and Q = 1.
        let q_prime = DenseTensor3::new(k, n, k, vec![1.0 / k as f64; k * n * k])
            .expect("finite");
        return Ok(MultiAssignment {
            q: DenseMatrix::filled(n, k, 1.0),
            q_prime,
            report: SolveReport::trivial(),
        });
    }

    // Exponents S'/ε, shifted per (channel, sample) row so each row peaks at
    // zero. The shift is absorbed by the row scaling `a`.
    let mut exponents = build_similarity_tensor(s, cfg).into_vec();
    let mut min_exp = 0.0f64;
    for row in exponents.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - m) / cfg.epsilon;
            min_exp = min_exp.min(*v);
        }
    }
    let problem = Problem {
        n,
        k,
        col_target: n as f64 / k as f64,
        exponents,
    };

    let multiplicative = (min_exp >= MIN_STABLE_EXPONENT)
        .then(|| problem.exponents.iter().map(|e| e.exp()).collect::<Vec<f64>>())
        .and_then(|gibbs| problem.solve(Domain::Multiplicative(&gibbs), cfg, accel));
    let (pot, report) = match multiplicative {
        Some(res) => res,
        None => problem
            .solve(Domain::Log, cfg, accel)
            .expect("log-domain sweeps are total"),
    };

    let q_prime = DenseTensor3::new(k, n, k, problem.plan(&pot)).expect("finite plan");
    let q = extract_assignment(&q_prime, cfg.k_prime);
    Ok(MultiAssignment { q_prime, q, report })
}

#[derive(Clone, Copy)]
enum Domain<'a> {
    Multiplicative(&'a [f64]),
    Log,
}

struct Problem {
    n: usize,
    k: usize,
    col_target: f64,
    /// Stabilized exponents, channel-major.
    exponents: Vec<f64>,
}

/// Log scaling factors: `la` is (channel, sample), `lb` is (channel, anchor),
/// `ld` is (sample, anchor).
#[derive(Clone, Debug)]
struct Potentials {
    la: Vec<f64>,
    lb: Vec<f64>,
    ld: Vec<f64>,
}

impl Potentials {
    fn zeros(n: usize, k: usize) -> Self {
        Self {
            la: vec![0.0; k * n],
            lb: vec![0.0; k * k],
            ld: vec![0.0; n * k],
        }
    }

    /// Moves plan-preserving gauge freedom out of `lb`: per-anchor means go
    /// to `ld`, then per-channel means go to `la`.
    fn normalize(&mut self, n: usize, k: usize) {
        for j in 0..k {
            let mean = (0..k).map(|c| self.lb[c * k + j]).sum::<f64>() / k as f64;
            for c in 0..k {
                self.lb[c * k + j] -= mean;
            }
            for i in 0..n {
                self.ld[i * k + j] += mean;
            }
        }
        for c in 0..k {
            let row = &mut self.lb[c * k..(c + 1) * k];
            let mean = row.iter().sum::<f64>() / k as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
            for i in 0..n {
                self.la[c * n + i] += mean;
            }
        }
    }

    fn state(&self) -> Vec<f64> {
        let mut x = self.lb.clone();
        x.extend_from_slice(&self.ld);
        x
    }
}

/// Marginal sums of a plan.
struct Sums {
    row: Vec<f64>,
    col: Vec<f64>,
    depth: Vec<f64>,
}

impl Sums {
    fn new(n: usize, k: usize) -> Self {
        Self {
            row: vec![0.0; k * n],
            col: vec![0.0; k * k],
            depth: vec![0.0; n * k],
        }
    }

    fn clear(&mut self) {
        self.row.fill(0.0);
        self.col.fill(0.0);
        self.depth.fill(0.0);
    }

    fn violation(&self, col_target: f64) -> f64 {
        let r = self.row.iter().fold(0.0f64, |w, s| w.max((s - 1.0).abs()));
        let c = self.col.iter().fold(r, |w, s| w.max((s - col_target).abs()));
        self.depth.iter().fold(c, |w, s| w.max((s - 1.0).abs()))
    }
}

fn usable(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl Problem {
    fn solve(
        &self,
        domain: Domain<'_>,
        cfg: &SolverConfig,
        accel: Acceleration,
    ) -> Option<(Potentials, SolveReport)> {
        let (n, k) = (self.n, self.k);
        let mut x = vec![0.0; k * k + n * k];
        let mut pot = Potentials::zeros(n, k);
        let mut sums = Sums::new(n, k);
        let mut mixer = match accel {
            Acceleration::Anderson { memory } if memory > 0 => Some(Anderson::new(memory, ANDERSON_REG)),
            _ => None,
        };
        let mut best: Option<(f64, Potentials)> = None;
        let mut since_best = 0;
        let mut history = Vec::new();

        for _ in 0..cfg.max_iters {
            match domain {
                Domain::Multiplicative(gibbs) => self.sweep_multiplicative(gibbs, &x, &mut pot, &mut sums)?,
                Domain::Log => self.sweep_log(&x, &mut pot, &mut sums),
            }
            let violation = sums.violation(self.col_target);
            if !violation.is_finite() {
                if matches!(domain, Domain::Multiplicative(_)) {
                    return None;
                }
                // A wild extrapolation; fall back to the best plain iterate.
                if let (Some(m), Some((_, b))) = (mixer.as_mut(), best.as_ref()) {
                    m.clear();
                    x = b.state();
                    history.push(violation);
                    continue;
                }
            }
            history.push(violation);
            pot.normalize(n, k);
            if best.as_ref().is_none_or(|(b, _)| violation < *b) {
                best = Some((violation, pot.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if violation <= cfg.tol {
                break;
            }
            let g = pot.state();
            x = match mixer.as_mut() {
                Some(m) if since_best > STAGNATION_WINDOW => {
                    m.clear();
                    since_best = 0;
                    best.as_ref().expect("best recorded").1.state()
                }
                Some(m) => m.step(&x, &g),
                None => g,
            };
        }

        let (violation, pot) = best?;
        let report = SolveReport {
            iterations_used: history.len(),
            final_violation: violation,
            converged: violation <= cfg.tol,
            log_domain: matches!(domain, Domain::Log),
            history,
        };
        Some((pot, report))
    }

    /// One a→b→d sweep from the state `x = (lb, ld)` with multiplicative
    /// arithmetic. `None` signals under/overflow.
    fn sweep_multiplicative(
        &self,
        gibbs: &[f64],
        x: &[f64],
        pot: &mut Potentials,
        sums: &mut Sums,
    ) -> Option<()> {
        let (n, k) = (self.n, self.k);
        let b: Vec<f64> = x[..k * k].iter().map(|v| v.exp()).collect();
        let d: Vec<f64> = x[k * k..].iter().map(|v| v.exp()).collect();
        if !b.iter().chain(&d).all(|&v| usable(v)) {
            return None;
        }

        let mut a = vec![0.0; k * n];
        for c in 0..k {
            let bc = &b[c * k..(c + 1) * k];
            for i in 0..n {
                let g = &gibbs[(c * n + i) * k..(c * n + i + 1) * k];
                let di = &d[i * k..(i + 1) * k];
                let s: f64 = (0..k).map(|j| g[j] * bc[j] * di[j]).sum();
                a[c * n + i] = 1.0 / s;
            }
        }
        if !a.iter().all(|&v| usable(v)) {
            return None;
        }

        let mut col = vec![0.0; k * k];
        for c in 0..k {
            for i in 0..n {
                let g = &gibbs[(c * n + i) * k..(c * n + i + 1) * k];
                let di = &d[i * k..(i + 1) * k];
                let ai = a[c * n + i];
                let acc = &mut col[c * k..(c + 1) * k];
                for j in 0..k {
                    acc[j] += g[j] * ai * di[j];
                }
            }
        }
        let b_new: Vec<f64> = col.iter().map(|s| self.col_target / s).collect();
        if !b_new.iter().all(|&v| usable(v)) {
            return None;
        }

        let mut depth = vec![0.0; n * k];
        for c in 0..k {
            let bc = &b_new[c * k..(c + 1) * k];
            for i in 0..n {
                let g = &gibbs[(c * n + i) * k..(c * n + i + 1) * k];
                let ai = a[c * n + i];
                let acc = &mut depth[i * k..(i + 1) * k];
                for j in 0..k {
                    acc[j] += g[j] * ai * bc[j];
                }
            }
        }
        let d_new: Vec<f64> = depth.iter().map(|s| 1.0 / s).collect();
        if !d_new.iter().all(|&v| usable(v)) {
            return None;
        }

        sums.clear();
        for c in 0..k {
            let bc = &b_new[c * k..(c + 1) * k];
            for i in 0..n {
                let g = &gibbs[(c * n + i) * k..(c * n + i + 1) * k];
                let di = &d_new[i * k..(i + 1) * k];
                let ai = a[c * n + i];
                let mut rs = 0.0;
                for j in 0..k {
                    let q = g[j] * ai * bc[j] * di[j];
                    rs += q;
                    sums.col[c * k + j] += q;
                    sums.depth[i * k + j] += q;
                }
                sums.row[c * n + i] = rs;
            }
        }

        for (dst, v) in pot.la.iter_mut().zip(&a) {
            *dst = v.ln();
        }
        for (dst, v) in pot.lb.iter_mut().zip(&b_new) {
            *dst = v.ln();
        }
        for (dst, v) in pot.ld.iter_mut().zip(&d_new) {
            *dst = v.ln();
        }
        Some(())
    }

    /// One a→b→d sweep in the log domain.
    fn sweep_log(&self, x: &[f64], pot: &mut Potentials, sums: &mut Sums) {
        let (n, k) = (self.n, self.k);
        let e = &self.exponents;
        let (lb, ld) = x.split_at(k * k);
        let mut buf = vec![0.0; k];

        for c in 0..k {
            for i in 0..n {
                let base = (c * n + i) * k;
                for j in 0..k {
                    buf[j] = e[base + j] + lb[c * k + j] + ld[i * k + j];
                }
                pot.la[c * n + i] = -log_sum_exp(&buf);
            }
        }

        // Column log-sum-exp over samples, streaming max then sum.
        let mut mx = vec![f64::NEG_INFINITY; k * k];
        let mut sm = vec![0.0; k * k];
        let term = |c: usize, i: usize, j: usize, la: &[f64]| e[(c * n + i) * k + j] + la[c * n + i] + ld[i * k + j];
        for c in 0..k {
            for i in 0..n {
                for j in 0..k {
                    let v = term(c, i, j, &pot.la);
                    mx[c * k + j] = mx[c * k + j].max(v);
                }
            }
        }
        for c in 0..k {
            for i in 0..n {
                for j in 0..k {
                    sm[c * k + j] += (term(c, i, j, &pot.la) - mx[c * k + j]).exp();
                }
            }
        }
        let log_target = self.col_target.ln();
        for idx in 0..k * k {
            pot.lb[idx] = log_target - (mx[idx] + sm[idx].ln());
        }

        // Depth log-sum-exp over channels.
        let mut mx = vec![f64::NEG_INFINITY; n * k];
        let mut sm = vec![0.0; n * k];
        let term = |c: usize, i: usize, j: usize, la: &[f64], lb: &[f64]| {
            e[(c * n + i) * k + j] + la[c * n + i] + lb[c * k + j]
        };
        for c in 0..k {
            for i in 0..n {
                for j in 0..k {
                    let v = term(c, i, j, &pot.la, &pot.lb);
                    mx[i * k + j] = mx[i * k + j].max(v);
                }
            }
        }
        for c in 0..k {
            for i in 0..n {
                for j in 0..k {
                    sm[i * k + j] += (term(c, i, j, &pot.la, &pot.lb) - mx[i * k + j]).exp();
                }
            }
        }
        for idx in 0..n * k {
            pot.ld[idx] = -(mx[idx] + sm[idx].ln());
        }

        sums.clear();
        for c in 0..k {
            for i in 0..n {
                let mut rs = 0.0;
                for j in 0..k {
                    let q = (e[(c * n + i) * k + j] + pot.la[c * n + i] + pot.lb[c * k + j] + pot.ld[i * k + j]).exp();
                    rs += q;
                    sums.col[c * k + j] += q;
                    sums.depth[i * k + j] += q;
                }
                sums.row[c * n + i] = rs;
            }
        }
    }

    fn plan(&self, pot: &Potentials) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut q = Vec::with_capacity(k * n * k);
        for c in 0..k {
            for i in 0..n {
                for j in 0..k {
                    let l = self.exponents[(c * n + i) * k + j]
                        + pot.la[c * n + i]
                        + pot.lb[c * k + j]
                        + pot.ld[i * k + j];
                    q.push(l.exp());
                }
            }
        }
        q
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
