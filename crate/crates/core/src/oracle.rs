//! Exact binary many-to-many assignment by exhaustive search.
//!
//! Finds the `{0,1}` matrix `Q` maximizing `<Q, S>` such that every row
//! selects exactly `K'` anchors and every anchor is selected exactly
//! `N·K'/K` times. Rows are filled depth-first with their `K'`-subsets in
//! lexicographic order; a branch is cut as soon as some anchor needs more
//! selections than there are rows left to give them.

use thiserror::Error;

use crate::matrix_io::DenseMatrix;

/// Upper bound on `C(K, K')^N` accepted before pruning.
pub const MAX_SEARCH_SPACE: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("N·K' = {n}·{k_prime} is not divisible by K = {k}; no balanced binary assignment exists")]
    InfeasibleDivisibility { n: usize, k: usize, k_prime: usize },
    #[error("search space C({k},{k_prime})^{n} ≈ {size:.3e} exceeds {MAX_SEARCH_SPACE:e}")]
    InstanceTooLarge {
        n: usize,
        k: usize,
        k_prime: usize,
        size: f64,
    },
    #[error("k_prime must lie in 1..={k}, got {k_prime}")]
    InvalidKPrime { k: usize, k_prime: usize },
    #[error("empty similarity matrix")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub q_binary: DenseMatrix,
    pub objective: f64,
    /// Number of complete feasible matrices visited.
    pub candidates_enumerated: u64,
}

/// All `k_prime`-subsets of `0..k`, in lexicographic order.
pub fn lexicographic_subsets(k: usize, k_prime: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k_prime > k {
        return out;
    }
    let mut idx: Vec<usize> = (0..k_prime).collect();
    loop {
        out.push(idx.clone());
        // Rightmost position that can still advance.
        let Some(pos) = (0..k_prime).rev().find(|&p| idx[p] < k - k_prime + p) else {
            return out;
        };
        idx[pos] += 1;
        for p in pos + 1..k_prime {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

fn ln_binomial(k: usize, r: usize) -> f64 {
    (0..r).map(|i| ((k - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

struct Search<'a> {
    s: &'a DenseMatrix,
    subsets: Vec<Vec<usize>>,
    remaining: Vec<usize>,
    chosen: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    visited: u64,
}

impl Search<'_> {
    fn descend(&mut self, row: usize, partial: f64) {
        let n = self.s.rows();
        if row == n {
            self.visited += 1;
            if self.best.as_ref().is_none_or(|(b, _)| partial > *b) {
                self.best = Some((partial, self.chosen.clone()));
            }
            return;
        }
        let rows_after = n - row - 1;
        for si in 0..self.subsets.len() {
            if self.subsets[si].iter().any(|&j| self.remaining[j] == 0) {
                continue;
            }
            for &j in &self.subsets[si] {
                self.remaining[j] -= 1;
            }
            if self.remaining.iter().all(|&r| r <= rows_after) {
                let gain: f64 = self.subsets[si].iter().map(|&j| self.s[(row, j)]).sum();
                self.chosen.push(si);
                self.descend(row + 1, partial + gain);
                self.chosen.pop();
            }
            for &j in &self.subsets[si] {
                self.remaining[j] += 1;
            }
        }
    }
}

/// Exact maximizer of `<Q, S>` over balanced binary assignments.
/// Ties resolve to the lexicographically first sequence of row subsets.
pub fn solve_exact(s: &DenseMatrix, k_prime: usize) -> Result<OracleResult, OracleError> {
    let (n, k) = s.shape();
    if n == 0 || k == 0 {
        return Err(OracleError::EmptyInput);
    }
    if k_prime == 0 || k_prime > k {
        return Err(OracleError::InvalidKPrime { k, k_prime });
    }
    if !(n * k_prime).is_multiple_of(k) {
        return Err(OracleError::InfeasibleDivisibility { n, k, k_prime });
    }
    let ln_size = n as f64 * ln_binomial(k, k_prime);
    if ln_size > MAX_SEARCH_SPACE.ln() {
        return Err(OracleError::InstanceTooLarge {
            n,
            k,
            k_prime,
            size: ln_size.exp(),
        });
    }

    let per_column = n * k_prime / k;
    let mut search = Search {
        s,
        subsets: lexicographic_subsets(k, k_prime),
        remaining: vec![per_column; k],
        chosen: Vec::with_capacity(n),
        best: None,
        visited: 0,
    };
    search.descend(0, 0.0);

    // A feasible point always exists once N·K'/K is integral (cyclic fill).
    let (_, rows) = search.best.expect("balanced assignment exists");
    let mut q = DenseMatrix::zeros(n, k);
    for (i, &si) in rows.iter().enumerate() {
        for &j in &search.subsets[si] {
            q[(i, j)] = 1.0;
        }
    }
    let objective = q.dot(s);
    Ok(OracleResult {
        q_binary: q,
        objective,
        candidates_enumerated: search.visited,
    })
}

/// Exact feasibility check on a binary assignment.
pub fn is_feasible(q: &DenseMatrix, k_prime: usize) -> bool {
    let (n, k) = q.shape();
    if k == 0 || !(n * k_prime).is_multiple_of(k) {
        return false;
    }
    let per_column = n * k_prime / k;
    if q.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return false;
    }
    let rows_ok = (0..n).all(|i| q.row(i).iter().filter(|&&v| v == 1.0).count() == k_prime);
    let cols_ok = (0..k).all(|j| (0..n).filter(|&i| q[(i, j)] == 1.0).count() == per_column);
    rows_ok && cols_ok
}
