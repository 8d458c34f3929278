//! Anderson mixing (type II) for fixed-point iterations `x ← F(x)`.
//!
//! Given the last `m` iterates and their images, the next point is the
//! affine combination of images whose residuals `F(x) - x` have the smallest
//! Tikhonov-regularized norm.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub(crate) struct Anderson {
    memory: usize,
    reg: f64,
    images: VecDeque<Vec<f64>>,
    residuals: VecDeque<Vec<f64>>,
}

impl Anderson {
    pub(crate) fn new(memory: usize, reg: f64) -> Self {
        Self {
            memory,
            reg,
            images: VecDeque::with_capacity(memory + 1),
            residuals: VecDeque::with_capacity(memory + 1),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.images.clear();
        self.residuals.clear();
    }

    /// Records `(x, g = F(x))` and returns the mixed next iterate.
    pub(crate) fn step(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi - xi).collect();
        self.images.push_back(g.to_vec());
        self.residuals.push_back(f);
        if self.images.len() > self.memory + 1 {
            self.images.pop_front();
            self.residuals.pop_front();
        }
        let p = self.images.len() - 1;
        if p == 0 {
            return g.to_vec();
        }

        let diff = |q: &VecDeque<Vec<f64>>, c: usize| -> Vec<f64> {
            q[c + 1].iter().zip(&q[c]).map(|(a, b)| a - b).collect()
        };
        let d_res: Vec<Vec<f64>> = (0..p).map(|c| diff(&self.residuals, c)).collect();
        let f_last = &self.residuals[p];

        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for a in 0..p {
            for b in a..p {
                let v = dot(&d_res[a], &d_res[b]);
                gram[a * p + b] = v;
                gram[b * p + a] = v;
            }
            rhs[a] = dot(&d_res[a], f_last);
        }
        let trace: f64 = (0..p).map(|a| gram[a * p + a]).sum();
        for a in 0..p {
            gram[a * p + a] += self.reg * trace + f64::MIN_POSITIVE;
        }
        let Some(gamma) = solve_dense(&mut gram, &mut rhs, p) else {
            return g.to_vec();
        };

        let mut next = g.to_vec();
        for (c, &w) in gamma.iter().enumerate() {
            for ((nx, a), b) in next
                .iter_mut()
                .zip(&self.images[c + 1])
                .zip(&self.images[c])
            {
                *nx -= w * (a - b);
            }
        }
        if next.iter().all(|v| v.is_finite()) {
            next
        } else {
            g.to_vec()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting on a row-major `p×p` system.
fn solve_dense(a: &mut [f64], b: &mut [f64], p: usize) -> Option<Vec<f64>> {
    for col in 0..p {
        let pivot = (col..p).max_by(|&r, &s| a[r * p + col].abs().total_cmp(&a[s * p + col].abs()))?;
        if a[pivot * p + col] == 0.0 || !a[pivot * p + col].is_finite() {
            return None;
        }
        if pivot != col {
            for c in 0..p {
                a.swap(pivot * p + c, col * p + c);
            }
            b.swap(pivot, col);
        }
        for r in col + 1..p {
            let factor = a[r * p + col] / a[col * p + col];
            for c in col..p {
                a[r * p + c] -= factor * a[col * p + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; p];
    for r in (0..p).rev() {
        let tail: f64 = (r + 1..p).map(|c| a[r * p + c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r * p + r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![3.0, 5.0];
        let x = solve_dense(&mut a, &mut b, 2).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn accelerates_linear_contraction() {
        // x ← A x + c with a slow eigenvalue; plain iteration needs hundreds
        // of steps, mixing finds the fixed point in a handful.
        let apply = |x: &[f64]| vec![0.99 * x[0] + 0.01, 0.5 * x[1] + 1.0];
        let mut x = vec![0.0, 0.0];
        let mut mixer = Anderson::new(5, 1e-12);
        for _ in 0..10 {
            let g = apply(&x);
            x = mixer.step(&x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-8, "{x:?}");
        assert!((x[1] - 2.0).abs() < 1e-8, "{x:?}");
    }
}
