//! Gated linear projection into the joint space.
//!
//! `h = x W1 + b1`, `y = normalize(h ⊙ σ(h W2 + b2))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix_io::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Forward intermediates needed by [`ProjectionHead::backward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    x: DenseMatrix,
    h: DenseMatrix,
    gate: DenseMatrix,
    unit: DenseMatrix,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias(m: &mut DenseMatrix, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, bj) in m.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
}

impl ProjectionHead {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut init = |r: usize, c: usize| {
            let s = 1.0 / (r as f64).sqrt();
            DenseMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
        };
        Self {
            w1: init(d_in, d_out),
            b1: vec![0.0; d_out],
            w2: init(d_out, d_out),
            b2: vec![0.0; d_out],
        }
    }

    pub fn d_out(&self) -> usize {
        self.w1.cols()
    }

    /// # Panics
    /// If activations overflow; see [`ProjectionHead::try_forward`].
    pub fn forward(&self, x: &DenseMatrix) -> (DenseMatrix, HeadCache) {
        self.try_forward(x).expect("projection activations are not finite")
    }

    /// Forward pass, or `None` when the parameters are so large that the
    /// activations are no longer finite.
    pub fn try_forward(&self, x: &DenseMatrix) -> Option<(DenseMatrix, HeadCache)> {
        let mut h = x.matmul(&self.w1);
        add_bias(&mut h, &self.b1);
        let mut pre = h.matmul(&self.w2);
        add_bias(&mut pre, &self.b2);
        if !h.as_slice().iter().chain(pre.as_slice()).all(|v| v.is_finite()) {
            return None;
        }
        let gate = pre.map(sigmoid);
        let mut unit = DenseMatrix::zeros(h.rows(), h.cols());
        let mut norms = Vec::with_capacity(h.rows());
        for i in 0..h.rows() {
            let out = unit.row_mut(i);
            for ((o, hv), gv) in out.iter_mut().zip(h.row(i)).zip(gate.row(i)) {
                *o = hv * gv;
            }
            // A dead row keeps a tiny floor so cosines stay defined.
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE.sqrt());
            if !n.is_finite() {
                return None;
            }
            out.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let y = unit.clone();
        Some((
            y,
            HeadCache {
                x: x.clone(),
                h,
                gate,
                unit,
                norms,
            },
        ))
    }

    pub fn is_finite(&self) -> bool {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn project(&self, x: &DenseMatrix) -> DenseMatrix {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &HeadCache, grad_y: &DenseMatrix) -> HeadGrads {
        let (n, d) = cache.h.shape();
        // Through the normalization.
        let mut d_out = grad_y.clone();
        for i in 0..n {
            let u = cache.unit.row(i);
            let along: f64 = d_out.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
            for (g, ui) in d_out.row_mut(i).iter_mut().zip(u) {
                *g = (*g - along * ui) / cache.norms[i];
            }
        }
        let mut d_h = DenseMatrix::zeros(n, d);
        let mut d_u = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let (g, h, o) = (cache.gate[(i, j)], cache.h[(i, j)], d_out[(i, j)]);
                d_h[(i, j)] = o * g;
                d_u[(i, j)] = o * h * g * (1.0 - g);
            }
        }
        let back = d_u.matmul_t(&self.w2);
        for (a, b) in d_h.as_mut_slice().iter_mut().zip(back.as_slice()) {
            *a += b;
        }
        HeadGrads {
            w1: cache.x.t_matmul(&d_h),
            b1: d_h.col_sums(),
            w2: cache.h.t_matmul(&d_u),
            b2: d_u.col_sums(),
        }
    }

    pub fn sgd_step(&mut self, grads: &HeadGrads, lr: f64) {
        let step = |p: &mut [f64], g: &[f64]| {
            for (a, b) in p.iter_mut().zip(g) {
                *a -= lr * b;
            }
        };
        step(self.w1.as_mut_slice(), grads.w1.as_slice());
        step(&mut self.b1, &grads.b1);
        step(self.w2.as_mut_slice(), grads.w2.as_slice());
        step(&mut self.b2, &grads.b2);
    }
}
