//! Synthetic weakly aligned three-modality data.
//!
//! Each sample draws a shared concept. Every modality renders the concept
//! through its own fixed random linear map, adds an offset for a
//! modality-private concept and isotropic noise. A misaligned sample has the
//! concept of its video and audio rendering resampled, so the triple no
//! longer agrees on content.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::matrix_io::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub n_samples: usize,
    pub d_input: usize,
    pub n_shared_concepts: usize,
    /// Private concepts per modality; 0 disables private offsets.
    pub n_private_concepts: usize,
    /// Standard deviation of private offsets relative to the unit-variance
    /// shared rendering.
    pub private_scale: f64,
    pub noise_sigma: f64,
    pub misalignment_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 2048,
            d_input: 16,
            n_shared_concepts: 32,
            n_private_concepts: 4,
            private_scale: 0.8,
            noise_sigma: 0.3,
            misalignment_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.n_samples == 0 || self.d_input == 0 {
            return bad("n_samples and d_input must be positive");
        }
        if self.n_shared_concepts == 0 {
            return bad("n_shared_concepts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.misalignment_rate) {
            return bad("misalignment_rate must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.private_scale >= 0.0) {
            return bad("noise_sigma and private_scale must be non-negative");
        }
        Ok(())
    }
}

/// Features indexed by [`Modality::index`](crate::losses::Modality::index).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub features: [DenseMatrix; 3],
    /// Shared concept rendered by each modality, per sample.
    pub concepts: [Vec<usize>; 3],
    /// Private concept per modality and sample.
    pub private: [Vec<usize>; 3],
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.features[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> SyntheticData {
        let pick = |m: &DenseMatrix| {
            let mut data = Vec::with_capacity(idx.len() * m.cols());
            for &i in idx {
                data.extend_from_slice(m.row(i));
            }
            DenseMatrix::new(idx.len(), m.cols(), data).expect("finite rows")
        };
        let labels = |v: &Vec<usize>| idx.iter().map(|&i| v[i]).collect();
        SyntheticData {
            features: std::array::from_fn(|m| pick(&self.features[m])),
            concepts: std::array::from_fn(|m| labels(&self.concepts[m])),
            private: std::array::from_fn(|m| labels(&self.private[m])),
        }
    }

    /// FNV-1a over the feature bits, for cheap "same data" checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for m in &self.features {
            for v in m.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<SyntheticData, TrainError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.n_samples, spec.d_input);

    let latent = gaussian_matrix(&mut rng, spec.n_shared_concepts, d, 1.0);
    let mut render = Vec::with_capacity(3);
    let mut private_offsets = Vec::with_capacity(3);
    for _ in 0..3 {
        render.push(latent.matmul(&gaussian_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt())));
        private_offsets.push(gaussian_matrix(&mut rng, spec.n_private_concepts, d, spec.private_scale));
    }

    let mut concepts: [Vec<usize>; 3] = Default::default();
    let mut private: [Vec<usize>; 3] = Default::default();
    for _ in 0..n {
        let c = rng.random_range(0..spec.n_shared_concepts);
        let misaligned = rng.random::<f64>() < spec.misalignment_rate;
        for m in 0..3 {
            let cm = if misaligned && m > 0 {
                rng.random_range(0..spec.n_shared_concepts)
            } else {
                c
            };
            concepts[m].push(cm);
            let p = if spec.n_private_concepts > 0 {
                rng.random_range(0..spec.n_private_concepts)
            } else {
                0
            };
            private[m].push(p);
        }
    }

    let mut features: [DenseMatrix; 3] = std::array::from_fn(|_| DenseMatrix::zeros(n, d));
    for m in 0..3 {
        for i in 0..n {
            let base = render[m].row(concepts[m][i]).to_vec();
            let offset = (spec.n_private_concepts > 0).then(|| private_offsets[m].row(private[m][i]).to_vec());
            let row = features[m].row_mut(i);
            for j in 0..d {
                let noise: f64 = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                row[j] = base[j] + offset.as_ref().map_or(0.0, |o| o[j]) + noise;
            }
        }
    }
    Ok(SyntheticData {
        features,
        concepts,
        private,
    })
}

/// Seeded split into (train, held-out) with `fraction` of samples held out.
pub fn split_holdout(data: &SyntheticData, fraction: f64, seed: u64) -> (SyntheticData, SyntheticData) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f5b_1e00));
    let n_test = ((data.len() as f64 * fraction).round() as usize).min(data.len());
    let (test, train) = idx.split_at(n_test);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (data.subset(&train), data.subset(&test))
}
