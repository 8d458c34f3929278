//! FIFO memory of recent embeddings, one ring per modality and space.

use std::collections::VecDeque;

use crate::matrix_io::DenseMatrix;

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    input: [VecDeque<Vec<f64>>; 3],
    joint: [VecDeque<Vec<f64>>; 3],
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            input: Default::default(),
            joint: Default::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.input[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one batch (same rows for every modality), evicting the
    /// oldest entries beyond capacity.
    pub fn push(&mut self, input: &[DenseMatrix; 3], joint: &[DenseMatrix; 3]) {
        for m in 0..3 {
            for (ring, src) in [(&mut self.input[m], &input[m]), (&mut self.joint[m], &joint[m])] {
                for i in 0..src.rows() {
                    ring.push_back(src.row(i).to_vec());
                }
                while ring.len() > self.capacity {
                    ring.pop_front();
                }
            }
        }
    }

    fn stack(ring: &VecDeque<Vec<f64>>) -> Option<DenseMatrix> {
        let cols = ring.front()?.len();
        let data: Vec<f64> = ring.iter().flatten().copied().collect();
        Some(DenseMatrix::new(ring.len(), cols, data).expect("finite rows"))
    }

    /// Stored input-space rows of modality `m`, oldest first.
    pub fn input_rows(&self, m: usize) -> Option<DenseMatrix> {
        Self::stack(&self.input[m])
    }

    /// Stored joint-space rows of modality `m`, oldest first.
    pub fn joint_rows(&self, m: usize) -> Option<DenseMatrix> {
        Self::stack(&self.joint[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(start: usize, n: usize) -> [DenseMatrix; 3] {
        std::array::from_fn(|m| DenseMatrix::from_fn(n, 2, |i, j| (start + i) as f64 + 0.1 * j as f64 + 100.0 * m as f64))
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(5);
        assert!(bank.is_empty());
        assert!(bank.joint_rows(0).is_none());
        bank.push(&batch(0, 3), &batch(0, 3));
        assert_eq!(bank.len(), 3);
        bank.push(&batch(3, 3), &batch(3, 3));
        assert_eq!(bank.len(), 5);
        let rows = bank.input_rows(1).unwrap();
        let first: Vec<f64> = (0..5).map(|i| rows[(i, 0)]).collect();
        assert_eq!(first, vec![101.0, 102.0, 103.0, 104.0, 105.0]);
        bank.push(&batch(6, 10), &batch(6, 10));
        assert_eq!(bank.len(), 5);
        assert_eq!(bank.joint_rows(0).unwrap()[(0, 0)], 11.0);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut bank = MemoryBank::new(0);
        bank.push(&batch(0, 4), &batch(0, 4));
        assert!(bank.is_empty());
    }
}
