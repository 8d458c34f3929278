//! Dense row-major matrices, channel-major 3-tensors, and their CSV
//! interchange formats.
//!
//! A matrix file is headerless CSV: one row per line, comma-separated
//! decimal floats. A tensor file is a sequence of such matrices (one per
//! channel) separated by a blank line. Values are written with 17
//! significant digits so that a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::ops::{Index, IndexMut};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ragged rows at line {line}: expected {expected} fields, found {found}")]
    RaggedRows {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unparseable field {field} at line {line}: {token:?}")]
    Parse {
        line: usize,
        field: usize,
        token: String,
    },
    #[error("non-finite value at line {line}, field {field}")]
    NonFinite { line: usize, field: usize },
    #[error("input contains no data")]
    Empty,
    #[error("block {block} has shape {found_rows}x{found_cols}, expected {rows}x{cols}")]
    ShapeMismatch {
        block: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at index {index}")]
    NonFiniteEntry { index: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64]) -> Result<(), MatrixIoError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(MatrixIoError::NonFiniteEntry { index }),
        None => Ok(()),
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixIoError> {
        if data.len() != rows * cols {
            return Err(MatrixIoError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MatrixIoError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MatrixIoError::RaggedRows {
                    line: i + 1,
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// # Panics
    /// If `value` is not finite.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "matrix entries must be finite");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// # Panics
    /// If `f` produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "matrix entry ({i},{j}) is not finite: {v}");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Frobenius inner product `<self, other>`.
    ///
    /// # Panics
    /// If the shapes differ.
    pub fn dot(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in dot");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Matrix product `self · rhs`.
    ///
    /// # Panics
    /// If the inner dimensions differ.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Self {
        assert_eq!(self.cols, rhs.rows, "inner dimension mismatch in matmul");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (l, &w) in self.row(i).iter().enumerate() {
                if w != 0.0 {
                    for (o, v) in dst.iter_mut().zip(rhs.row(l)) {
                        *o += w * v;
                    }
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`, i.e. all pairwise row inner products.
    ///
    /// # Panics
    /// If the row lengths differ.
    pub fn matmul_t(&self, rhs: &DenseMatrix) -> Self {
        assert_eq!(self.cols, rhs.cols, "row length mismatch in matmul_t");
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = a.iter().zip(rhs.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · rhs`.
    ///
    /// # Panics
    /// If the row counts differ.
    pub fn t_matmul(&self, rhs: &DenseMatrix) -> Self {
        assert_eq!(self.rows, rhs.rows, "row count mismatch in t_matmul");
        let mut out = Self::zeros(self.cols, rhs.cols);
        for l in 0..self.rows {
            let r = rhs.row(l);
            for (i, &w) in self.row(l).iter().enumerate() {
                if w != 0.0 {
                    for (o, v) in out.data[i * rhs.cols..(i + 1) * rhs.cols].iter_mut().zip(r) {
                        *o += w * v;
                    }
                }
            }
        }
        out
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| f(self[(i, j)]))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Channel-major 3-tensor: element `(k, i, j)` lives at `k*rows*cols + i*cols + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor3 {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseTensor3 {
    pub fn new(
        channels: usize,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Self, MatrixIoError> {
        if data.len() != channels * rows * cols {
            return Err(MatrixIoError::LengthMismatch {
                rows: channels * rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    /// Stacks equally shaped matrices as channels.
    pub fn from_channels(blocks: &[DenseMatrix]) -> Result<Self, MatrixIoError> {
        let first = blocks.first().ok_or(MatrixIoError::Empty)?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(blocks.len() * rows * cols);
        for (b, m) in blocks.iter().enumerate() {
            if m.shape() != (rows, cols) {
                return Err(MatrixIoError::ShapeMismatch {
                    block: b + 1,
                    rows,
                    cols,
                    found_rows: m.rows(),
                    found_cols: m.cols(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self {
            channels: blocks.len(),
            rows,
            cols,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let len = self.rows * self.cols;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn channel_matrix(&self, k: usize) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.channel(k).to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &DenseTensor3) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize, usize)> for DenseTensor3 {
    type Output = f64;
    fn index(&self, (k, i, j): (usize, usize, usize)) -> &f64 {
        &self.data[(k * self.rows + i) * self.cols + j]
    }
}

impl IndexMut<(usize, usize, usize)> for DenseTensor3 {
    fn index_mut(&mut self, (k, i, j): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(k * self.rows + i) * self.cols + j]
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MatrixIoError + '_ {
    move |source| MatrixIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses CSV lines into a matrix. `first_line` is the 1-based file line
/// number of `lines[0]`, used in error reports.
fn parse_block(lines: &[&str], first_line: usize) -> Result<DenseMatrix, MatrixIoError> {
    let mut cols = None;
    let mut data = Vec::new();
    for (offset, raw) in lines.iter().enumerate() {
        let line = first_line + offset;
        let fields: Vec<&str> = if raw.trim().is_empty() {
            Vec::new()
        } else {
            raw.split(',').collect()
        };
        let expected = *cols.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(MatrixIoError::RaggedRows {
                line,
                expected,
                found: fields.len(),
            });
        }
        for (f, token) in fields.iter().enumerate() {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| MatrixIoError::Parse {
                line,
                field: f + 1,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(MatrixIoError::NonFinite { line, field: f + 1 });
            }
            data.push(v);
        }
    }
    let cols = cols.ok_or(MatrixIoError::Empty)?;
    if cols == 0 {
        return Err(MatrixIoError::Empty);
    }
    DenseMatrix::new(lines.len(), cols, data)
}

fn file_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines
}

pub fn parse_matrix_csv(text: &str) -> Result<DenseMatrix, MatrixIoError> {
    let lines = file_lines(text);
    if lines.is_empty() {
        return Err(MatrixIoError::Empty);
    }
    parse_block(&lines, 1)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DenseMatrix, MatrixIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_matrix_csv(&text)
}

fn push_value(out: &mut String, v: f64) {
    // 17 significant digits round-trips every f64 exactly.
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn push_matrix_rows(out: &mut String, rows: usize, cols: usize, data: &[f64]) {
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            push_value(out, data[i * cols + j]);
        }
        out.push('\n');
    }
}

pub fn format_matrix_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    push_matrix_rows(&mut out, m.rows, m.cols, &m.data);
    out
}

pub fn write_matrix_csv(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<(), MatrixIoError> {
    let path = path.as_ref();
    fs::write(path, format_matrix_csv(m)).map_err(io_err(path))
}

pub fn parse_tensor3(text: &str) -> Result<DenseTensor3, MatrixIoError> {
    let lines = file_lines(text);
    let mut blocks = Vec::new();
    let mut start = 0;
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if idx > start {
                blocks.push(parse_block(&lines[start..idx], start + 1)?);
            }
            start = idx + 1;
        }
    }
    if lines.len() > start {
        blocks.push(parse_block(&lines[start..], start + 1)?);
    }
    DenseTensor3::from_channels(&blocks)
}

pub fn read_tensor3(path: impl AsRef<Path>) -> Result<DenseTensor3, MatrixIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_tensor3(&text)
}

pub fn format_tensor3(t: &DenseTensor3) -> String {
    let mut out = String::new();
    for k in 0..t.channels {
        if k > 0 {
            out.push('\n');
        }
        push_matrix_rows(&mut out, t.rows, t.cols, t.channel(k));
    }
    out
}

pub fn write_tensor3(t: &DenseTensor3, path: impl AsRef<Path>) -> Result<(), MatrixIoError> {
    let path = path.as_ref();
    fs::write(path, format_tensor3(t)).map_err(io_err(path))
}
