//! Dense f32 kernels with multiply-accumulate accounting.
//!
//! Every matrix product goes through [`matmul`], which charges
//! `a.rows * a.cols * b.cols` MACs to a named scope on a [`MacCounter`].
//! Nothing else is counted: residual additions, softmax exponentials and
//! normalizations are free under the 1 FLOP = 1 MAC convention used by the
//! cost model.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Constant `sqrt(2 / pi)` of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("{op}: parameter length {got} does not match {expected} columns")]
    ParamLength {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Row-major 32-bit matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &DenseMatrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols, "column block out of range");
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + start..r * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(r));
        }
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<(), KernelError> {
        if self.shape() != other.shape() {
            return Err(KernelError::Shape {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiply-accumulate tally, broken down by scope label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    total: u64,
    per_scope: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, scope: &str, macs: u64) {
        self.total += macs;
        match self.per_scope.get_mut(scope) {
            Some(v) => *v += macs,
            None => {
                self.per_scope.insert(scope.to_owned(), macs);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn scope(&self, scope: &str) -> u64 {
        self.per_scope.get(scope).copied().unwrap_or(0)
    }

    pub fn per_scope(&self) -> &BTreeMap<String, u64> {
        &self.per_scope
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (k, v) in &other.per_scope {
            self.add(k, *v);
        }
    }
}

/// `a * b`, charging `a.rows * a.cols * b.cols` MACs to `scope`.
pub fn matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    counter: &mut MacCounter,
    scope: &str,
) -> Result<DenseMatrix, KernelError> {
    if a.cols != b.rows {
        return Err(KernelError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(m, n);
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: all three buffers are dense row-major with the strides given
        // and lengths m*k, k*n and m*n respectively.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                c.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    counter.add(scope, (m * k * n) as u64);
    Ok(c)
}

/// Row softmax; `-inf` entries are masked and come out as exactly 0.
pub fn softmax_rows(m: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_rows_in_place(m: &mut DenseMatrix) -> Result<(), KernelError> {
    for r in 0..m.rows {
        softmax_slice(m.row_mut(r)).map_err(|_| KernelError::FullyMaskedRow { row: r })?;
    }
    Ok(())
}

/// Softmax over one row. Errors when every entry is `-inf`.
pub fn softmax_slice(row: &mut [f32]) -> Result<(), KernelError> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(KernelError::FullyMaskedRow { row: 0 });
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = if *v == f32::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

/// Per-row standardization followed by `gain * x + bias`.
pub fn layer_norm(
    x: &DenseMatrix,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> Result<DenseMatrix, KernelError> {
    for p in [gain, bias] {
        if p.len() != x.cols {
            return Err(KernelError::ParamLength {
                op: "layer_norm",
                expected: x.cols,
                got: p.len(),
            });
        }
    }
    let mut out = DenseMatrix::zeros(x.rows, x.cols);
    let n = x.cols as f32;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    Ok(out)
}

/// Tanh-approximated GELU:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    gelu_in_place(&mut out);
    out
}

pub fn gelu_in_place(x: &mut DenseMatrix) {
    x.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
}
