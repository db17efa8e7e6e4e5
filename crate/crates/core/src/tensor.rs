//! Dense row-major `f32` tensors.
//!
//! Only what the denoiser needs: rank-1/2 storage, matrix products in the
//! two orientations used by fully-connected layers, and elementwise maps.
//! All kernels are plain loops so results do not depend on batch size or
//! thread count.

use crate::error::{shape, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "dimensions must be positive");
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix view. Rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(format!("{what} must be a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul lhs")?;
        let (k2, n) = rhs.expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self[m×k] · rhs[n×k]ᵀ`, the fully-connected layer product `x Wᵀ`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul_nt lhs")?;
        let (n, k2) = rhs.expect_matrix("matmul_nt rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul_nt inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self[k×m]ᵀ · rhs[k×n]`, used for weight gradients.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = self.expect_matrix("matmul_tn lhs")?;
        let (k2, n) = rhs.expect_matrix("matmul_tn rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul_tn inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![0.0f32; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other, "elementwise op")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `a·self + b·other`, written so that `a=1,b=0` and `a=0,b=1` reproduce
    /// one operand exactly.
    pub fn affine_combine(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f32 {
        self.sum_squares().sqrt()
    }

    /// Column sums of a matrix, as a rank-1 tensor.
    pub fn col_sums(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("col_sums")?;
        let mut out = vec![0.0f32; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Tensor::new(vec![n], out)
    }

    /// Per-row L2 norms of a matrix.
    pub fn row_norms(&self) -> Vec<f32> {
        (0..self.rows()).map(|i| self.row(i).iter().map(|v| v * v).sum::<f32>().sqrt()).collect()
    }

    /// Select rows by index.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows needs at least one index"));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(shape_err(format!("row {i} out of range for {m} rows")));
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::matrix(ids.len(), n, out)
    }

    /// Stack equal-width matrices vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("vstack of nothing"))?;
        let n = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != n {
                return Err(shape_err("vstack width mismatch"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, n, data)
    }

    /// FNV-1a over the raw bit patterns; identical iff every value is bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators let the compiler vectorize.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn shape_err(msg: impl Into<String>) -> crate::error::Error {
    shape(msg)
}
