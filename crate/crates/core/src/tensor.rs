//! Dense row-major `f64` tensors.
//!
//! Every array-valued quantity in the crate is a [`Tensor`]. Most operations
//! work on rank-2 tensors (tokens × features); vectors are rank-1.

use std::fmt;
use std::ops::Range;

use crate::error::{FluxError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FluxError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a rank-2 tensor from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows × last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(FluxError::NonFinite { op })
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(FluxError::shape(op, &self.shape, shape));
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        self.expect_shape(op, &other.shape)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.last_dim());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Adds `v` to every row.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if v.len() != d {
            return Err(FluxError::shape("add_row", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row element-wise by `v`.
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if v.len() != d {
            return Err(FluxError::shape("mul_row", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(&v.data) {
                *a *= b;
            }
        }
        Ok(out)
    }

    /// Column sums of a `[rows × d]` view, as a rank-1 tensor of length `d`.
    pub fn sum_rows(&self) -> Tensor {
        let d = self.last_dim();
        let mut out = vec![0.0; d];
        for row in self.data.chunks(d.max(1)) {
            for (a, b) in out.iter_mut().zip(row) {
                *a += b;
            }
        }
        Tensor::from_vec(out)
    }

    /// Stacks two `[n × d]` tensors along the row axis.
    pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
            return Err(FluxError::shape("concat_rows", &a.shape, &b.shape));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            shape: vec![a.rows() + b.rows(), a.last_dim()],
            data,
        })
    }

    /// Rows `range` of a rank-2 tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Tensor {
        let d = self.last_dim();
        Tensor {
            shape: vec![range.len(), d],
            data: self.data[range.start * d..range.end * d].to_vec(),
        }
    }

    /// Joins two tensors with equal row counts side by side.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rows() != b.rows() {
            return Err(FluxError::shape("concat_cols", &a.shape, &b.shape));
        }
        let (da, db) = (a.last_dim(), b.last_dim());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Tensor {
            shape: vec![a.rows(), da + db],
            data,
        })
    }

    /// Columns `range` of every row.
    pub fn slice_cols(&self, range: Range<usize>) -> Tensor {
        let n = self.rows();
        let mut data = Vec::with_capacity(n * range.len());
        for i in 0..n {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Tensor {
            shape: vec![n, range.len()],
            data,
        }
    }

    /// Writes `src` into columns starting at `offset`.
    pub fn set_cols(&mut self, offset: usize, src: &Tensor) {
        let w = src.last_dim();
        for i in 0..self.rows() {
            self.row_mut(i)[offset..offset + w].copy_from_slice(src.row(i));
        }
    }

    /// Splits a vector into `parts` equal contiguous chunks.
    pub fn chunk(&self, parts: usize) -> Result<Vec<Tensor>> {
        if parts == 0 || !self.len().is_multiple_of(parts) {
            return Err(FluxError::shape("chunk", &self.shape, &[parts]));
        }
        let w = self.len() / parts;
        Ok(self
            .data
            .chunks(w)
            .map(|c| Tensor::from_vec(c.to_vec()))
            .collect())
    }

    /// Bitwise content hash (FNV-1a over shape and IEEE bits).
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::rng::Fnv1a::new();
        for &s in &self.shape {
            h.write(&(s as u64).to_le_bytes());
        }
        for v in &self.data {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_and_col_slicing() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(t.slice_cols(1..3).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(t.slice_rows(1..2).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(t.transpose().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(t.sum_rows().data(), &[5.0, 7.0, 9.0]);
        let joined = Tensor::concat_cols(&t.slice_cols(0..1), &t.slice_cols(1..3)).unwrap();
        assert_eq!(joined, t);
    }

    #[test]
    fn chunk_requires_even_split() {
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = v.chunk(3).unwrap();
        assert_eq!(parts[2].data(), &[5.0, 6.0]);
        assert!(v.chunk(4).is_err());
    }

    #[test]
    fn content_hash_sees_shape() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([3, 2]);
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
