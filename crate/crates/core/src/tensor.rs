//! Dense row-major `f64` matrices and the seeded generator used to fill them.
//!
//! A [`Tensor`] is a plain value: it carries no gradient state. Gradient
//! tracking lives on an [`crate::autodiff::Tape`], which wraps tensors in
//! variables for the duration of one forward/backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data,
        }
    }
}

fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyShape((rows, cols)));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(rows, cols)?;
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                len: data.len(),
                shape: (rows, cols),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Internal constructor for results of finite arithmetic on valid tensors.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (n, m),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(n, m, data)
    }

    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(1, 1, vec![value])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        check_shape(shape.0, shape.1)?;
        Tensor::new(shape.0, shape.1, vec![value; shape.0 * shape.1])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros((n, n))?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Gaussian entries with mean 0 and standard deviation `std`.
    pub fn randn(shape: Shape, rng: &mut Rng, std: f64) -> Result<Self> {
        check_shape(shape.0, shape.1)?;
        let data = (0..shape.0 * shape.1).map(|_| std * rng.normal()).collect();
        Tensor::new(shape.0, shape.1, data)
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Result<Self> {
        check_shape(shape.0, shape.1)?;
        let data = (0..shape.0 * shape.1).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape.0, shape.1, data)
    }

    /// `diag(v)` for a column or row vector `v`.
    pub fn diag(v: &Tensor) -> Result<Self> {
        if v.rows != 1 && v.cols != 1 {
            return Err(Error::Shape {
                op: "diag",
                lhs: v.shape(),
                rhs: (v.len(), 1),
            });
        }
        let n = v.len();
        let mut t = Tensor::zeros((n, n))?;
        for (i, &x) in v.data.iter().enumerate() {
            t.data[i * n + i] = x;
        }
        Ok(t)
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(self.shape()));
        }
        Ok(self.data[0])
    }

    /// Writes one entry. Rejects non-finite values.
    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                index: r * self.cols + c,
                value,
            });
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    /// In-place update used by optimizers; the closure sees each element
    /// index alongside its current value.
    pub(crate) fn update_with(&mut self, mut f: impl FnMut(usize, f64) -> f64) -> Result<()> {
        for (i, v) in self.data.iter_mut().enumerate() {
            let nv = f(i, *v);
            if !nv.is_finite() {
                return Err(Error::NonFinite { index: i, value: nv });
            }
            *v = nv;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_parts(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(m, n, out))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        check_shape(idx.len(), self.cols)?;
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Shape {
                    op: "select_rows",
                    lhs: self.shape(),
                    rhs: (i, 0),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor::from_parts(idx.len(), self.cols, data))
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Little-endian bytes of the shape and every value, for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }
}

/// Seeded deterministic generator (ChaCha8). The same seed produces the
/// same stream on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream, e.g. one per experiment stage.
    pub fn fork(&mut self, tag: u64) -> Rng {
        use rand::RngCore;
        let s = self.inner.next_u64() ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::new(s)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi).sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        Uniform::new(0, n).sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, drawn uniformly without replacement.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zeros_are_exact() {
        assert_eq!(
            Tensor::identity(2).unwrap(),
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()
        );
        assert!(Tensor::zeros((2, 2)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        assert!(matches!(Tensor::zeros((0, 2)), Err(Error::EmptyShape(_))));
        assert!(Tensor::identity(0).is_err());
        assert!(Tensor::randn((3, 0), &mut Rng::new(0), 1.0).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::randn((3, 3), &mut Rng::new(0), 1.0).unwrap();
        let b = Tensor::randn((3, 3), &mut Rng::new(0), 1.0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Tensor::randn((3, 3), &mut Rng::new(1), 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn matmul_hand_cases() {
        let i = Tensor::identity(2).unwrap();
        let x = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(i.matmul(&x).unwrap(), x);
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0], [6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let m = Tensor::zeros((2, 3)).unwrap();
        let err = m.matmul(&m).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_rows(&[[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn serde_rejects_bad_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
    }
}
