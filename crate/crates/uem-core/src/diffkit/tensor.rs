//! Dense row-major f64 tensors and the forward kernels shared by taped and
//! plain evaluation. Every reduction runs in fixed left-to-right index order
//! so repeated evaluation is bit-identical.

use crate::error::{Error, Result};

/// Floor for natural-log arguments. Smaller positive inputs are clamped here
/// (and counted by the tape) instead of producing -inf.
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating extent product and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || n != data.len() {
            return Err(Error::BadTensor {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "tensor data".to_string(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; skips finiteness validation.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::raw(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::raw(shape, vec![0.0; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty {
                what: "row list".to_string(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape_mismatch("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, op: &str) -> Result<()> {
        if !self.is_matrix() {
            return Err(Error::shape_contract(op, "a 2-D tensor", &self.shape));
        }
        Ok(())
    }

    // ---- forward kernels ------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_matrix("matmul")?;
        rhs.expect_matrix("matmul")?;
        if self.cols() != rhs.rows() {
            return Err(Error::shape_mismatch("matmul", &self.shape, &rhs.shape));
        }
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &rhs.data[p * m..(p + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (d, &b) in dst.iter_mut().zip(row.iter()) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    pub fn transposed(&self) -> Result<Tensor> {
        self.expect_matrix("transpose")?;
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    fn zip(&self, rhs: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape_mismatch(op, &self.shape, &rhs.shape));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::raw(self.shape.clone(), data))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|v| v * k).collect())
    }

    pub fn relu(&self) -> Tensor {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|&v| v.max(0.0)).collect(),
        )
    }

    pub fn exp(&self) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|v| v.exp()).collect())
    }

    /// Natural log with the `LN_FLOOR` clamp. Negative entries are domain
    /// errors; entries in `[0, LN_FLOOR)` are clamped and counted.
    pub fn ln_clamped(&self) -> Result<(Tensor, u64)> {
        let mut clamped = 0u64;
        let mut out = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::LogDomain { value: v, index: i });
            }
            if v < LN_FLOOR {
                clamped += 1;
                out.push(LN_FLOOR.ln());
            } else {
                out.push(v.ln());
            }
        }
        Ok((Tensor::raw(self.shape.clone(), out), clamped))
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|&v| stable_sigmoid(v)).collect(),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.data {
            s += v;
        }
        s
    }

    /// Row sums of a 2-D tensor as an (n, 1) column.
    pub fn row_sum(&self) -> Result<Tensor> {
        self.expect_matrix("row_sum")?;
        let (n, m) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..m {
                s += self.data[i * m + j];
            }
            out.push(s);
        }
        Ok(Tensor::raw(vec![n, 1], out))
    }

    /// Inner product of two same-shape tensors, flattened.
    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::shape_mismatch("dot", &self.shape, &rhs.shape));
        }
        let mut s = 0.0;
        for (a, b) in self.data.iter().zip(rhs.data.iter()) {
            s += a * b;
        }
        Ok(s)
    }

    /// L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.data {
            s += v * v;
        }
        s.sqrt()
    }

    /// Rows scaled to unit L2 norm. Zero rows are errors.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        self.expect_matrix("normalize_rows")?;
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let r = norm_of(self.row(i));
            if r == 0.0 {
                return Err(Error::ZeroNormRow { row: i });
            }
            for j in 0..m {
                out[i * m + j] = self.data[i * m + j] / r;
            }
        }
        Ok(Tensor::raw(self.shape.clone(), out))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.expect_matrix("softmax_rows")?;
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = self.row(i);
            let mx = row_max(row);
            let mut s = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                s += e;
            }
            for j in 0..m {
                out[i * m + j] /= s;
            }
        }
        Ok(Tensor::raw(self.shape.clone(), out))
    }

    /// Row-wise log-sum-exp as an (n, 1) column, optionally over a 0/1 mask.
    /// The max is taken over the selected entries only, so the result stays
    /// finite for any logit scale. Each row must select at least one entry.
    pub fn logsumexp_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        self.expect_matrix("logsumexp_rows")?;
        let (n, m) = (self.rows(), self.cols());
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(Error::shape_mismatch("logsumexp_rows mask", &[n, m], &[mk.len()]));
            }
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if mask.map_or(true, |mk| mk[i * m + j]) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Empty {
                    what: format!("logsumexp row {i} selection"),
                });
            }
            let mut s = 0.0;
            for j in 0..m {
                if mask.map_or(true, |mk| mk[i * m + j]) {
                    s += (row[j] - mx).exp();
                }
            }
            out.push(mx + s.ln());
        }
        Ok(Tensor::raw(vec![n, 1], out))
    }

    /// Pairwise Euclidean distances between the rows of `self` (n, d) and
    /// `rhs` (m, d), as an (n, m) matrix.
    pub fn pairwise_dist(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_matrix("pairwise_dist")?;
        rhs.expect_matrix("pairwise_dist")?;
        if self.cols() != rhs.cols() {
            return Err(Error::shape_mismatch("pairwise_dist", &self.shape, &rhs.shape));
        }
        let (n, m, d) = (self.rows(), rhs.rows(), self.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                let b = rhs.row(j);
                let mut s = 0.0;
                for k in 0..d {
                    let diff = a[k] - b[k];
                    s += diff * diff;
                }
                out.push(s.sqrt());
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    /// Replicate a vector (d,) into an (n, d) matrix.
    pub fn tile_rows(&self, n: usize) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::shape_contract("tile_rows", "a 1-D tensor", &self.shape));
        }
        let d = self.shape[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        Tensor::new(vec![n, d], out)
    }

    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_matrix("concat_cols")?;
        rhs.expect_matrix("concat_cols")?;
        if self.rows() != rhs.rows() {
            return Err(Error::shape_mismatch("concat_cols", &self.shape, &rhs.shape));
        }
        let (n, a, b) = (self.rows(), self.cols(), rhs.cols());
        let mut out = Vec::with_capacity(n * (a + b));
        for i in 0..n {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(rhs.row(i));
        }
        Ok(Tensor::raw(vec![n, a + b], out))
    }

    pub fn concat_rows(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_matrix("concat_rows")?;
        rhs.expect_matrix("concat_rows")?;
        if self.cols() != rhs.cols() {
            return Err(Error::shape_mismatch("concat_rows", &self.shape, &rhs.shape));
        }
        let mut out = self.data.clone();
        out.extend_from_slice(&rhs.data);
        Ok(Tensor::raw(vec![self.rows() + rhs.rows(), self.cols()], out))
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn norm_of(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x * x;
    }
    s.sqrt()
}

pub(crate) fn row_max(v: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &x in v {
        if x > mx {
            mx = x;
        }
    }
    mx
}

/// Euclidean distance between two slices of equal length.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// Cosine similarity between two slices. Zero-norm inputs yield an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm_of(a), norm_of(b));
    if na == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNormRow { row: 1 });
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    Ok(s / (na * nb))
}
