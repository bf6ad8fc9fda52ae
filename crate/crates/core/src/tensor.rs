//! Dense row-major tensors and the value-level kernels shared by the
//! inference path and the autodiff graph.
//!
//! Every reduction runs in ascending index order. Graph ops compute their
//! forward values by calling these same kernels, which is what makes the
//! graph forward and the cache-backed forward agree bit for bit.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("expects {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    shape: vec![rows.len(), cols],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Matrix product. Each output element accumulates over the inner index
    /// in ascending order starting from zero.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let dim_err = || Error::Dimension {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let (m, k) = self.require_matrix("matmul").map_err(|_| dim_err())?;
        let (k2, n) = other.require_matrix("matmul").map_err(|_| dim_err())?;
        if k != k2 {
            return Err(dim_err());
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Softmax along `axis`, stabilised by subtracting each slice's maximum.
    /// Entries equal to `-inf` come out as exact zeros.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, extent, inner) = lanes(&self.shape, axis)?;
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = T::neg_infinity();
                for j in 0..extent {
                    max = max.max(self.data[idx(j)]);
                }
                if max == T::neg_infinity() {
                    return Err(Error::DegenerateRow {
                        slice: o * inner + i,
                    });
                }
                let mut denom = T::zero();
                for j in 0..extent {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..extent {
                    out[idx(j)] /= denom;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Population standard deviation along `axis` (divides by the extent).
    pub fn reduce_std(&self, axis: usize) -> Result<Self> {
        let (outer, extent, inner) = lanes(&self.shape, axis)?;
        if extent == 0 {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "reduce_std over an empty axis".into(),
            });
        }
        let n = T::lit(extent as f64);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut mean = T::zero();
                for j in 0..extent {
                    mean += self.data[base + j * inner];
                }
                mean /= n;
                let mut var = T::zero();
                for j in 0..extent {
                    let d = self.data[base + j * inner] - mean;
                    var += d * d;
                }
                out.push((var / n).sqrt());
            }
        }
        Ok(Self {
            shape: reduced_shape(&self.shape, axis),
            data: out,
        })
    }

    /// Elementwise minimum and maximum along `axis`.
    pub fn reduce_minmax(&self, axis: usize) -> Result<(Self, Self)> {
        let (outer, extent, inner) = lanes(&self.shape, axis)?;
        if extent == 0 {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "reduce_minmax over an empty axis".into(),
            });
        }
        let mut mins = Vec::with_capacity(outer * inner);
        let mut maxs = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut lo = self.data[base];
                let mut hi = lo;
                for j in 1..extent {
                    let x = self.data[base + j * inner];
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                mins.push(lo);
                maxs.push(hi);
            }
        }
        let shape = reduced_shape(&self.shape, axis);
        Ok((
            Self {
                shape: shape.clone(),
                data: mins,
            },
            Self { shape, data: maxs },
        ))
    }

    /// Row subset. Indices must be strictly ascending and in range.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, _) = self.require_matrix("gather_rows")?;
        for (w, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index(format!("row {i} out of range for {n} rows")));
            }
            if w > 0 && idx[w - 1] >= i {
                return Err(Error::Index(format!(
                    "indices must be strictly ascending, got {} then {i}",
                    idx[w - 1]
                )));
            }
        }
        Ok(self.select_rows_unchecked(idx))
    }

    /// Row lookup allowing repeats and any order (embedding lookup).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, _) = self.require_matrix("select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        Ok(self.select_rows_unchecked(idx))
    }

    fn select_rows_unchecked(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c) = self.require_matrix("slice_rows")?;
        if start + len > n {
            return Err(Error::Index(format!(
                "rows {start}..{} out of range for {n} rows",
                start + len
            )));
        }
        Ok(Self {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if start + len > c {
            return Err(Error::Index(format!(
                "columns {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self {
            shape: vec![r, len],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape {
                shape: vec![],
                reason: "concat_cols of nothing".into(),
            });
        };
        let r = first.require_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_matrix("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape {
                shape: vec![],
                reason: "concat_rows of nothing".into(),
            });
        };
        let c = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c || p.shape.len() != 2 {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    /// Per-row RMS normalisation scaled by `gain` (length = columns).
    pub fn rms_norm(&self, gain: &Self, eps: T) -> Result<Self> {
        let (r, c) = self.require_matrix("rms_norm")?;
        if gain.len() != c {
            return Err(Error::Dimension {
                op: "rms_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.row(i);
            let inv = rms_inverse(row, eps);
            for (&x, &g) in row.iter().zip(&gain.data) {
                data.push(x * inv * g);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn silu(&self) -> Self {
        self.map(|x| x * sigmoid(x))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn rms_inverse<T: Real>(row: &[T], eps: T) -> T {
    let mut ms = T::zero();
    for &x in row {
        ms += x * x;
    }
    ms /= T::lit(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}
