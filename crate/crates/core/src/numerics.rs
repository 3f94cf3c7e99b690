//! Dense vector and matrix kernels.
//!
//! Everything is `f64` and row-major. The checked entry points return
//! [`Error::Shape`] on mismatched operands; the `*_into` slice kernels are the
//! unchecked hot-path versions used by the forward and backward passes and
//! only `debug_assert!` their shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        DenseVector(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &DenseVector) -> Result<DenseVector> {
        check_len("add", self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.0)
    }

    /// Splits into consecutive pieces of the given lengths.
    pub fn split(&self, lens: &[usize]) -> Result<Vec<DenseVector>> {
        let total: usize = lens.iter().sum();
        check_len("split", self.len(), total)?;
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &len in lens {
            out.push(DenseVector(self.0[start..start + len].to_vec()));
            start += len;
        }
        Ok(out)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        DenseVector(v)
    }
}

impl FromIterator<f64> for DenseVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        DenseVector(iter.into_iter().collect())
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("from_vec", format!("{rows}x{cols}"), format!("{} values", data.len())));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix { rows: rows.len(), cols, data })
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.data)
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("len {a}"), format!("len {b}")));
    }
    Ok(())
}

pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols != v.len() {
        return Err(Error::shape("matvec", m.shape_str(), format!("vector len {}", v.len())));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v.as_slice(), &mut out);
    Ok(DenseVector(out))
}

pub fn hadamard(a: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
    check_len("hadamard", a.len(), b.len())?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).collect())
}

pub fn concat(parts: &[&DenseVector]) -> DenseVector {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(len);
    for p in parts {
        out.extend_from_slice(p.as_slice());
    }
    DenseVector(out)
}

/// `w * x + b`.
pub fn affine(w: &DenseMatrix, b: &DenseVector, x: &DenseVector) -> Result<DenseVector> {
    if w.cols != x.len() {
        return Err(Error::shape("affine", w.shape_str(), format!("input len {}", x.len())));
    }
    if w.rows != b.len() {
        return Err(Error::shape("affine", w.shape_str(), format!("bias len {}", b.len())));
    }
    let mut out = b.0.clone();
    matvec_acc(w, x.as_slice(), &mut out);
    Ok(DenseVector(out))
}

pub fn tanh_vec(x: &DenseVector) -> DenseVector {
    x.0.iter().map(|v| v.tanh()).collect()
}

// Slice kernels.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `out = m * v`
pub fn matvec_into(m: &DenseMatrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), v);
    }
}

/// `out += m * v`
pub fn matvec_acc(m: &DenseMatrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(m.row(r), v);
    }
}

/// `out += mᵀ * v`
pub fn matvec_t_acc(m: &DenseMatrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, v.len());
    debug_assert_eq!(m.cols, out.len());
    for (r, &scale) in v.iter().enumerate() {
        if scale == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(r)) {
            *o += scale * w;
        }
    }
}

/// `dst += left ⊗ right`, with `dst` laid out as a `left.len() x right.len()` row-major block.
pub fn outer_acc(left: &[f64], right: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(dst.len(), left.len() * right.len());
    let cols = right.len();
    for (r, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (d, x) in dst[r * cols..(r + 1) * cols].iter_mut().zip(right) {
            *d += l * x;
        }
    }
}

/// `dst += scale * src`
pub fn axpy(scale: f64, src: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(src.len(), dst.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
