//! Dense row-major containers and elementwise activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows.checked_mul(cols).ok_or_else(|| Error::DataLength {
            dims: vec![rows, cols],
            len: data.len(),
        })?;
        if data.len() != expected {
            return Err(Error::DataLength {
                dims: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("from_rows", format!("{cols} columns"), format!("row {i} has {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain triple-loop product, accumulating over the shared dimension in ascending order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape_err(
                "matmul",
                format!("rhs with {} rows", self.cols),
                format!("{:?}", rhs.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(shape_err("vstack", format!("{cols} columns"), format!("{}", p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(shape_err("hstack", format!("{rows} rows"), format!("{}", p.rows)));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }
}

/// Dense row-major rank-3 tensor, used for per-expert parameter stacks `(E, D1, D2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        let expected = d0.checked_mul(d1).and_then(|v| v.checked_mul(d2));
        if expected != Some(data.len()) {
            return Err(Error::DataLength {
                dims: vec![d0, d1, d2],
                len: data.len(),
            });
        }
        Ok(Self {
            dims: [d0, d1, d2],
            data,
        })
    }

    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn random<R: Rng + ?Sized>(d0: usize, d1: usize, d2: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..d0 * d1 * d2).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            dims: [d0, d1, d2],
            data,
        }
    }

    /// Stacks equally shaped matrices along a new leading axis.
    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let (d1, d2) = slices.first().map_or((0, 0), Matrix::shape);
        let mut data = Vec::with_capacity(slices.len() * d1 * d2);
        for s in slices {
            if s.shape() != (d1, d2) {
                return Err(shape_err("from_slices", format!("{:?}", (d1, d2)), format!("{:?}", s.shape())));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Self {
            dims: [slices.len(), d1, d2],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
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

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let [_, d1, d2] = self.dims;
        self.data[(i * d1 + j) * d2 + k]
    }

    pub fn slice(&self, e: usize) -> &[f64] {
        let stride = self.dims[1] * self.dims[2];
        &self.data[e * stride..(e + 1) * stride]
    }

    pub fn slice_mut(&mut self, e: usize) -> &mut [f64] {
        let stride = self.dims[1] * self.dims[2];
        &mut self.data[e * stride..(e + 1) * stride]
    }

    pub fn matrix(&self, e: usize) -> Matrix {
        Matrix {
            rows: self.dims[1],
            cols: self.dims[2],
            data: self.slice(e).to_vec(),
        }
    }

    /// Transposes every slice: `(E, D1, D2)` becomes `(E, D2, D1)`.
    pub fn transpose_inner(&self) -> Tensor3 {
        let [e, d1, d2] = self.dims;
        let mut out = Tensor3::zeros(e, d2, d1);
        for x in 0..e {
            let src = self.slice(x);
            let dst = out.slice_mut(x);
            for i in 0..d1 {
                for j in 0..d2 {
                    dst[j * d1 + i] = src[i * d2 + j];
                }
            }
        }
        out
    }

    /// Columns `[start, end)` of the last axis for every slice.
    pub fn slice_last(&self, start: usize, end: usize) -> Tensor3 {
        let [e, d1, d2] = self.dims;
        let mut data = Vec::with_capacity(e * d1 * (end - start));
        for row in self.data.chunks(d2) {
            data.extend_from_slice(&row[start..end]);
        }
        Tensor3 {
            dims: [e, d1, end - start],
            data,
        }
    }

    /// Rows `[start, end)` of the middle axis for every slice.
    pub fn slice_middle(&self, start: usize, end: usize) -> Tensor3 {
        let [e, _, d2] = self.dims;
        let mut data = Vec::with_capacity(e * (end - start) * d2);
        for x in 0..e {
            data.extend_from_slice(&self.slice(x)[start * d2..end * d2]);
        }
        Tensor3 {
            dims: [e, end - start, d2],
            data,
        }
    }

    /// Inverse of [`Tensor3::slice_last`] over a full partition.
    pub fn concat_last(parts: &[Tensor3]) -> Result<Tensor3> {
        let Some(first) = parts.first() else {
            return Ok(Tensor3::zeros(0, 0, 0));
        };
        let [e, d1, _] = first.dims;
        if let Some(p) = parts.iter().find(|p| p.dims[0] != e || p.dims[1] != d1) {
            return Err(shape_err("concat_last", format!("({e}, {d1}, _)"), format!("{:?}", p.dims)));
        }
        let d2: usize = parts.iter().map(|p| p.dims[2]).sum();
        let mut data = Vec::with_capacity(e * d1 * d2);
        for r in 0..e * d1 {
            for p in parts {
                let w = p.dims[2];
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Ok(Tensor3 { dims: [e, d1, d2], data })
    }

    /// Inverse of [`Tensor3::slice_middle`] over a full partition.
    pub fn concat_middle(parts: &[Tensor3]) -> Result<Tensor3> {
        let Some(first) = parts.first() else {
            return Ok(Tensor3::zeros(0, 0, 0));
        };
        let [e, _, d2] = first.dims;
        if let Some(p) = parts.iter().find(|p| p.dims[0] != e || p.dims[2] != d2) {
            return Err(shape_err("concat_middle", format!("({e}, _, {d2})"), format!("{:?}", p.dims)));
        }
        let d1: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(e * d1 * d2);
        for x in 0..e {
            for p in parts {
                data.extend_from_slice(p.slice(x));
            }
        }
        Ok(Tensor3 { dims: [e, d1, d2], data })
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err("add_assign", format!("{:?}", self.dims), format!("{:?}", other.dims)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Activation between the two expert MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Identity => x,
        }
    }

    /// Exact derivative of [`Activation::eval`]. ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply(self, pre: &Matrix) -> Matrix {
        pre.map(|v| self.eval(v))
    }

    /// `upstream ⊙ F'(pre)`.
    pub fn grad(self, pre: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if pre.shape() != upstream.shape() {
            return Err(shape_err(
                "activation_grad",
                format!("{:?}", pre.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let data = pre
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&p, &u)| u * self.derivative(p))
            .collect();
        Matrix::new(pre.rows(), pre.cols(), data)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}
