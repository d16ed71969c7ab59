//! Dense row-major `f64` arrays and the numeric kernels shared by the eager
//! and recording backends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len(), cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Tensor::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Views any tensor as a 2-D `[rows, cols]` matrix.
    pub fn as_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Copies rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Ok(zip(self, other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        Ok(zip(self, other, |a, b| a - b))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, c: f64) -> Result<()> {
        same_shape("add_assign_scaled", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let (ca, cb) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (ca + cb));
        for r in 0..self.rows() {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor {
            shape: vec![self.rows(), ca + cb],
            data,
        })
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `out[m×n] (+)= alpha · A[m×k] · B[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the slices cover every index reachable under the given strides,
    // which the callers derive from matching matrix shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x · wᵀ` for `x: [rows, in]`, `w: [out, in]`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (rows, inp) = (x.rows(), x.cols());
    if w.shape.len() != 2 || w.shape[1] != inp {
        return Err(Error::shape(
            "matmul_nt",
            format!("input {:?} against weight {:?}", x.shape, w.shape),
        ));
    }
    let out = w.shape[0];
    let mut data = vec![0.0; rows * out];
    gemm(rows, inp, out, &x.data, inp, 1, &w.data, 1, inp, 0.0, &mut data);
    let mut shape = x.shape.clone();
    if shape.is_empty() {
        shape.push(out);
    } else {
        *shape.last_mut().unwrap() = out;
    }
    Ok(Tensor { shape, data })
}

/// `g · w` for `g: [rows, out]`, `w: [out, in]` (input gradient of [`matmul_nt`]).
pub fn matmul_nn(g: &Tensor, w: &Tensor) -> Tensor {
    let (rows, out) = (g.rows(), g.cols());
    let inp = w.shape[1];
    let mut data = vec![0.0; rows * inp];
    gemm(rows, out, inp, &g.data, out, 1, &w.data, inp, 1, 0.0, &mut data);
    let mut shape = g.shape.clone();
    *shape.last_mut().unwrap() = inp;
    Tensor { shape, data }
}

/// `acc += gᵀ · x` for `g: [rows, out]`, `x: [rows, in]` (weight gradient).
pub fn matmul_tn_acc(g: &Tensor, x: &Tensor, acc: &mut Tensor) {
    let (rows, out) = (g.rows(), g.cols());
    let inp = x.cols();
    gemm(out, rows, inp, &g.data, 1, out, &x.data, inp, 1, 1.0, &mut acc.data);
}

pub fn add_row_bias(y: &mut Tensor, bias: &Tensor) -> Result<()> {
    let c = y.cols();
    if bias.len() != c {
        return Err(Error::shape(
            "add_row_bias",
            format!("bias of {} against {} columns", bias.len(), c),
        ));
    }
    for row in y.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums of a `[rows, cols]` matrix accumulated into `acc`.
pub fn col_sums_acc(g: &Tensor, acc: &mut [f64]) {
    let c = g.cols();
    for row in g.data.chunks(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (r, i, o) = (x.rows(), x.cols(), w.shape()[0]);
        let mut out = vec![0.0; r * o];
        for a in 0..r {
            for b in 0..o {
                out[a * o + b] = (0..i).map(|k| x.data[a * i + k] * w.data[b * i + k]).sum();
            }
        }
        out
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_kernels_agree_with_naive_loops() {
        let x = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let w = Tensor::matrix(2, 4, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        let y = matmul_nt(&x, &w).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        for (a, b) in y.data().iter().zip(naive_nt(&x, &w)) {
            assert!((a - b).abs() < 1e-12);
        }

        let g = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let gx = matmul_nn(&g, &w);
        for r in 0..3 {
            for k in 0..4 {
                let e: f64 = (0..2).map(|o| g.data[r * 2 + o] * w.data[o * 4 + k]).sum();
                assert!((gx.data[r * 4 + k] - e).abs() < 1e-12);
            }
        }
        let mut gw = Tensor::zeros(&[2, 4]);
        matmul_tn_acc(&g, &x, &mut gw);
        for o in 0..2 {
            for k in 0..4 {
                let e: f64 = (0..3).map(|r| g.data[r * 2 + o] * x.data[r * 4 + k]).sum();
                assert!((gw.data[o * 4 + k] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vector_input_keeps_rank() {
        let x = Tensor::vector(vec![3.0, 4.0]);
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let y = matmul_nt(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1]);
        assert_eq!(y.data(), &[7.0]);
    }
}
