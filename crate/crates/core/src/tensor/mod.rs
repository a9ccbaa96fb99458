//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Training runs in `f32`; gradient verification runs the same code in
//! `f64` through the [`Real`] abstraction.

mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    /// Name recorded in checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = beta * c + a * b` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass views whose extents fit inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass views whose extents fit inside the slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("{shape:?} with {} values", data.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Matrix from equal-length rows. An empty row list yields a `0 x cols` matrix.
    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("from_rows", format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::c(v)).collect())
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

    /// Leading dimension of a matrix; 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Element-type conversion through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
///
/// Rows are shifted by their maximum before exponentiation.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    match (x.shape().len(), axis) {
        (1, 0) | (2, 1) => {
            let mut out = x.clone();
            let c = x.cols();
            if c > 0 {
                for row in out.data_mut().chunks_mut(c) {
                    softmax_in_place(row);
                }
            }
            Ok(out)
        }
        (2, 0) => {
            let t = transpose(x);
            let s = softmax(&t, 1)?;
            Ok(transpose(&s))
        }
        _ => Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", x.shape()))),
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, over positions where `mask` is true.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let loss = g.cross_entropy(l, targets, mask)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_uniform() {
        let x = Tensor::<f64>::zeros(&[4]);
        let p = softmax(&x, 0).unwrap();
        for v in p.data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_log_ratio() {
        let x = Tensor::<f64>::from_f64(&[2], &[1f64.ln(), 3f64.ln()]).unwrap();
        let p = softmax(&x, 0).unwrap();
        // e^ln1 / (1 + 3), e^ln3 / (1 + 3)
        assert_abs_diff_eq!(p.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = Tensor::<f32>::from_f64(&[2], &[1000.0, 0.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert!(p.is_finite());
        assert_abs_diff_eq!(p.data()[0], 1.0, epsilon = 1e-6);
        assert!(p.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f64>::from_f64(&[2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 3.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(p.data()[0] + p.data()[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1] + p.data()[3], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let logits = Tensor::<f64>::zeros(&[3, 50]);
        let ce = cross_entropy(&logits, &[1, 7, 49], &[true; 3]).unwrap();
        assert_abs_diff_eq!(ce, 50f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ce, 3.912, epsilon = 1e-3);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut logits = Tensor::<f64>::zeros(&[4, 10]);
        let targets = [3, 1, 4, 1];
        for (t, &y) in targets.iter().enumerate() {
            logits.data_mut()[t * 10 + y] = 30.0;
        }
        let ce = cross_entropy(&logits, &targets, &[true; 4]).unwrap();
        assert!(ce < 1e-11, "{ce}");
    }

    #[test]
    fn cross_entropy_hand_computed() {
        // Row 0: logits [1, 2, 3], target 2 -> -log(e^3 / (e + e^2 + e^3))
        // Row 1: logits [0, 0, ln 2], target 0 -> -log(1 / (1 + 1 + 2)) = ln 4
        let logits =
            Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln()]).unwrap();
        let e = std::f64::consts::E;
        let row0 = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        let row1 = 4f64.ln();
        let ce = cross_entropy(&logits, &[2, 0], &[true, true]).unwrap();
        assert_abs_diff_eq!(ce, (row0 + row1) / 2.0, epsilon = 1e-12);
        // masking the second row leaves only the first
        let ce = cross_entropy(&logits, &[2, 0], &[true, false]).unwrap();
        assert_abs_diff_eq!(ce, row0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(cross_entropy(&logits, &[0, 1], &[false, false]).is_err());
        assert!(cross_entropy(&logits, &[0, 3], &[true, true]).is_err());
    }
}
