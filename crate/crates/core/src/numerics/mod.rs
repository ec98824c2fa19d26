//! Dense tensors, the reverse-mode tape, and the finite-difference oracle.
//!
//! Everything is generic over [`Real`] so that training can run in `f32`
//! while gradient checks and closed-form tests run in `f64`.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GroupReport};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

/// Default epsilon for every LayerNorm in the crate.
pub const LN_EPS: f64 = 1e-6;

/// On-disk element type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float32" => Some(DType::Float32),
            "float64" => Some(DType::Float64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

/// Scalar type usable by tensors and the tape.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c[m×n] += a[m×k] · b[k×n]` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: out out of bounds");
                // SAFETY: strides and extents were bounds-checked above, and
                // `c` is borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
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
                        1.0,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl_real!(f32, DType::Float32, matrixmultiply::sgemm);
impl_real!(f64, DType::Float64, matrixmultiply::dgemm);

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    /// Rows and columns when viewed as a matrix (leading axes collapsed).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = *s.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(format!("non-finite values in {what}")))
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.as_f64()))
    }
}

/// Row-wise LayerNorm without affine parameters.
pub fn layer_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    if cols == 0 {
        return Err(Error::input("layer_norm needs at least one channel"));
    }
    if eps < 0.0 {
        return Err(Error::input("layer_norm eps must be non-negative"));
    }
    x.ensure_finite("layer_norm input (corrupted upstream state)")?;
    let mut out = vec![T::zero(); x.len()];
    kernels::layer_norm_rows(x.data(), rows, cols, T::lit(eps), &mut out, None);
    Tensor::new(x.shape().to_vec(), out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    z.ensure_finite("softmax logits")?;
    let (rows, cols) = z.dims2();
    let mut out = z.data().to_vec();
    kernels::softmax_rows(&mut out, rows, cols);
    Tensor::new(z.shape().to_vec(), out)
}

/// Interleaved `(cos(t·ω_i), sin(t·ω_i))` pairs with `ω_i = 10000^(-2i/dim)`.
///
/// Defined for every real `t`; shifted gate times above 1 are fine.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sinusoidal embedding dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let omega = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let (s, c) = (t * omega).sin_cos();
        out.push(c);
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let y = layer_norm(&row(&[1.0, 1.0, 1.0]), 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_fixed_point() {
        let y = layer_norm(&row(&[1.0, -1.0]), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_three_values() {
        // mean 5, variance 8/3
        let s = (8.0f64 / 3.0).sqrt();
        let expect = [-2.0 / s, 0.0, 2.0 / s];
        let y = layer_norm(&row(&[3.0, 5.0, 7.0]), 0.0).unwrap();
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rejects_non_finite() {
        let err = layer_norm(&row(&[1.0, f64::NAN]), 1e-6).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn layer_norm_affine_invariance() {
        let x = row(&[0.3, -1.7, 2.2, 0.9, -0.4]);
        let y = x.map(|v| 3.5 * v - 11.0);
        let a = layer_norm(&x, 0.0).unwrap();
        let b = layer_norm(&y, 0.0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::vector(vec![0.0f64; 3])).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let y = softmax(&Tensor::vector(vec![1000.0f64, 0.0])).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);

        let y = softmax(&Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoidal_examples() {
        assert_eq!(sinusoidal_embed(0.0, 4).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        let e = sinusoidal_embed(0.0, 128).unwrap();
        assert_eq!(e.len(), 128);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[1.0, 0.0]);
        }
        let e = sinusoidal_embed(std::f64::consts::PI, 2).unwrap();
        assert!((e[0] + 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
        assert!(sinusoidal_embed(0.5, 7).is_err());
        assert!(sinusoidal_embed(1.02, 128).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
