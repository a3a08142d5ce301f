//! Dense row-major tensors over `f32` (training) or `f64` (the
//! double-precision mode used by gradient checks).

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element of a tensor. `f32` everywhere except gradient checking,
/// which instantiates the same code at `f64`.
pub trait Elem:
    Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// General matrix multiply `c = alpha * a @ b + beta * c` with explicit
    /// strides. One call has a fixed internal summation order, which is what
    /// keeps runs bitwise reproducible.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Shorthand: convert an `f64` literal into the element type.
pub fn ec<E: Elem>(v: f64) -> E {
    E::from_f64(v)
}

/// Dense N-dimensional array, row-major, with copy-on-write storage so graph
/// leaves can share parameter buffers without cloning.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Elem = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![E::zero(); n]) }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: E) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Self { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view; copies the buffer only if it is currently shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data)
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data viewed under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape,
                got: self.shape.clone(),
            });
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        let data: Vec<E> = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| v.to_f64()).collect()),
        }
    }

    pub fn to_f32_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| v.to_f64() as f32).collect()),
        }
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Expect a 4-D `[B, C, H, W]` shape, returning the four dims.
pub fn dims4(t: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.len() != 4 {
        return Err(Error::BadDimension {
            op,
            detail: format!("expected 4-d [B,C,H,W] tensor, got {t:?}"),
        });
    }
    Ok((t[0], t[1], t[2], t[3]))
}

/// Expect a 2-D `[R, C]` shape.
pub fn dims2(t: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if t.len() != 2 {
        return Err(Error::BadDimension {
            op,
            detail: format!("expected 2-d tensor, got {t:?}"),
        });
    }
    Ok((t[0], t[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn copy_on_write_leaves_clones_untouched() {
        let mut a = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(b.data(), &[1.0, 2.0]);
        assert_eq!(a.data(), &[9.0, 2.0]);
    }

    #[test]
    fn non_finite_scan() {
        let t = Tensor::<f32>::from_vec(vec![1.0, f32::NAN, 3.0]);
        assert_eq!(t.first_non_finite(), Some(1));
        assert_eq!(Tensor::<f32>::from_vec(vec![1.0]).first_non_finite(), None);
    }
}
