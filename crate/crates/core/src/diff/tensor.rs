use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::DiffError;

/// Floating types the engine runs on: `f32` for training, `f64` for
/// gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `C = alpha * A B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// views that do not alias `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) = A (m x k) B (k x n) + beta C`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], a_t: bool, b: &[F], b_t: bool, beta: F, c: &mut [F]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, DiffError> {
        Self::new(shape, data.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DiffError::Reshape {
                from: self.shape.clone(),
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }
}

impl<F: Scalar> Display for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0f64; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.clone().reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4]).is_err());
    }
}
