//! Dense row-major tensors over `f32` (production) or `f64` (gradient checks).

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar types the numeric kernels are instantiated at.
///
/// The inference/training path uses `f32` throughout; `f64` exists so the
/// finite-difference harness can evaluate the same kernels at a precision
/// where the check tolerances are meaningful.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::iter::Sum + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major tensor with explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub type Tensor = TensorOf<f32>;

impl<F: Scalar> TensorOf<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
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

    /// Row count of a 2-D tensor (or 0 for empty).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Stack 2-D tensors along rows. All inputs must share a column count.
    pub fn vcat(parts: &[&TensorOf<F>]) -> Self {
        let cols = parts
            .iter()
            .find(|p| p.rows() > 0)
            .map_or(0, |p| p.cols());
        let total: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Self::zeros(&[total, cols]);
        let mut r = 0;
        for p in parts {
            for i in 0..p.rows() {
                out.row_mut(r).copy_from_slice(p.row(i));
                r += 1;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Widen/narrow the element type. `f32 -> f64` is exact.
    pub fn cast<G: Scalar>(&self) -> TensorOf<G> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute difference between two tensors of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[m x n] = a[m x k] . b[k x n]`.
///
/// Each output row is produced by exactly one task with a fixed inner
/// summation order, so the parallel and sequential paths are bit-identical.
pub fn matmul<F: Scalar>(a: &TensorOf<F>, b: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dim mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = TensorOf::zeros(&[m, n]);
    let body = |(row_out, a_row): (&mut [F], &[F])| {
        for (kk, &av) in a_row.iter().enumerate().take(k) {
            let b_row = &b.data()[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    crate::parallel::for_each_row_pair(out.data_mut(), a.data(), n, k, body);
    out
}

/// Strictly sequential matmul, kept callable for benches regardless of the
/// active parallel feature.
pub fn matmul_seq<F: Scalar>(a: &TensorOf<F>, b: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dim mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = TensorOf::zeros(&[m, n]);
    for i in 0..m {
        for kk in 0..k {
            let av = a.at(i, kk);
            let b_row = &b.data()[kk * n..(kk + 1) * n];
            let out_row = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a^T . b` without materializing the transpose: a is [m x k], b is [m x n],
/// result [k x n]. Used by linear backward (grad_w = x^T . g).
pub fn matmul_at_b<F: Scalar>(a: &TensorOf<F>, b: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(a.rows(), b.rows(), "matmul_at_b row mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = TensorOf::zeros(&[k, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (kk, &av) in a_row.iter().enumerate().take(k) {
            let out_row = &mut out.data_mut()[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a . b^T`: a is [m x k], b is [n x k], result [m x n]. Used by linear
/// backward (grad_x = g . w^T).
pub fn matmul_a_bt<F: Scalar>(a: &TensorOf<F>, b: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(a.cols(), b.cols(), "matmul_a_bt col mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = TensorOf::zeros(&[m, n]);
    let body = |(row_out, a_row): (&mut [F], &[F])| {
        for (j, o) in row_out.iter_mut().enumerate() {
            let b_row = &b.data()[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    crate::parallel::for_each_row_pair(out.data_mut(), a.data(), n, k, body);
    out
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn parallel_and_sequential_matmul_are_bit_identical() {
        let mut a = Tensor::zeros(&[17, 23]);
        let mut b = Tensor::zeros(&[23, 11]);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f32 / 997.0 - 0.5;
        }
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = ((i * 40503) % 1000) as f32 / 991.0 - 0.5;
        }
        let c1 = matmul(&a, &b);
        let c2 = matmul_seq(&a, &b);
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn transpose_products_agree_with_plain_matmul() {
        let a = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]);
        let b = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f32 * 0.25).collect());
        let at = Tensor::from_vec(&[2, 3], vec![1.0, 0.5, -1.0, -2.0, 3.0, 4.0]);
        assert_eq!(matmul_at_b(&a, &b).data(), matmul(&at, &b).data());

        let g = Tensor::from_vec(&[2, 4], (0..8).map(|i| i as f32 - 3.0).collect());
        let w = Tensor::from_vec(&[5, 4], (0..20).map(|i| (i as f32).sin()).collect());
        let wt = {
            let mut t = Tensor::zeros(&[4, 5]);
            for i in 0..5 {
                for j in 0..4 {
                    t.set(j, i, w.at(i, j));
                }
            }
            t
        };
        let lhs = matmul_a_bt(&g, &w);
        let rhs = matmul(&g, &wt);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn vcat_stacks_rows() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::vcat(&[&a, &b]);
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
