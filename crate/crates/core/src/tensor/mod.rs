//! Dense row-major tensors and the primitives every layer is built from.
//!
//! A [`Tensor`] owns a flat buffer in row-major order together with its
//! shape. There are no strided views: `permute`, `reshape` and `narrow`
//! always copy. Reductions run in a fixed order (ascending index, last axis
//! innermost) so reference-precision results are bit-reproducible.

mod contract;
pub mod counter;
pub mod io;

pub use contract::{contract, contract_reference, ContractionSpec};

use crate::error::{shape_err, LambdaError, Result};
use crate::scalar::{Dtype, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Elementwise operation selector for [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Scale(f64),
    L2NormAxis(usize),
}

/// Applies `op` to `args`. `Add`/`Mul` take two broadcast-compatible
/// operands, `Scale` and `L2NormAxis` take one.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let arity = match op {
        ElementwiseOp::Add | ElementwiseOp::Mul => 2,
        ElementwiseOp::Scale(_) | ElementwiseOp::L2NormAxis(_) => 1,
    };
    if args.len() != arity {
        return shape_err(format!("{op:?} expects {arity} operand(s), got {}", args.len()));
    }
    match op {
        ElementwiseOp::Add => args[0].add(args[1]),
        ElementwiseOp::Mul => args[0].mul(args[1]),
        ElementwiseOp::Scale(s) => Ok(args[0].scale(T::from_f64(s))),
        ElementwiseOp::L2NormAxis(axis) => args[0].l2_normalize(axis),
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return shape_err(format!("extent of axis {pos} is zero in shape {shape:?}"));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_extents(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {expected} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero extent; use [`Tensor::new`] for fallible construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_extents(shape).expect("tensor extents must be positive");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        check_extents(shape).expect("tensor extents must be positive");
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} with extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Returns a copy whose axis `i` is axis `axes[i]` of `self`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return shape_err(format!("permutation {axes:?} does not match rank {rank}"));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return shape_err(format!("invalid permutation {axes:?}"));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += gather[ax];
                if idx[ax] < new_shape[ax] {
                    break;
                }
                src -= gather[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self { shape: new_shape, data })
    }

    /// Copy of the slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return shape_err(format!(
                "cannot narrow axis {axis} of {:?} to {start}..{}",
                self.shape,
                start + len
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two tensors with identical shapes.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn broadcast_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let rank = self.rank().max(other.rank());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (sa, sb) = (pad(&self.shape), pad(&other.shape));
        let mut out_shape = Vec::with_capacity(rank);
        for (i, (&a, &b)) in sa.iter().zip(&sb).enumerate() {
            if a != b && a != 1 && b != 1 {
                return shape_err(format!(
                    "cannot broadcast {:?} with {:?} (axis {i})",
                    self.shape, other.shape
                ));
            }
            out_shape.push(a.max(b));
        }
        let bstride = |s: &[usize]| -> Vec<usize> {
            let st = row_major_strides(s);
            s.iter().zip(st).map(|(&e, st)| if e == 1 { 0 } else { st }).collect()
        };
        let (ga, gb) = (bstride(&sa), bstride(&sb));
        Ok(Self::from_fn(&out_shape, |idx| {
            let oa: usize = idx.iter().zip(&ga).map(|(i, s)| i * s).sum();
            let ob: usize = idx.iter().zip(&gb).map(|(i, s)| i * s).sum();
            f(self.data[oa], other.data[ob])
        }))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, |a, b| a + b)
    }

    /// Broadcasting subtraction.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, |a, b| a - b)
    }

    /// Broadcasting multiplication.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        Ok(())
    }

    /// Applies `f` to every 1-d slice along `axis`. The slice is gathered into
    /// a contiguous buffer first, so the arithmetic does not depend on stride.
    fn map_slices(&self, axis: usize, mut f: impl FnMut(&mut [T])) -> Result<Self> {
        self.check_axis(axis)?;
        let ext = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![T::zero(); ext];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + j * inner];
                }
                f(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[base + j * inner] = b;
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.map_slices(axis, softmax_in_place)
    }

    /// Divides every slice along `axis` by its Euclidean norm. All-zero
    /// slices are returned unchanged.
    pub fn l2_normalize(&self, axis: usize) -> Result<Self> {
        self.map_slices(axis, l2_normalize_in_place)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(LambdaError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn l2_normalize_in_place<T: Scalar>(xs: &mut [T]) {
    let sq = xs.iter().fold(T::zero(), |acc, &x| acc + x * x);
    if sq == T::zero() {
        return;
    }
    let norm = sq.sqrt();
    for x in xs.iter_mut() {
        *x = *x / norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length_and_zero_extent() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let t = Tensor::<f64>::full(&[4], 1.7);
        let s = t.softmax(0).unwrap();
        for &x in s.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tensor::<f64>::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_along_inner_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i[0] * 7 + i[1] * 3 + i[2]) as f64 * 0.37 - 2.0);
        let shifted = Tensor::from_fn(&[2, 3, 4], |i| t.get(i) + 5.0 * i[0] as f64 - 1.5 * i[2] as f64);
        let a = t.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| a.get(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(Tensor::<f64>::zeros(&[2, 2]).softmax(2).is_err());
    }

    #[test]
    fn l2norm_and_zero_guard() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let n = elementwise(ElementwiseOp::L2NormAxis(0), &[&t]).unwrap();
        assert!((n.get(&[0, 0]) - 0.6).abs() < 1e-15);
        assert!((n.get(&[1, 0]) - 0.8).abs() < 1e-15);
        assert_eq!(n.get(&[0, 1]), 0.0);
        assert_eq!(n.get(&[1, 1]), 0.0);
    }

    #[test]
    fn add_zeros_is_identity_and_broadcasts() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(elementwise(ElementwiseOp::Add, &[&t, &z]).unwrap(), t);
        let row = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.add(&row).unwrap();
        assert_eq!(s.get(&[1, 2]), 5.0 + 3.0);
        let bad = Tensor::<f64>::zeros(&[4]);
        assert!(t.add(&bad).is_err());
    }

    #[test]
    fn permute_and_narrow() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), 123.0);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), &[2, 2, 4]);
        assert_eq!(n.get(&[1, 0, 3]), 113.0);
        assert!(t.permute(&[0, 0, 1]).is_err());
    }
}
