//! Dense 4-D NCHW tensors and the differentiable primitives the network is
//! built from.
//!
//! Everything here is deliberately plain: contiguous `Vec` storage, explicit
//! loops, and a fixed accumulation order (input-channel major, then kernel
//! row, then kernel column) so that results are bit-reproducible and can be
//! compared exactly against independent oracles.

mod conv;
mod gradcheck;
mod loss;
mod norm;
mod pointwise;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_grad, conv_transpose2d, conv_transpose2d_grad, ConvParams, ConvTransposeParams};
pub use gradcheck::finite_diff_check;
pub use loss::{softmax_xent_map, XentResult};
pub use norm::{batch_norm, batch_norm_grad, batch_norm_infer, batch_norm_train, BnParams, BnStash};
pub use pointwise::{add, add_grad, relu, relu_grad};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_grad, pool2d, pool2d_grad, PoolKind, PoolStash};
pub use resize::{bilinear_resize, bilinear_resize_grad};

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Training runs in `f32`; oracles and
/// gradient checks run in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element a tensor can hold. Implemented for `f32` and `f64`
/// only; the dtype tag travels with the type so both can coexist in one
/// process (f32 models for speed, f64 for gradient checks).
pub trait Element:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Element-typed count (counts at the scales used here are exact in both
/// f32 and f64).
pub(crate) fn from_count<E: Element>(n: usize) -> E {
    E::from_f64(n as f64)
}

/// NCHW dimensions of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Mode switch for layers whose behavior differs between training and
/// inference (batch normalization, auxiliary heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dense 4-D array in NCHW layout with an optional gradient buffer of the
/// same shape.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element> {
    shape: Shape,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(format!("all dims must be >= 1, got {shape}")));
        }
        if data.len() != shape.count() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.count()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![E::zero(); shape.count()]).expect("nonzero dims")
    }

    pub fn filled(shape: Shape, v: E) -> Self {
        Tensor::new(shape, vec![v; shape.count()]).expect("nonzero dims")
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[E] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.idx(n, c, y, x)]
    }
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// One image plane `(c, y, ..)` as a row slice.
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[E] {
        let start = self.idx(n, c, y, 0);
        &self.data[start..start + self.shape.w]
    }

    /// Whole `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let start = self.idx(n, c, 0, 0);
        &self.data[start..start + self.shape.h * self.shape.w]
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [E] {
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.shape.count()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn alloc_grad(&mut self) {
        self.grad_mut();
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(E::zero());
        }
    }

    /// Simultaneous mutable access to the values and (if allocated) the
    /// gradient buffer.
    pub fn data_and_grad_mut(&mut self) -> (&mut [E], Option<&mut [E]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn add_grad(&mut self, delta: &[E]) {
        let g = self.grad_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    /// Convert element type. Exact f32 -> f64; f64 -> f32 rounds.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| F::from_f64(Element::as_f64(*v))).collect(),
            grad: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}

/// Concatenate tensors along the channel dimension. All inputs must agree on
/// `(n, h, w)`.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let Shape { n, h, w, .. } = first.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n != n || s.h != h || s.w != w {
            return Err(Error::shape(format!(
                "concat_channels: mismatched dims {} vs {}",
                s,
                first.shape()
            )));
        }
        c_total += s.c;
    }
    let mut out = Tensor::zeros(Shape::new(n, c_total, h, w));
    for ni in 0..n {
        let mut co = 0;
        for p in parts {
            for ci in 0..p.shape().c {
                let src = p.plane(ni, ci);
                let start = out.idx(ni, co + ci, 0, 0);
                out.data[start..start + h * w].copy_from_slice(src);
            }
            co += p.shape().c;
        }
    }
    Ok(out)
}

/// Split a gradient tensor back along the channel dimension; inverse of
/// [`concat_channels`] for shapes `channels` (which must sum to `dy.c`).
pub fn split_channels_grad<E: Element>(dy: &Tensor<E>, channels: &[usize]) -> Result<Vec<Tensor<E>>> {
    let Shape { n, c, h, w } = dy.shape();
    let sum: usize = channels.iter().sum();
    if sum != c {
        return Err(Error::shape(format!(
            "split_channels_grad: segment channels sum {sum} != tensor channels {c}"
        )));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut co = 0;
    for &ck in channels {
        let mut t = Tensor::zeros(Shape::new(n, ck, h, w));
        for ni in 0..n {
            for ci in 0..ck {
                let src = dy.plane(ni, co + ci);
                let start = t.idx(ni, ci, 0, 0);
                t.data[start..start + h * w].copy_from_slice(src);
            }
        }
        out.push(t);
        co += ck;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_indexing() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.row(0, 1, 2), &[120.0, 121.0, 122.0, 123.0, 124.0]);
        assert_eq!(t.data().len(), 120);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::<f32>::new(Shape::new(0, 1, 1, 1), vec![]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 1, 2), vec![0.0]).is_err());
    }

    #[test]
    fn grad_roundtrip() {
        let mut t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(t.grad().is_none());
        t.add_grad(&[1.0, 2.0, 3.0, 4.0]);
        t.add_grad(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0, 5.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn concat_split_channels() {
        let a = Tensor::<f64>::filled(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 2.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 3, 2, 2));
        assert_eq!(cat.at(0, 2, 1, 1), 2.0);
        let parts = split_channels_grad(&cat, &[2, 1]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }
}
