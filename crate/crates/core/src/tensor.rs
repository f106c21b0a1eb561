//! Dense row-major tensors and the plain (non-recording) numerical kernels.
//!
//! Convolutions use the cross-correlation convention throughout the crate:
//! `out[o, y, x] = sum_c sum_{i,j} k[o, c, i, j] * in[c, y + i - r, x + j - r]`
//! with `r = (K - 1) / 2` and zero padding, so spatial size is preserved.

use std::fmt;

use num_traits::Float;

use crate::error::{contract, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Real: Float + Default + fmt::Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return contract(format!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scalar_mul(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn tanh(&self) -> Self {
        self.map(T::tanh)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn softplus(&self) -> Self {
        self.map(softplus)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs())))
    }

    pub fn norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    /// Interprets a rank-3 or rank-4 tensor as `(N, C, H, W)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => contract(format!(
                "expected [C,H,W] or [N,C,H,W], got {:?}",
                self.shape
            )),
        }
    }

    /// Cross-correlation with zero padding; accepts `[C,H,W]` or `[N,C,H,W]`
    /// input and `[C_out,C_in,K,K]` kernels. The output keeps the input rank.
    pub fn conv2d(&self, kernels: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.nchw()?;
        let (o, k) = conv_kernel_dims(kernels, c)?;
        let mut out = vec![T::zero(); n * o * h * w];
        conv2d_forward(&self.data, &kernels.data, &mut out, n, c, o, h, w, k);
        let shape = if self.rank() == 3 {
            vec![o, h, w]
        } else {
            vec![n, o, h, w]
        };
        Tensor::new(shape, out)
    }

    /// Per-pixel channel mixing with `weights: [C_out, C_in]`.
    pub fn conv1x1(&self, weights: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.nchw()?;
        let o = match *weights.shape() {
            [o, ci] if ci == c => o,
            _ => {
                return contract(format!(
                    "1x1 weights {:?} incompatible with {c} input channels",
                    weights.shape()
                ))
            }
        };
        let mut out = vec![T::zero(); n * o * h * w];
        conv1x1_forward(&self.data, &weights.data, &mut out, n, c, o, h * w);
        let shape = if self.rank() == 3 {
            vec![o, h, w]
        } else {
            vec![n, o, h, w]
        };
        Tensor::new(shape, out)
    }
}

/// Rotates the spatial content of a `[C,H,W]` or `[N,C,H,W]` tensor by
/// `quarters * 90` degrees counterclockwise in the `(x, y) = (col, row)`
/// frame, the same sense in which atoms are rotated. Needs `H == W`.
pub fn rotate_quarter<T: Real>(t: &Tensor<T>, quarters: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.nchw()?;
    if h != w {
        return contract(format!("quarter rotation needs a square image, got {h}x{w}"));
    }
    let mut cur = t.data.clone();
    for _ in 0..quarters % 4 {
        let mut next = vec![T::zero(); cur.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for r in 0..h {
                for col in 0..w {
                    next[base + r * w + col] = cur[base + (w - 1 - col) * w + r];
                }
            }
        }
        cur = next;
    }
    Tensor::new(t.shape.clone(), cur)
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))` so large
/// inputs do not overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn conv_kernel_dims<T: Real>(kernels: &Tensor<T>, c_in: usize) -> Result<(usize, usize)> {
    match *kernels.shape() {
        [o, c, k, k2] if k == k2 && c == c_in => {
            if k % 2 == 0 {
                return contract(format!("kernel size must be odd, got {k}"));
            }
            Ok((o, k))
        }
        _ => contract(format!(
            "kernels {:?} incompatible with {c_in} input channels (expected [C_out,{c_in},K,K])",
            kernels.shape()
        )),
    }
}

/// Valid output range along one axis for kernel offset `d = i - r`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    kernels: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for b in 0..n {
        for oc in 0..o {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ic in 0..c {
                let src = &input[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                let kern = &kernels[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                for i in 0..k {
                    let dy = i as isize - r;
                    let (y0, y1) = valid_range(h, dy);
                    for j in 0..k {
                        let weight = wide(kern[i * k + j]);
                        if weight == 0.0 {
                            continue;
                        }
                        let dx = j as isize - r;
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut acc[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += weight * wide(*s);
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *d + narrow(*a);
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`] with respect to the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input<T: Real>(
    grad_out: &[T],
    kernels: &[T],
    grad_in: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for b in 0..n {
        for ic in 0..c {
            let dst = &mut grad_in[(b * c + ic) * plane..(b * c + ic + 1) * plane];
            for oc in 0..o {
                let g = &grad_out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                let kern = &kernels[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                for i in 0..k {
                    let dy = i as isize - r;
                    let (y0, y1) = valid_range(h, dy);
                    for j in 0..k {
                        let weight = kern[i * k + j];
                        if weight == T::zero() {
                            continue;
                        }
                        let dx = j as isize - r;
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let drow = &mut dst[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d = *d + weight * *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`] with respect to the kernels (accumulates).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernels<T: Real>(
    grad_out: &[T],
    input: &[T],
    grad_k: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for b in 0..n {
        for oc in 0..o {
            let g = &grad_out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let src = &input[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                let gk = &mut grad_k[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                for i in 0..k {
                    let dy = i as isize - r;
                    let (y0, y1) = valid_range(h, dy);
                    for j in 0..k {
                        let dx = j as isize - r;
                        let (x0, x1) = valid_range(w, dx);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (a, s) in grow.iter().zip(srow) {
                                acc = acc + *a * *s;
                            }
                        }
                        gk[i * k + j] = gk[i * k + j] + acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1x1_forward<T: Real>(
    input: &[T],
    weights: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    plane: usize,
) {
    let mut acc = vec![0.0f64; plane];
    for b in 0..n {
        for oc in 0..o {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ic in 0..c {
                let wv = wide(weights[oc * c + ic]);
                if wv == 0.0 {
                    continue;
                }
                let src = &input[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                for (d, s) in acc.iter_mut().zip(src) {
                    *d += wv * wide(*s);
                }
            }
            let dst = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *d + narrow(*a);
            }
        }
    }
}

/// Forward kernels accumulate in double precision whatever the storage type.
#[inline]
pub(crate) fn wide<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub(crate) fn narrow<T: Real>(v: f64) -> T {
    T::from(v).unwrap_or_else(T::nan)
}
