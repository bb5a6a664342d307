//! Dense row-major tensors over `f32` or `f64`, plus the handful of numeric
//! kernels (stabilized softmax, separable Gaussian blur) the attention and
//! masking code is built on.

use std::fmt::Debug;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Element type for all numeric code. Training runs in `f32`; oracle and
/// gradient-check tests run the same code in `f64`.
pub trait Scalar: Float + NumCast + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        NumCast::from(v).expect("finite f64 converts to scalar")
    }
    fn f64(self) -> f64 {
        NumCast::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows/cols when viewed as a matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-d tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-d tensor, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> E {
        self.sum() / E::of(self.numel() as f64)
    }

    pub fn sq_norm(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v * v)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    /// Matrix product, `self` is r x k, `other` is k x c.
    pub fn matmul(&self, other: &Self) -> Self {
        let (r, k) = (self.rows(), self.cols());
        let (k2, c) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims: {} vs {}", k, k2);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * c..(i + 1) * c];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * c..(kk + 1) * c];
                for j in 0..c {
                    o_row[j] = o_row[j] + a * b_row[j];
                }
            }
        }
        Tensor { shape: vec![r, c], data: out }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }

    pub fn concat_rows(&self, other: &Self) -> Self {
        assert_eq!(self.cols(), other.cols());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor { shape: vec![self.rows() + other.rows(), self.cols()], data }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v.f64()).collect())
    }

    pub fn to_precision<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| F::of(v.f64())).collect())
    }
}

/// Row-wise softmax with row-max subtraction for overflow safety.
///
/// Each output row is nonnegative and sums to one.
pub fn softmax_rows<E: Scalar>(m: &Tensor<E>) -> Result<Tensor<E>> {
    if m.shape().len() != 2 || m.numel() == 0 {
        return Err(Error::InvalidShape(format!(
            "softmax_rows wants a non-empty 2-d tensor, got {:?}",
            m.shape()
        )));
    }
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        let row = m.row(i);
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut sum = E::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            o[j] = e;
            sum = sum + e;
        }
        for v in o.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(Tensor::new(vec![r, c], out))
}

/// Scaled dot-product attention on plain tensors: softmax(q k^T / sqrt(d)) v.
pub fn attention<E: Scalar>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Tensor<E> {
    let d = q.cols();
    let scale = E::one() / E::of(d as f64).sqrt();
    let logits = q.matmul(&k.transpose()).scale(scale);
    let probs = softmax_rows(&logits).expect("attention logits are non-empty");
    probs.matmul(v)
}

/// Truncated, normalized Gaussian kernel of half-width ceil(2*sigma).
fn gaussian_kernel<E: Scalar>(sigma: f64) -> Vec<E> {
    let half = (2.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w.into_iter().map(E::of).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur on an h x w grid with reflect padding.
///
/// `sigma == 0` returns the input unchanged; the kernel is truncated at
/// half-width ceil(2*sigma) and renormalized to sum one.
pub fn gaussian_blur_grid<E: Scalar>(mask: &Tensor<E>, sigma: f64) -> Result<Tensor<E>> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative blur sigma {sigma}")));
    }
    if mask.shape().len() != 2 {
        return Err(Error::InvalidShape(format!(
            "gaussian_blur_grid wants an h x w grid, got {:?}",
            mask.shape()
        )));
    }
    if sigma == 0.0 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.rows() as i64, mask.cols() as i64);
    let kernel = gaussian_kernel::<E>(sigma);
    let half = (kernel.len() / 2) as i64;

    // Horizontal pass then vertical pass.
    let mut tmp = vec![E::zero(); (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = E::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as i64 - half, w);
                acc = acc + kv * mask.data()[(y * w) as usize + sx];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![E::zero(); (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = E::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as i64 - half, h);
                acc = acc + kv * tmp[sy * w as usize + x as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    Ok(Tensor::new(vec![h as usize, w as usize], out))
}
