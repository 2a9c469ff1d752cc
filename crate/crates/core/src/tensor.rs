//! Dense row-major arrays and the `(C, H, W)` feature-map view.

use crate::error::{DcicError, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DcicError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
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

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a (C, H, W) tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Channel plane `c` of a `(C, H, W)` tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.dims3();
        &self.data[c * h * w..(c + 1) * h * w]
    }
}

/// A `(C, H, W)` activation map: images (`C = 3`, values in `[0, 1]`) and
/// every intermediate or latent tensor of the transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64>(Tensor<T>);

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DcicError::Shape(format!(
                "feature map dims must be >= 1, got ({channels}, {height}, {width})"
            )));
        }
        Ok(FeatureMap(Tensor::new(&[channels, height, width], data)?))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap(Tensor::zeros(&[channels, height, width]))
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 || t.shape().iter().any(|&d| d == 0) {
            return Err(DcicError::Shape(format!("not a (C, H, W) map: {:?}", t.shape())));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3()
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.0.data_mut()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.dims();
        self.0.data()[(c * h + y) * w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.dims();
        self.0.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        self.0.channel(c)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.all_finite()
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap(self.0.cast())
    }

    /// Copy of the top-left `height x width` window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let (c, h, w) = self.dims();
        assert!(top + height <= h && left + width <= w, "crop out of bounds");
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in top..top + height {
                let row = (ch * h + y) * w;
                out.extend_from_slice(&self.0.data()[row + left..row + left + width]);
            }
        }
        FeatureMap(Tensor::new(&[c, height, width], out).expect("crop size"))
    }
}
