//! Dense array types.
//!
//! [`Tensor`] is the batched `(n, c, h, w)` array used by the network code.
//! [`ImageTensor`] is a single `H×W×C` array; samples are stored channel
//! planar (`c`, then row, then column) so per-channel transforms operate on
//! contiguous planes.

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("every dimension must be at least 1, got {0:?}")]
    EmptyDimension(Vec<usize>),
    #[error("data length {got} does not match shape product {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

pub type Shape = [usize; 4];

/// Batched `(n, c, h, w)` array, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of one `(h, w)` plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// The single value of a `[1, 1, 1, 1]` tensor (or the first element).
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `other` elementwise into `self`. Shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Stacks single-image tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::EmptyDimension(vec![0]))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for item in items {
            if item.shape[1..] != first.shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    left: first.shape.to_vec(),
                    right: item.shape.to_vec(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let n = data.len() / (c * h * w);
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Extracts sample `n` as a `[1, c, h, w]` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape[1] * self.plane_len();
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

/// Single `H×W×C` array of finite samples.
///
/// Image-valued instances additionally satisfy `0 ≤ v ≤ 1`; wavelet bands and
/// diffusion latents reuse the type with unbounded values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    /// Builds from channel-planar data, validating dimensions and finiteness.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::EmptyDimension(vec![height, width, channels]));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image dimensions");
        assert!(value.is_finite(), "non-finite fill value");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    /// Builds from `f(y, x, c)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn produced an invalid image")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: T) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<(), TensorError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                left: vec![self.height, self.width, self.channels],
                right: vec![other.height, other.width, other.channels],
            })
        }
    }

    pub fn is_image_valued(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape images.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.check_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp01(&self) -> Self {
        // NaN maps to 0 through `max`.
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    /// Copies into a `[1, c, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor {
            shape: [1, self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    /// Extracts batch entry `n` of a tensor as an image.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self, TensorError> {
        let [_, c, h, w] = t.shape();
        let per = c * h * w;
        Self::new(h, w, c, t.data()[n * per..(n + 1) * per].to_vec())
    }

    /// Converts between scalar types.
    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copies the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop window out of bounds");
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }
}
