//! Dense NHWC tensors and shape descriptors.

use crate::error::{BitflowError, Result};

/// Activation shape in NHWC order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nhwc {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Nhwc {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            batch,
            height,
            width,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(BitflowError::DimensionOverflow);
        }
        self.element_count().map(|_| ())
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn element_count(&self) -> Result<usize> {
        [self.height, self.width, self.channels]
            .iter()
            .try_fold(self.batch, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or(BitflowError::DimensionOverflow)
    }

    pub(crate) fn element_count_unchecked(&self) -> usize {
        self.pixels() * self.channels
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.height + y) * self.width + x) * self.channels + c
    }
}

/// Kernel shape in `[out_channels, filter_h, filter_w, in_channels]` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelDims {
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub in_channels: usize,
}

impl KernelDims {
    pub const fn new(
        out_channels: usize,
        filter_h: usize,
        filter_w: usize,
        in_channels: usize,
    ) -> Self {
        Self {
            out_channels,
            filter_h,
            filter_w,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.filter_h == 0
            || self.filter_w == 0
            || self.in_channels == 0
        {
            return Err(BitflowError::DimensionOverflow);
        }
        self.element_count().map(|_| ())
    }

    /// Filter sites per kernel (`filter_h * filter_w`).
    pub fn sites(&self) -> usize {
        self.filter_h * self.filter_w
    }

    /// Number of `±1` terms in one output element.
    pub fn fan_in(&self) -> usize {
        self.sites() * self.in_channels
    }

    pub fn element_count(&self) -> Result<usize> {
        [self.filter_h, self.filter_w, self.in_channels]
            .iter()
            .try_fold(self.out_channels, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or(BitflowError::DimensionOverflow)
    }

    #[inline]
    pub fn index(&self, o: usize, fy: usize, fx: usize, c: usize) -> usize {
        ((o * self.filter_h + fy) * self.filter_w + fx) * self.in_channels + c
    }
}

/// Dense NHWC tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor<T> {
    dims: Nhwc,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn from_vec(dims: Nhwc, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.element_count()? {
            return Err(BitflowError::ShapeMismatch(format!(
                "{} values for dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Nhwc, value: T) -> Result<Self>
    where
        T: Clone,
    {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![value; dims.element_count()?],
        })
    }

    pub fn dims(&self) -> Nhwc {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> &T {
        &self.data[self.dims.index(n, y, x, c)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Saturate to the symmetric 8-bit interval `[-127, 127]`.
#[inline]
pub fn clamp_i8(v: i64) -> i8 {
    v.clamp(-127, 127) as i8
}

/// Inter-layer feature map of 8-bit integers in `[-127, 127]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct I8FeatureMap(Tensor<i8>);

impl I8FeatureMap {
    /// Wraps `t`, rejecting any `-128`.
    pub fn new(t: Tensor<i8>) -> Result<Self> {
        if t.data().contains(&i8::MIN) {
            return Err(BitflowError::InvalidParameter(
                "-128 is outside the symmetric 8-bit interval".into(),
            ));
        }
        Ok(Self(t))
    }

    /// Saturating conversion from wider integers.
    pub fn saturating_from(t: &Tensor<i32>) -> Self {
        Self(t.map(|&v| clamp_i8(v as i64)))
    }

    pub(crate) fn from_trusted(t: Tensor<i8>) -> Self {
        debug_assert!(!t.data().contains(&i8::MIN));
        Self(t)
    }

    pub fn dims(&self) -> Nhwc {
        self.0.dims()
    }

    pub fn data(&self) -> &[i8] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor<i8> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<i8> {
        self.0
    }
}

/// Exact 32-bit convolution output.
pub type I32FeatureMap = Tensor<i32>;
