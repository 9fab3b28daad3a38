//! Dense rank-4 feature maps and the primitive kernels built on them.
//!
//! Layout is NCHW, row-major with `w` varying fastest. Every operation
//! returns freshly allocated output; inputs are never mutated.

mod conv;
pub mod gradcheck;
mod ops;
pub mod snapshot;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, Scalar};

pub use conv::{conv2d, conv2d_backward, conv2d_direct, conv_output_size, ConvGrads};
pub use ops::*;

/// Dimensions of a [`FeatureMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("all dimensions must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Real-valued `(batch, channels, height, width)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_dims(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)
    }

    /// Panics if any dimension is zero.
    pub fn full(shape: Shape, value: T) -> Self {
        shape.validate().expect("valid shape");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        shape.validate().expect("valid shape");
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        shape.validate().expect("valid shape");
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.batch
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The `(h, w)` plane of one `(n, c)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dot product of the flattened values.
    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure_same_shape(self, other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_same_shape(self, other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Largest absolute cellwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        ensure_same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Batch element `n` as a batch-1 map.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.channels * self.shape.plane();
        Self {
            shape: Shape {
                batch: 1,
                ..self.shape
            },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

pub(crate) fn ensure_same_shape<T: Scalar>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    what: &str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Convolution filter bank, `(out_channels, in_channels, kernel_h, kernel_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Filter<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::shape("filter channel counts must be >= 1"));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::config(format!(
                "kernel extents must be odd, got {kernel_h}x{kernel_w}"
            )));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "filter expects {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::shape(format!(
                    "filter expects {out_channels} biases, got {}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    /// All-zero weights with a zero bias.
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self::new(
            out_channels,
            in_channels,
            kernel,
            kernel,
            vec![T::zero(); out_channels * in_channels * kernel * kernel],
            Some(vec![T::zero(); out_channels]),
        )
        .expect("valid zero filter")
    }

    /// `std`-scaled Gaussian weights, zero bias.
    pub fn random_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut f = Self::zeros(out_channels, in_channels, kernel);
        for w in &mut f.weights {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::of(z * std);
        }
        f
    }

    /// He-normal initialisation for a ReLU-followed convolution.
    pub fn he_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::random_normal(out_channels, in_channels, kernel, (2.0 / fan_in).sqrt(), rng)
    }

    /// `k x k` filter whose only non-zero weight is `1` at the center tap of
    /// the matching input channel.
    pub fn center_identity(channels: usize, kernel: usize) -> Self {
        let mut f = Self::zeros(channels, channels, kernel);
        let mid = kernel / 2;
        for c in 0..channels {
            let i = f.index(c, c, mid, mid);
            f.weights[i] = T::one();
        }
        f
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + y) * self.kernel_w + x
    }

    pub fn weight(&self, o: usize, i: usize, y: usize, x: usize) -> T {
        self.weights[self.index(o, i, y, x)]
    }

    pub fn bias_at(&self, o: usize) -> T {
        self.bias.as_ref().map_or(T::zero(), |b| b[o])
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Weight count plus bias count.
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Same geometry, all values zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: self.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            ..*self
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn cast<U: Scalar>(&self) -> Filter<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64_lossy())).collect();
        Filter {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            weights: conv(&self.weights),
            bias: self.bias.as_ref().map(conv),
        }
    }

    /// Dilation-1 kernel equivalent to this kernel at `dilation`: taps are
    /// spread apart by inserting `dilation - 1` zeros between them.
    pub fn inflate(&self, dilation: usize) -> Self {
        let d = dilation.max(1);
        let kh = (self.kernel_h - 1) * d + 1;
        let kw = (self.kernel_w - 1) * d + 1;
        let mut weights = vec![T::zero(); self.out_channels * self.in_channels * kh * kw];
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for y in 0..self.kernel_h {
                    for x in 0..self.kernel_w {
                        let dst = ((o * self.in_channels + i) * kh + y * d) * kw + x * d;
                        weights[dst] = self.weight(o, i, y, x);
                    }
                }
            }
        }
        Self {
            kernel_h: kh,
            kernel_w: kw,
            weights,
            ..self.clone()
        }
    }
}

/// Dilation, stride and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            dilation: 1,
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvSpec {
    pub fn new(dilation: usize, stride: usize, padding: usize) -> Result<Self> {
        let spec = Self {
            dilation,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stride-1 spec that preserves spatial size: `padding = r * (k - 1) / 2`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            dilation,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::config(format!(
                "dilation and stride must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}
