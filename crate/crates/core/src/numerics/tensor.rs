use std::fmt;

use super::TensorError;

/// Shape of a dense NCHW tensor.
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

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `height x width` feature map.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn with_spatial(self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense 4-D array of `f64` in batch, channel, row, column order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// One feature map of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn ensure_same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<(), TensorError> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Tensor {
        self.map(|v| v * scale)
    }

    /// Euclidean inner product over all elements.
    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two tensors along the channel axis (`a` first).
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
            return Err(TensorError::ShapeMismatch {
                expected: sa.with_channels(sb.channels),
                actual: sb,
            });
        }
        let shape = sa.with_channels(sa.channels + sb.channels);
        let mut data = Vec::with_capacity(shape.len());
        let (ca, cb) = (sa.channels * sa.plane(), sb.channels * sb.plane());
        for n in 0..sa.batch {
            data.extend_from_slice(&a.data[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&b.data[n * cb..(n + 1) * cb]);
        }
        Ok(Tensor { shape, data })
    }

    /// Splits off the first `channels` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, channels: usize) -> Result<(Tensor, Tensor), TensorError> {
        let s = self.shape;
        if channels > s.channels {
            return Err(TensorError::ChannelOutOfRange {
                requested: channels,
                available: s.channels,
            });
        }
        let first = s.with_channels(channels);
        let second = s.with_channels(s.channels - channels);
        let mut a = Vec::with_capacity(first.len());
        let mut b = Vec::with_capacity(second.len());
        let stride = s.channels * s.plane();
        let cut = channels * s.plane();
        for n in 0..s.batch {
            let item = &self.data[n * stride..(n + 1) * stride];
            a.extend_from_slice(&item[..cut]);
            b.extend_from_slice(&item[cut..]);
        }
        Ok((
            Tensor {
                shape: first,
                data: a,
            },
            Tensor {
                shape: second,
                data: b,
            },
        ))
    }

    /// Zero-extends the spatial dims at the bottom and right edges.
    pub fn pad_bottom_right(&self, height: usize, width: usize) -> Result<Tensor, TensorError> {
        let s = self.shape;
        if height < s.height || width < s.width {
            return Err(TensorError::ShapeMismatch {
                expected: s.with_spatial(height, width),
                actual: s,
            });
        }
        let mut out = Tensor::zeros(s.with_spatial(height, width));
        for n in 0..s.batch {
            for c in 0..s.channels {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.height {
                    dst[y * width..y * width + s.width]
                        .copy_from_slice(&src[y * s.width..(y + 1) * s.width]);
                }
            }
        }
        Ok(out)
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop_top_left(&self, height: usize, width: usize) -> Result<Tensor, TensorError> {
        let s = self.shape;
        if height > s.height || width > s.width {
            return Err(TensorError::ShapeMismatch {
                expected: s.with_spatial(height, width),
                actual: s,
            });
        }
        let mut out = Tensor::zeros(s.with_spatial(height, width));
        for n in 0..s.batch {
            for c in 0..s.channels {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..height {
                    dst[y * width..(y + 1) * width]
                        .copy_from_slice(&src[y * s.width..y * s.width + width]);
                }
            }
        }
        Ok(out)
    }
}
