//! Strided, dilated, zero-padded 2-D cross-correlation and its transpose.
//!
//! Three gather/scatter kernels do all the work:
//!
//! * `correlate` — the forward convolution (gather from input into output),
//! * `correlate_adjoint` — its exact adjoint (scatter output back to input),
//! * `correlate_weight_grad` — the weight gradient.
//!
//! A transposed convolution is the adjoint kernel run forward, so both layer
//! kinds share the same code paths for forward and backward.
//!
//! Every output element is produced by a single thread with a fixed
//! accumulation order, so results are bit-identical for any thread count.

use rayon::prelude::*;

use super::{RngState, Shape, Tensor, TensorError};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, dilation: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation_h: dilation,
            dilation_w: dilation,
            pad_h: pad,
            pad_w: pad,
        }
    }

    /// Stride 1 with padding that keeps the spatial size (odd kernels only).
    pub fn same(kernel_h: usize, kernel_w: usize, dilation_h: usize, dilation_w: usize) -> Self {
        Self {
            kernel_h,
            kernel_w,
            stride: 1,
            dilation_h,
            dilation_w,
            pad_h: dilation_h * (kernel_h - 1) / 2,
            pad_w: dilation_w * (kernel_w - 1) / 2,
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.dilation_h == 0
            || self.dilation_w == 0
        {
            return Err(TensorError::InvalidGeometry(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial output size of the forward convolution.
    pub fn conv_output(&self, height: usize, width: usize) -> Result<(usize, usize), TensorError> {
        self.validate()?;
        let axis = |len: usize, k: usize, d: usize, p: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        match (
            axis(height, self.kernel_h, self.dilation_h, self.pad_h),
            axis(width, self.kernel_w, self.dilation_w, self.pad_w),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(TensorError::InvalidGeometry(format!(
                "{height}x{width} input produces an empty output under {self:?}"
            ))),
        }
    }

    /// Spatial output size of the transposed convolution.
    pub fn transposed_output(
        &self,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize), TensorError> {
        self.validate()?;
        let axis = |len: usize, k: usize, d: usize, p: usize| -> Option<usize> {
            if len == 0 {
                return None;
            }
            let full = (len - 1) * self.stride + d * (k - 1) + 1;
            (full > 2 * p).then(|| full - 2 * p)
        };
        match (
            axis(height, self.kernel_h, self.dilation_h, self.pad_h),
            axis(width, self.kernel_w, self.dilation_w, self.pad_w),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(TensorError::InvalidGeometry(format!(
                "{height}x{width} input produces an empty transposed output under {self:?}"
            ))),
        }
    }
}

/// Which way a [`ConvParams`] block is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Cross-correlation; weights laid out `[out][in][kh][kw]`.
    Forward,
    /// Adjoint of a cross-correlation; weights laid out `[in][out][kh][kw]`,
    /// i.e. exactly the weights of the forward convolution it transposes.
    Transposed,
}

/// Weights, biases and geometry of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(geometry: ConvGeometry, in_channels: usize, out_channels: usize) -> Self {
        Self {
            geometry,
            in_channels,
            out_channels,
            weight: vec![0.0; in_channels * out_channels * geometry.kernel_h * geometry.kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-style uniform init (variance `2 / fan_in`) with zero biases.
    pub fn he_uniform(
        geometry: ConvGeometry,
        in_channels: usize,
        out_channels: usize,
        rng: &mut RngState,
    ) -> Self {
        let mut p = Self::zeros(geometry, in_channels, out_channels);
        let fan_in = (in_channels * geometry.kernel_h * geometry.kernel_w) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut p.weight {
            *w = rng.uniform_range(-bound, bound);
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn kernel_len(&self) -> usize {
        self.geometry.kernel_h * self.geometry.kernel_w
    }

    fn check(&self) -> Result<(), TensorError> {
        self.geometry.validate()?;
        if self.weight.len() != self.in_channels * self.out_channels * self.kernel_len()
            || self.bias.len() != self.out_channels
        {
            return Err(TensorError::InvalidGeometry(format!(
                "parameter buffers ({} weights, {} biases) do not match {}->{} channels",
                self.weight.len(),
                self.bias.len(),
                self.in_channels,
                self.out_channels
            )));
        }
        Ok(())
    }

    fn signature(&self, kind: ConvKind) -> ConvSignature {
        ConvSignature {
            kind,
            geometry: self.geometry,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSignature {
    kind: ConvKind,
    geometry: ConvGeometry,
    in_channels: usize,
    out_channels: usize,
}

/// Forward-pass record needed by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvState {
    input: Tensor,
    output_shape: Shape,
    signature: ConvSignature,
}

impl ConvState {
    pub fn kind(&self) -> ConvKind {
        self.signature.kind
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Layout of the weight buffer seen by the kernels: `[outer][inner][kh][kw]`,
/// where `outer` is the gather side (forward conv output channels).
#[derive(Clone, Copy)]
struct Kernel<'a> {
    weight: &'a [f64],
    outer: usize,
    inner: usize,
    geometry: ConvGeometry,
}

impl Kernel<'_> {
    #[inline]
    fn tap(&self, outer: usize, inner: usize, ky: usize, kx: usize) -> f64 {
        let g = &self.geometry;
        self.weight[((outer * self.inner + inner) * g.kernel_h + ky) * g.kernel_w + kx]
    }
}

/// Output indices `o` in `0..out_len` for which `o * stride + offset` lands in
/// `0..in_len`.
#[inline]
fn valid_range(in_len: usize, out_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let start = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let room = in_len as isize - offset;
    let end = if room <= 0 { 0 } else { (room + s - 1) / s };
    let end = (end as usize).min(out_len);
    let start = (start as usize).min(end);
    (start, end)
}

fn run_planes(out: &mut [f64], plane: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if plane == 0 {
        return;
    }
    if work < PARALLEL_THRESHOLD {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    }
}

/// `out[n, o] = sum_i k[o, i] (*) x[n, i]`; `out` must be pre-filled (bias or zero).
fn correlate(x: &Tensor, k: Kernel<'_>, out: &mut Tensor) {
    let xs = x.shape();
    let os = out.shape();
    let g = k.geometry;
    let s = g.stride;
    let work = os.len() * k.inner * g.kernel_h * g.kernel_w;
    run_planes(out.data_mut(), os.plane(), work, |idx, dst| {
        let (n, o) = (idx / os.channels, idx % os.channels);
        for i in 0..k.inner {
            let src = x.plane(n, i);
            for ky in 0..g.kernel_h {
                let off_y = (ky * g.dilation_h) as isize - g.pad_h as isize;
                let (y0, y1) = valid_range(xs.height, os.height, s, off_y);
                for kx in 0..g.kernel_w {
                    let off_x = (kx * g.dilation_w) as isize - g.pad_w as isize;
                    let (x0, x1) = valid_range(xs.width, os.width, s, off_x);
                    if x0 >= x1 {
                        continue;
                    }
                    let w = k.tap(o, i, ky, kx);
                    for oy in y0..y1 {
                        let iy = (oy * s) as isize + off_y;
                        let row = &src[iy as usize * xs.width..(iy as usize + 1) * xs.width];
                        let dst_row = &mut dst[oy * os.width..(oy + 1) * os.width];
                        if s == 1 {
                            let ix0 = (x0 as isize + off_x) as usize;
                            for (d, v) in dst_row[x0..x1].iter_mut().zip(&row[ix0..]) {
                                *d += w * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ((ox * s) as isize + off_x) as usize;
                                dst_row[ox] += w * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint of [`correlate`]: `out[n, i] = sum_o k[o, i]^T (*) g[n, o]`.
fn correlate_adjoint(g_out: &Tensor, k: Kernel<'_>, out: &mut Tensor) {
    let gs = g_out.shape();
    let os = out.shape();
    let geo = k.geometry;
    let s = geo.stride;
    let work = gs.len() * k.inner * geo.kernel_h * geo.kernel_w;
    run_planes(out.data_mut(), os.plane(), work, |idx, dst| {
        let (n, i) = (idx / os.channels, idx % os.channels);
        for o in 0..k.outer {
            let src = g_out.plane(n, o);
            for ky in 0..geo.kernel_h {
                let off_y = (ky * geo.dilation_h) as isize - geo.pad_h as isize;
                let (y0, y1) = valid_range(os.height, gs.height, s, off_y);
                for kx in 0..geo.kernel_w {
                    let off_x = (kx * geo.dilation_w) as isize - geo.pad_w as isize;
                    let (x0, x1) = valid_range(os.width, gs.width, s, off_x);
                    if x0 >= x1 {
                        continue;
                    }
                    let w = k.tap(o, i, ky, kx);
                    for gy in y0..y1 {
                        let iy = ((gy * s) as isize + off_y) as usize;
                        let src_row = &src[gy * gs.width..(gy + 1) * gs.width];
                        let dst_row = &mut dst[iy * os.width..(iy + 1) * os.width];
                        if s == 1 {
                            let ix0 = (x0 as isize + off_x) as usize;
                            for (d, v) in dst_row[ix0..].iter_mut().zip(&src_row[x0..x1]) {
                                *d += w * v;
                            }
                        } else {
                            for gx in x0..x1 {
                                let ix = ((gx * s) as isize + off_x) as usize;
                                dst_row[ix] += w * src_row[gx];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// `dk[o, i, ky, kx] = sum_n <g[n, o], shifted x[n, i]>`, layout `[outer][inner][kh][kw]`.
fn correlate_weight_grad(x: &Tensor, g_out: &Tensor, geo: ConvGeometry) -> Vec<f64> {
    let xs = x.shape();
    let gs = g_out.shape();
    let s = geo.stride;
    let taps = geo.kernel_h * geo.kernel_w;
    let block = xs.channels * taps;
    let mut grad = vec![0.0; gs.channels * block];
    let work = gs.len() * block;
    run_planes(&mut grad, block, work, |o, dst| {
        for i in 0..xs.channels {
            for ky in 0..geo.kernel_h {
                let off_y = (ky * geo.dilation_h) as isize - geo.pad_h as isize;
                let (y0, y1) = valid_range(xs.height, gs.height, s, off_y);
                for kx in 0..geo.kernel_w {
                    let off_x = (kx * geo.dilation_w) as isize - geo.pad_w as isize;
                    let (x0, x1) = valid_range(xs.width, gs.width, s, off_x);
                    if x0 >= x1 || y0 >= y1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for n in 0..xs.batch {
                        let src = x.plane(n, i);
                        let gp = g_out.plane(n, o);
                        for gy in y0..y1 {
                            let iy = ((gy * s) as isize + off_y) as usize;
                            let row = &src[iy * xs.width..(iy + 1) * xs.width];
                            let grow = &gp[gy * gs.width..(gy + 1) * gs.width];
                            if s == 1 {
                                let ix0 = (x0 as isize + off_x) as usize;
                                acc += grow[x0..x1]
                                    .iter()
                                    .zip(&row[ix0..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for gx in x0..x1 {
                                    let ix = ((gx * s) as isize + off_x) as usize;
                                    acc += grow[gx] * row[ix];
                                }
                            }
                        }
                    }
                    dst[(i * geo.kernel_h + ky) * geo.kernel_w + kx] = acc;
                }
            }
        }
    });
    grad
}

fn bias_grad(g_out: &Tensor) -> Vec<f64> {
    let s = g_out.shape();
    (0..s.channels)
        .map(|c| {
            (0..s.batch)
                .map(|n| g_out.plane(n, c).iter().sum::<f64>())
                .sum()
        })
        .collect()
}

fn filled_with_bias(shape: Shape, bias: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.batch {
        for (c, &b) in bias.iter().enumerate() {
            out.plane_mut(n, c).fill(b);
        }
    }
    out
}

fn check_input(input: &Tensor, params: &ConvParams) -> Result<(), TensorError> {
    params.check()?;
    let s = input.shape();
    if s.channels != params.in_channels {
        return Err(TensorError::ChannelMismatch {
            expected: params.in_channels,
            actual: s.channels,
        });
    }
    Ok(())
}

/// Cross-correlation with stride, per-axis dilation and zero padding, plus bias.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
    check_input(input, params)?;
    let s = input.shape();
    let (h, w) = params.geometry.conv_output(s.height, s.width)?;
    let mut out = filled_with_bias(Shape::new(s.batch, params.out_channels, h, w), &params.bias);
    let kernel = Kernel {
        weight: &params.weight,
        outer: params.out_channels,
        inner: params.in_channels,
        geometry: params.geometry,
    };
    correlate(input, kernel, &mut out);
    Ok(out)
}

/// Transposed convolution: the adjoint of [`conv2d`] under the same weights, plus bias.
///
/// Stride 2, kernel 4, pad 1 exactly doubles the spatial size.
pub fn transposed_conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
    check_input(input, params)?;
    let s = input.shape();
    let (h, w) = params.geometry.transposed_output(s.height, s.width)?;
    let mut out = filled_with_bias(Shape::new(s.batch, params.out_channels, h, w), &params.bias);
    let kernel = Kernel {
        weight: &params.weight,
        outer: params.in_channels,
        inner: params.out_channels,
        geometry: params.geometry,
    };
    correlate_adjoint(input, kernel, &mut out);
    Ok(out)
}

/// Runs the forward op and keeps the input for the backward pass.
pub fn conv_forward(
    input: Tensor,
    params: &ConvParams,
    kind: ConvKind,
) -> Result<(Tensor, ConvState), TensorError> {
    let out = match kind {
        ConvKind::Forward => conv2d(&input, params)?,
        ConvKind::Transposed => transposed_conv2d(&input, params)?,
    };
    let state = ConvState {
        input,
        output_shape: out.shape(),
        signature: params.signature(kind),
    };
    Ok((out, state))
}

/// Exact gradients of [`conv2d`] or [`transposed_conv2d`] (selected by the state).
pub fn conv2d_backward(
    grad_out: &Tensor,
    state: &ConvState,
    params: &ConvParams,
) -> Result<ConvGrads, TensorError> {
    let kind = state.signature.kind;
    if params.signature(kind) != state.signature {
        return Err(TensorError::StaleState(format!(
            "state recorded for {:?}, parameters are {:?}",
            state.signature,
            params.signature(kind)
        )));
    }
    if grad_out.shape() != state.output_shape {
        return Err(TensorError::ShapeMismatch {
            expected: state.output_shape,
            actual: grad_out.shape(),
        });
    }
    let mut grad_input = Tensor::zeros(state.input.shape());
    let (weight, bias) = match kind {
        ConvKind::Forward => {
            let kernel = Kernel {
                weight: &params.weight,
                outer: params.out_channels,
                inner: params.in_channels,
                geometry: params.geometry,
            };
            correlate_adjoint(grad_out, kernel, &mut grad_input);
            (
                correlate_weight_grad(&state.input, grad_out, params.geometry),
                bias_grad(grad_out),
            )
        }
        ConvKind::Transposed => {
            let kernel = Kernel {
                weight: &params.weight,
                outer: params.in_channels,
                inner: params.out_channels,
                geometry: params.geometry,
            };
            correlate(grad_out, kernel, &mut grad_input);
            (
                correlate_weight_grad(grad_out, &state.input, params.geometry),
                bias_grad(grad_out),
            )
        }
    };
    Ok(ConvGrads {
        input: grad_input,
        weight,
        bias,
    })
}
