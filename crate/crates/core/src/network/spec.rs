use crate::numerics::{ConvGeometry, ConvKind};

use super::NetworkError;

/// Number of layers in one branch.
pub const LAYER_COUNT: usize = 21;
/// Layers 1..=5 downsample, 6..=14 form the context module, 15..=20 decode, 21 classifies.
pub const ENCODER: std::ops::RangeInclusive<usize> = 1..=5;
pub const CONTEXT: std::ops::RangeInclusive<usize> = 6..=14;
pub const DECODER: std::ops::RangeInclusive<usize> = 15..=20;
pub const OUTPUT_LAYER: usize = 21;

/// Dilations of the nine context layers (the last one is a 1x1 layer).
pub const CONTEXT_DILATION_H: [usize; 9] = [1, 1, 1, 2, 4, 8, 16, 1, 1];
pub const CONTEXT_DILATION_W: [usize; 9] = [1, 1, 2, 4, 8, 16, 32, 1, 1];
pub const CONTEXT_KERNEL: [usize; 9] = [3, 3, 3, 3, 3, 3, 3, 3, 1];
pub const CONTEXT_DROPOUT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    StridedConv,
    TransposedConv,
}

impl LayerKind {
    pub fn conv_kind(self) -> ConvKind {
        match self {
            LayerKind::TransposedConv => ConvKind::Transposed,
            _ => ConvKind::Forward,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::StridedConv => 1,
            LayerKind::TransposedConv => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Conv),
            1 => Some(LayerKind::StridedConv),
            2 => Some(LayerKind::TransposedConv),
            _ => None,
        }
    }
}

/// Declarative description of one convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// 1-based position in the branch.
    pub index: usize,
    pub kind: LayerKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_p: f64,
    pub has_elu: bool,
}

impl LayerSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            dilation_h: self.dilation_h,
            dilation_w: self.dilation_w,
            pad_h: self.pad_h,
            pad_w: self.pad_w,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels * self.out_channels + self.out_channels
    }

    fn strided(index: usize, cin: usize, cout: usize) -> Self {
        Self {
            index,
            kind: LayerKind::StridedConv,
            kernel_h: 4,
            kernel_w: 4,
            stride: 2,
            dilation_h: 1,
            dilation_w: 1,
            pad_h: 1,
            pad_w: 1,
            in_channels: cin,
            out_channels: cout,
            dropout_p: 0.0,
            has_elu: true,
        }
    }

    fn same(index: usize, k: usize, dh: usize, dw: usize, cin: usize, cout: usize) -> Self {
        Self {
            index,
            kind: LayerKind::Conv,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            dilation_h: dh,
            dilation_w: dw,
            pad_h: dh * (k - 1) / 2,
            pad_w: dw * (k - 1) / 2,
            in_channels: cin,
            out_channels: cout,
            dropout_p: 0.0,
            has_elu: true,
        }
    }

    fn upsample(index: usize, cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            ..Self::strided(index, cin, cout)
        }
    }
}

/// Feature-map widths of the encoder, context module and decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub encoder: [usize; 5],
    pub context: usize,
    pub decoder: [usize; 6],
}

impl ChannelPlan {
    /// Widths as multiples of the first-layer width `d`: encoder
    /// `(d, d, 2d, 2d, 4d)`, context `4d`, decoder `(2d, 2d, d, d, d, d)`.
    /// At `d = 32` the context module has the canonical 128 maps.
    pub fn scaled(d: usize) -> Self {
        Self {
            encoder: [d, d, 2 * d, 2 * d, 4 * d],
            context: 4 * d,
            decoder: [2 * d, 2 * d, d, d, d, d],
        }
    }
}

/// The 21-layer encoder / context / decoder network of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub first_layer_feature_maps: usize,
    pub num_classes: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::with_width(32, 2)
    }
}

impl NetworkSpec {
    /// Default plan at first-layer width `d` with `num_classes` outputs and
    /// three input channels.
    pub fn with_width(d: usize, num_classes: usize) -> Self {
        Self::from_plan(3, &ChannelPlan::scaled(d), num_classes)
    }

    /// Encoder: three 4x4/stride-2 layers interleaved with two 3x3 layers.
    /// Decoder: three 4x4/stride-2 transposed layers each followed by a 3x3
    /// layer. Output: 3x3 layer to `num_classes` logits without activation.
    pub fn from_plan(input_channels: usize, plan: &ChannelPlan, num_classes: usize) -> Self {
        let e = plan.encoder;
        let mut layers = vec![
            LayerSpec::strided(1, input_channels, e[0]),
            LayerSpec::same(2, 3, 1, 1, e[0], e[1]),
            LayerSpec::strided(3, e[1], e[2]),
            LayerSpec::same(4, 3, 1, 1, e[2], e[3]),
            LayerSpec::strided(5, e[3], e[4]),
        ];
        let mut cin = e[4];
        for i in 0..9 {
            let mut l = LayerSpec::same(
                6 + i,
                CONTEXT_KERNEL[i],
                CONTEXT_DILATION_H[i],
                CONTEXT_DILATION_W[i],
                cin,
                plan.context,
            );
            l.dropout_p = CONTEXT_DROPOUT;
            layers.push(l);
            cin = plan.context;
        }
        let d = plan.decoder;
        for (i, &cout) in d.iter().enumerate() {
            let index = 15 + i;
            layers.push(if i % 2 == 0 {
                LayerSpec::upsample(index, cin, cout)
            } else {
                LayerSpec::same(index, 3, 1, 1, cin, cout)
            });
            cin = cout;
        }
        let mut out = LayerSpec::same(OUTPUT_LAYER, 3, 1, 1, cin, num_classes);
        out.has_elu = false;
        layers.push(out);
        Self {
            layers,
            first_layer_feature_maps: e[0],
            num_classes,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    /// Same network with a different number of input channels on layer 1.
    pub fn with_input_channels(&self, channels: usize) -> Self {
        let mut s = self.clone();
        if let Some(first) = s.layers.first_mut() {
            first.in_channels = channels;
        }
        s
    }

    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Overall encoder downsampling factor; inputs are padded to a multiple of it.
    pub fn downsampling(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::StridedConv)
            .map(|l| l.stride)
            .product()
    }

    /// Checks every structural invariant, naming the first offending layer.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |layer: usize, reason: String| Err(NetworkError::InvalidSpec { layer, reason });
        if self.layers.len() != LAYER_COUNT {
            return bad(
                0,
                format!("expected {LAYER_COUNT} layers, found {}", self.layers.len()),
            );
        }
        if self.num_classes < 2 {
            return bad(OUTPUT_LAYER, "at least two classes are required".into());
        }
        let context_width = self.layer(6).out_channels;
        let mut prev_out = None;
        for (i, l) in self.layers.iter().enumerate() {
            let idx = i + 1;
            if l.index != idx {
                return bad(idx, format!("carries index {}", l.index));
            }
            if l.kernel_h == 0
                || l.kernel_w == 0
                || l.stride == 0
                || l.dilation_h == 0
                || l.dilation_w == 0
                || l.in_channels == 0
                || l.out_channels == 0
            {
                return bad(idx, "sizes must be positive".into());
            }
            if let Some(p) = prev_out {
                if l.in_channels != p {
                    return bad(
                        idx,
                        format!(
                            "takes {} channels but layer {} emits {p}",
                            l.in_channels,
                            idx - 1
                        ),
                    );
                }
            }
            prev_out = Some(l.out_channels);
            if !(0.0..1.0).contains(&l.dropout_p) {
                return bad(idx, format!("dropout {} outside [0, 1)", l.dropout_p));
            }
            if l.kind == LayerKind::TransposedConv && !DECODER.contains(&idx) {
                return bad(idx, "transposed convolutions belong to the decoder".into());
            }
            if l.kind == LayerKind::StridedConv && !ENCODER.contains(&idx) {
                return bad(idx, "strided convolutions belong to the encoder".into());
            }
            if l.kind == LayerKind::Conv {
                let preserves = l.stride == 1
                    && l.kernel_h % 2 == 1
                    && l.kernel_w % 2 == 1
                    && 2 * l.pad_h == l.dilation_h * (l.kernel_h - 1)
                    && 2 * l.pad_w == l.dilation_w * (l.kernel_w - 1);
                if !preserves {
                    return bad(idx, "plain convolutions must preserve spatial size".into());
                }
            }
            if !CONTEXT.contains(&idx) && l.dropout_p != 0.0 {
                return bad(idx, "dropout is only used inside the context module".into());
            }
            if CONTEXT.contains(&idx) {
                let c = idx - 6;
                if l.kind != LayerKind::Conv
                    || l.kernel_h != CONTEXT_KERNEL[c]
                    || l.kernel_w != CONTEXT_KERNEL[c]
                {
                    return bad(
                        idx,
                        format!(
                            "context layer must be a {0}x{0} convolution",
                            CONTEXT_KERNEL[c]
                        ),
                    );
                }
                let (dh, dw) = if CONTEXT_KERNEL[c] == 1 {
                    (1, 1)
                } else {
                    (CONTEXT_DILATION_H[c], CONTEXT_DILATION_W[c])
                };
                if l.dilation_h != dh || l.dilation_w != dw {
                    return bad(
                        idx,
                        format!(
                            "context dilation must be {dh}x{dw}, found {}x{}",
                            l.dilation_h, l.dilation_w
                        ),
                    );
                }
                if l.out_channels != context_width {
                    return bad(idx, "context layers must share one width".into());
                }
                if l.dropout_p <= 0.0 {
                    return bad(idx, "context layers need spatial dropout".into());
                }
            }
            if !l.has_elu && idx != OUTPUT_LAYER {
                return bad(idx, "every hidden layer is followed by an ELU".into());
            }
        }
        let out = self.layer(OUTPUT_LAYER);
        if out.kind != LayerKind::Conv || out.out_channels != self.num_classes {
            return bad(
                OUTPUT_LAYER,
                format!(
                    "output layer must be a convolution to {} classes",
                    self.num_classes
                ),
            );
        }
        let upsamplers: Vec<_> = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::TransposedConv)
            .collect();
        if upsamplers.len() != 3 {
            return bad(
                15,
                format!(
                    "decoder needs 3 transposed layers, found {}",
                    upsamplers.len()
                ),
            );
        }
        for l in &upsamplers {
            // transposed conv multiplies size by s iff k - 2p == s
            if l.kernel_h != l.stride + 2 * l.pad_h
                || l.kernel_w != l.stride + 2 * l.pad_w
                || l.dilation_h != 1
                || l.dilation_w != 1
            {
                return bad(
                    l.index,
                    "upsampling must scale size exactly by its stride".into(),
                );
            }
        }
        for l in self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::StridedConv)
        {
            if l.kernel_h != l.stride + 2 * l.pad_h
                || l.kernel_w != l.stride + 2 * l.pad_w
                || l.dilation_h != 1
                || l.dilation_w != 1
            {
                return bad(
                    l.index,
                    "downsampling must divide size exactly by its stride".into(),
                );
            }
        }
        let up: usize = upsamplers.iter().map(|l| l.stride).product();
        if up != self.downsampling() {
            return bad(
                15,
                format!(
                    "decoder upsamples by {up} but encoder downsamples by {}",
                    self.downsampling()
                ),
            );
        }
        if self.first_layer_feature_maps != self.layer(1).out_channels {
            return bad(1, "first_layer_feature_maps disagrees with layer 1".into());
        }
        Ok(())
    }
}

/// Receptive field `(height, width)` of layers `from..=to`, measured in the
/// input grid of layer `from`.
///
/// Forward layers grow it by `(k - 1) * dilation * jump` and multiply the
/// jump by their stride. A transposed layer reaches `ceil(k / stride)` of its
/// inputs per output and divides the jump by its stride.
pub fn receptive_field(spec: &NetworkSpec, from: usize, to: usize) -> (usize, usize) {
    *receptive_field_sequence(spec, from, to)
        .last()
        .expect("non-empty range")
}

/// Cumulative receptive fields after each layer of `from..=to`.
pub fn receptive_field_sequence(spec: &NetworkSpec, from: usize, to: usize) -> Vec<(usize, usize)> {
    assert!(
        1 <= from && from <= to && to <= spec.layers.len(),
        "layer range {from}..={to} out of bounds"
    );
    let axis = |k: usize, d: usize, s: usize, kind: LayerKind, rf: &mut f64, jump: &mut f64| {
        if kind == LayerKind::TransposedConv {
            *jump /= s as f64;
            let taps = k.div_ceil(s);
            *rf += (taps as f64 - 1.0) * d as f64 * *jump * s as f64;
        } else {
            *rf += (k as f64 - 1.0) * d as f64 * *jump;
            *jump *= s as f64;
        }
    };
    let (mut rh, mut rw, mut jh, mut jw) = (1.0, 1.0, 1.0, 1.0);
    spec.layers[from - 1..to]
        .iter()
        .map(|l| {
            axis(l.kernel_h, l.dilation_h, l.stride, l.kind, &mut rh, &mut jh);
            axis(l.kernel_w, l.dilation_w, l.stride, l.kind, &mut rw, &mut jw);
            (rh.round() as usize, rw.round() as usize)
        })
        .collect()
}
