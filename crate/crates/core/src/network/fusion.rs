use std::fmt;
use std::str::FromStr;

use crate::numerics::{
    class_probability, softmax_cross_entropy, Differentiable, LabelMap, RngState, Tensor,
};

use super::layer::{Layer, LayerTape};
use super::spec::{LayerSpec, NetworkSpec, LAYER_COUNT, OUTPUT_LAYER};
use super::NetworkError;

/// How camera and LIDAR inputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Single branch on the dense ZYX image.
    Zyx,
    /// Single branch on the RGB image.
    Rgb,
    /// Single branch on the 6-channel RGB+ZYX stack.
    Early,
    /// Two 20-layer branches joined by a concatenation and a final convolution.
    Late,
    /// Two full branches exchanging features through trainable scalars.
    Cross,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Zyx,
        FusionMode::Rgb,
        FusionMode::Early,
        FusionMode::Late,
        FusionMode::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Zyx => "zyx",
            FusionMode::Rgb => "rgb",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::Cross => "cross",
        }
    }

    pub fn needs_rgb(self) -> bool {
        self != FusionMode::Zyx
    }

    pub fn needs_zyx(self) -> bool {
        self != FusionMode::Rgb
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NetworkError::UnknownMode(s.to_string()))
    }
}

/// A stack of layers applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<Layer>,
}

impl Branch {
    fn new(specs: &[LayerSpec], rng: &mut RngState) -> Self {
        Self {
            layers: specs.iter().map(|s| Layer::new(s.clone(), rng)).collect(),
        }
    }
}

/// Cross-connection scalars: `a[k]` scales the camera features added to the
/// LIDAR branch after layer `k + 1`, `b[k]` the reverse direction.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossScalars {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl CrossScalars {
    pub fn zeros() -> Self {
        Self {
            a: vec![0.0; LAYER_COUNT - 1],
            b: vec![0.0; LAYER_COUNT - 1],
        }
    }
}

/// Role of a parameter tensor, used for weight decay and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    CrossScalar,
}

/// Network inputs, each `N x 3 x H x W`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NetworkInput<'a> {
    pub rgb: Option<&'a Tensor>,
    pub zyx: Option<&'a Tensor>,
}

impl<'a> NetworkInput<'a> {
    pub fn new(rgb: Option<&'a Tensor>, zyx: Option<&'a Tensor>) -> Self {
        Self { rgb, zyx }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    height: usize,
    width: usize,
    padded: (usize, usize),
    main: Vec<LayerTape>,
    camera: Vec<LayerTape>,
    late: Option<LayerTape>,
    main_outputs: Vec<Tensor>,
    camera_outputs: Vec<Tensor>,
}

impl Tape {
    /// Whether each ELU input was negative, over every layer. The loss is
    /// smooth while this pattern stays fixed.
    pub fn activation_signs(&self) -> Vec<bool> {
        self.main
            .iter()
            .chain(&self.camera)
            .chain(&self.late)
            .filter_map(LayerTape::activation)
            .flat_map(|t| t.data().iter().map(|&v| v < 0.0))
            .collect()
    }
}

/// Gradients in the same order as [`FusionNetwork::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    mode: FusionMode,
    spec: NetworkSpec,
    /// ZYX branch, or the only branch in single-branch modes.
    main: Branch,
    camera: Option<Branch>,
    late: Option<Layer>,
    cross: Option<CrossScalars>,
}

impl FusionNetwork {
    /// Builds a randomly initialised network. `spec` describes one branch on
    /// a 3-channel input; cross scalars start at zero.
    pub fn build(
        mode: FusionMode,
        spec: &NetworkSpec,
        rng: &mut RngState,
    ) -> Result<Self, NetworkError> {
        spec.validate()?;
        if spec.input_channels() != 3 {
            return Err(NetworkError::InvalidSpec {
                layer: 1,
                reason: format!(
                    "branch specs take 3 input channels, found {}",
                    spec.input_channels()
                ),
            });
        }
        let full = &spec.layers[..];
        let trunk = &spec.layers[..LAYER_COUNT - 1];
        let (main, camera, late, cross) = match mode {
            FusionMode::Zyx | FusionMode::Rgb => (Branch::new(full, rng), None, None, None),
            FusionMode::Early => {
                let six = spec.with_input_channels(6);
                (Branch::new(&six.layers, rng), None, None, None)
            }
            FusionMode::Late => {
                let main = Branch::new(trunk, rng);
                let camera = Branch::new(trunk, rng);
                let late = Layer::new(late_spec(spec), rng);
                (main, Some(camera), Some(late), None)
            }
            FusionMode::Cross => (
                Branch::new(full, rng),
                Some(Branch::new(full, rng)),
                None,
                Some(CrossScalars::zeros()),
            ),
        };
        Ok(Self {
            mode,
            spec: spec.clone(),
            main,
            camera,
            late,
            cross,
        })
    }

    pub fn build_base(
        spec: &NetworkSpec,
        modality: FusionMode,
        rng: &mut RngState,
    ) -> Result<Self, NetworkError> {
        match modality {
            FusionMode::Zyx | FusionMode::Rgb => Self::build(modality, spec, rng),
            other => Err(NetworkError::UnknownMode(format!(
                "{other} is not a single-modality network"
            ))),
        }
    }

    pub fn build_early(spec: &NetworkSpec, rng: &mut RngState) -> Result<Self, NetworkError> {
        Self::build(FusionMode::Early, spec, rng)
    }

    pub fn build_late(spec: &NetworkSpec, rng: &mut RngState) -> Result<Self, NetworkError> {
        Self::build(FusionMode::Late, spec, rng)
    }

    pub fn build_cross(spec: &NetworkSpec, rng: &mut RngState) -> Result<Self, NetworkError> {
        Self::build(FusionMode::Cross, spec, rng)
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn main_branch(&self) -> &Branch {
        &self.main
    }

    pub fn camera_branch(&self) -> Option<&Branch> {
        self.camera.as_ref()
    }

    pub fn cross_scalars(&self) -> Option<&CrossScalars> {
        self.cross.as_ref()
    }

    pub fn cross_scalars_mut(&mut self) -> Option<&mut CrossScalars> {
        self.cross.as_mut()
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.main
            .layers
            .iter()
            .chain(self.camera.iter().flat_map(|b| b.layers.iter()))
            .chain(self.late.iter())
    }

    /// All trainable tensors: per layer weight then bias (main branch, camera
    /// branch, late-fusion layer), then the cross scalars `a` and `b`.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![];
        for l in self.layers() {
            out.push(&l.params.weight);
            out.push(&l.params.bias);
        }
        if let Some(c) = &self.cross {
            out.push(&c.a);
            out.push(&c.b);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![];
        let layers = self
            .main
            .layers
            .iter_mut()
            .chain(self.camera.iter_mut().flat_map(|b| b.layers.iter_mut()))
            .chain(self.late.iter_mut());
        for l in layers {
            out.push(&mut l.params.weight);
            out.push(&mut l.params.bias);
        }
        if let Some(c) = &mut self.cross {
            out.push(&mut c.a);
            out.push(&mut c.b);
        }
        out
    }

    pub fn parameter_roles(&self) -> Vec<ParamRole> {
        let mut out = vec![];
        for _ in self.layers() {
            out.push(ParamRole::Weight);
            out.push(ParamRole::Bias);
        }
        if self.cross.is_some() {
            out.extend([ParamRole::CrossScalar; 2]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn prepare(
        &self,
        input: NetworkInput<'_>,
    ) -> Result<(Tensor, Option<Tensor>, usize, usize), NetworkError> {
        let need = |t: Option<&Tensor>, name: &'static str| -> Result<Tensor, NetworkError> {
            let t = t.ok_or(NetworkError::MissingModality(name))?;
            if t.shape().channels != 3 {
                return Err(NetworkError::Input(format!(
                    "{name} input needs 3 channels, got {}",
                    t.shape().channels
                )));
            }
            Ok(t.clone())
        };
        let (main, camera) = match self.mode {
            FusionMode::Zyx => (need(input.zyx, "zyx")?, None),
            FusionMode::Rgb => (need(input.rgb, "rgb")?, None),
            FusionMode::Early => {
                let rgb = need(input.rgb, "rgb")?;
                let zyx = need(input.zyx, "zyx")?;
                check_same_grid(&rgb, &zyx)?;
                (Tensor::concat_channels(&rgb, &zyx)?, None)
            }
            FusionMode::Late | FusionMode::Cross => {
                let rgb = need(input.rgb, "rgb")?;
                let zyx = need(input.zyx, "zyx")?;
                check_same_grid(&rgb, &zyx)?;
                (zyx, Some(rgb))
            }
        };
        let s = main.shape();
        if s.batch == 0 || s.height == 0 || s.width == 0 {
            return Err(NetworkError::Input(format!("empty input of shape {s}")));
        }
        // the encoder halves the grid three times, so pad up to a multiple
        let m = self.spec.downsampling();
        let (ph, pw) = (s.height.div_ceil(m) * m, s.width.div_ceil(m) * m);
        let main = main.pad_bottom_right(ph, pw)?;
        let camera = camera.map(|c| c.pad_bottom_right(ph, pw)).transpose()?;
        Ok((main, camera, s.height, s.width))
    }

    /// Inference: logits `N x C x H x W` with dropout disabled.
    pub fn forward(&self, input: NetworkInput<'_>) -> Result<Tensor, NetworkError> {
        let mut rng = RngState::new(0);
        Ok(self.run(input, false, &mut rng, false)?.0)
    }

    /// Forward pass that records a tape for [`FusionNetwork::backward`].
    /// Dropout is active when `training` is set.
    pub fn forward_train(
        &self,
        input: NetworkInput<'_>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Tensor, Tape), NetworkError> {
        let (logits, tape) = self.run(input, training, rng, true)?;
        Ok((logits, tape.expect("recorded")))
    }

    /// Road probability maps (class 1), one row-major vector per batch item.
    pub fn road_confidence(&self, input: NetworkInput<'_>) -> Result<Vec<Vec<f64>>, NetworkError> {
        let logits = self.forward(input)?;
        Ok((0..logits.shape().batch)
            .map(|n| class_probability(&logits, n, LabelMap::ROAD as usize))
            .collect())
    }

    fn run(
        &self,
        input: NetworkInput<'_>,
        training: bool,
        rng: &mut RngState,
        record: bool,
    ) -> Result<(Tensor, Option<Tape>), NetworkError> {
        let (main_in, camera_in, height, width) = self.prepare(input)?;
        let padded = (main_in.shape().height, main_in.shape().width);
        let mut tape = Tape {
            height,
            width,
            padded,
            main: vec![],
            camera: vec![],
            late: None,
            main_outputs: vec![],
            camera_outputs: vec![],
        };
        let step = |layer: &Layer, x: Tensor, tapes: &mut Vec<LayerTape>, rng: &mut RngState| {
            if record {
                let (y, t) = layer.forward(x, training, rng)?;
                tapes.push(t);
                Ok::<_, NetworkError>(y)
            } else if training {
                Ok(layer.forward(x, training, rng)?.0)
            } else {
                layer.infer(&x)
            }
        };
        let logits = match self.mode {
            FusionMode::Zyx | FusionMode::Rgb | FusionMode::Early => {
                let mut x = main_in;
                for layer in &self.main.layers {
                    x = step(layer, x, &mut tape.main, rng)?;
                }
                x
            }
            FusionMode::Late => {
                let camera = self.camera.as_ref().expect("late mode has a camera branch");
                let mut lid = main_in;
                for layer in &self.main.layers {
                    lid = step(layer, lid, &mut tape.main, rng)?;
                }
                let mut cam = camera_in.expect("late mode has camera input");
                for layer in &camera.layers {
                    cam = step(layer, cam, &mut tape.camera, rng)?;
                }
                let joined = Tensor::concat_channels(&lid, &cam)?;
                let late = self.late.as_ref().expect("late mode has a fusion layer");
                let mut late_tape = vec![];
                let y = step(late, joined, &mut late_tape, rng)?;
                tape.late = late_tape.pop();
                y
            }
            FusionMode::Cross => {
                let camera = self
                    .camera
                    .as_ref()
                    .expect("cross mode has a camera branch");
                let scalars = self.cross.as_ref().expect("cross mode has scalars");
                let mut lid = main_in;
                let mut cam = camera_in.expect("cross mode has camera input");
                for k in 0..LAYER_COUNT {
                    if k > 0 {
                        let mut lid_in = lid.clone();
                        lid_in.add_scaled(&cam, scalars.a[k - 1])?;
                        let mut cam_in = cam.clone();
                        cam_in.add_scaled(&lid, scalars.b[k - 1])?;
                        if record {
                            tape.main_outputs.push(std::mem::replace(&mut lid, lid_in));
                            tape.camera_outputs
                                .push(std::mem::replace(&mut cam, cam_in));
                        } else {
                            lid = lid_in;
                            cam = cam_in;
                        }
                    }
                    lid = step(&self.main.layers[k], lid, &mut tape.main, rng)?;
                    cam = step(&camera.layers[k], cam, &mut tape.camera, rng)?;
                }
                lid.add_scaled(&cam, 1.0)?;
                lid
            }
        };
        let logits = logits.crop_top_left(height, width)?;
        Ok((logits, record.then_some(tape)))
    }

    /// Gradients of a scalar loss given its gradient with respect to the logits.
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<Gradients, NetworkError> {
        let s = grad_logits.shape();
        if s.height != tape.height || s.width != tape.width || s.channels != self.spec.num_classes {
            return Err(NetworkError::Input(format!(
                "logit gradient of shape {s} does not match the recorded {}x{} forward pass",
                tape.height, tape.width
            )));
        }
        let g = grad_logits.pad_bottom_right(tape.padded.0, tape.padded.1)?;
        let mut main_grads = vec![];
        let mut camera_grads = vec![];
        let mut late_grads = vec![];
        let mut cross = None;
        match self.mode {
            FusionMode::Zyx | FusionMode::Rgb | FusionMode::Early => {
                backprop_branch(&self.main, &tape.main, g, &mut main_grads)?;
            }
            FusionMode::Late => {
                let late = self.late.as_ref().expect("late layer");
                let lg = late.backward(&g, tape.late.as_ref().expect("late tape"))?;
                let (gl, gc) = lg.input.split_channels(late.spec.in_channels / 2)?;
                late_grads.push((lg.weight, lg.bias));
                backprop_branch(&self.main, &tape.main, gl, &mut main_grads)?;
                let camera = self.camera.as_ref().expect("camera branch");
                backprop_branch(camera, &tape.camera, gc, &mut camera_grads)?;
            }
            FusionMode::Cross => {
                let camera = self.camera.as_ref().expect("camera branch");
                let scalars = self.cross.as_ref().expect("cross scalars");
                let mut ga = vec![0.0; LAYER_COUNT - 1];
                let mut gb = vec![0.0; LAYER_COUNT - 1];
                let mut g_lid = g.clone();
                let mut g_cam = g;
                for k in (0..LAYER_COUNT).rev() {
                    let lg = self.main.layers[k].backward(&g_lid, &tape.main[k])?;
                    let cg = camera.layers[k].backward(&g_cam, &tape.camera[k])?;
                    main_grads.push((lg.weight, lg.bias));
                    camera_grads.push((cg.weight, cg.bias));
                    let (gi_lid, gi_cam) = (lg.input, cg.input);
                    if k > 0 {
                        ga[k - 1] = gi_lid.dot(&tape.camera_outputs[k - 1])?;
                        gb[k - 1] = gi_cam.dot(&tape.main_outputs[k - 1])?;
                        g_lid = gi_lid.clone();
                        g_lid.add_scaled(&gi_cam, scalars.b[k - 1])?;
                        g_cam = gi_cam;
                        g_cam.add_scaled(&gi_lid, scalars.a[k - 1])?;
                    }
                }
                main_grads.reverse();
                camera_grads.reverse();
                cross = Some((ga, gb));
            }
        }
        let mut tensors = vec![];
        for (w, b) in main_grads.into_iter().chain(camera_grads).chain(late_grads) {
            tensors.push(w);
            tensors.push(b);
        }
        if let Some((ga, gb)) = cross {
            tensors.push(ga);
            tensors.push(gb);
        }
        Ok(Gradients { tensors })
    }

    /// Mean cross-entropy loss and parameter gradients on one batch.
    pub fn loss_and_gradients(
        &self,
        input: NetworkInput<'_>,
        labels: &[LabelMap],
        training: bool,
        rng: &mut RngState,
    ) -> Result<(f64, Gradients), NetworkError> {
        let (logits, tape) = self.forward_train(input, training, rng)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&tape, &grad)?))
    }

    /// Replaces every parameter tensor, checking lengths.
    pub fn load_parameters(&mut self, tensors: &[Vec<f64>]) -> Result<(), NetworkError> {
        let mut slots = self.parameters_mut();
        if slots.len() != tensors.len() {
            return Err(NetworkError::Format(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, t)) in slots.iter_mut().zip(tensors).enumerate() {
            if slot.len() != t.len() {
                return Err(NetworkError::Format(format!(
                    "parameter tensor {i} holds {} values, expected {}",
                    t.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(t);
        }
        Ok(())
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (t, p) in self.parameters().iter().enumerate() {
            if index < p.len() {
                return (t, index);
            }
            index -= p.len();
        }
        panic!("parameter index out of range");
    }
}

fn late_spec(spec: &NetworkSpec) -> LayerSpec {
    let mut s = spec.layer(OUTPUT_LAYER).clone();
    s.in_channels = 2 * spec.layer(OUTPUT_LAYER - 1).out_channels;
    s
}

fn check_same_grid(a: &Tensor, b: &Tensor) -> Result<(), NetworkError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(NetworkError::Input(format!(
            "rgb input {sa} and zyx input {sb} are not on the same grid"
        )));
    }
    Ok(())
}

fn backprop_branch(
    branch: &Branch,
    tapes: &[LayerTape],
    mut g: Tensor,
    out: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> Result<(), NetworkError> {
    for (layer, tape) in branch.layers.iter().zip(tapes).rev() {
        let lg = layer.backward(&g, tape)?;
        out.push((lg.weight, lg.bias));
        g = lg.input;
    }
    out.reverse();
    Ok(())
}

/// A batch for gradient checking: owned inputs and labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub rgb: Option<Tensor>,
    pub zyx: Option<Tensor>,
    pub labels: Vec<LabelMap>,
}

impl LabeledBatch {
    pub fn input(&self) -> NetworkInput<'_> {
        NetworkInput::new(self.rgb.as_ref(), self.zyx.as_ref())
    }
}

/// Deterministic (dropout-free) loss, for finite-difference checks.
impl Differentiable for FusionNetwork {
    type Input = LabeledBatch;

    fn parameter_count(&self) -> usize {
        FusionNetwork::parameter_count(self)
    }

    fn parameter(&self, index: usize) -> f64 {
        let (t, i) = self.locate(index);
        self.parameters()[t][i]
    }

    fn set_parameter(&mut self, index: usize, value: f64) {
        let (t, i) = self.locate(index);
        self.parameters_mut()[t][i] = value;
    }

    fn loss(&self, batch: &LabeledBatch) -> f64 {
        let logits = self.forward(batch.input()).expect("forward");
        softmax_cross_entropy(&logits, &batch.labels)
            .expect("loss")
            .0
    }

    fn loss_and_gradient(&self, batch: &LabeledBatch) -> (f64, Vec<f64>) {
        let mut rng = RngState::new(0);
        let (loss, g) = self
            .loss_and_gradients(batch.input(), &batch.labels, false, &mut rng)
            .expect("backward");
        (loss, g.flatten())
    }

    fn loss_and_region(&self, batch: &LabeledBatch) -> (f64, Option<Vec<bool>>) {
        let mut rng = RngState::new(0);
        let (logits, tape) = self
            .forward_train(batch.input(), false, &mut rng)
            .expect("forward");
        let loss = softmax_cross_entropy(&logits, &batch.labels)
            .expect("loss")
            .0;
        (loss, Some(tape.activation_signs()))
    }
}
