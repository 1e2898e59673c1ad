//! Adam training with a poly learning-rate schedule, random rotations and
//! checkpointing whenever validation MaxF improves.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{sweep, EvalError, EvalReport, ThresholdGrid};
use crate::network::{checkpoint, FusionNetwork, Gradients, NetworkError, NetworkInput};
use crate::numerics::{softmax_cross_entropy, LabelMap, RngState, Shape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("iteration {iteration} outside the schedule of {total} iterations")]
    Schedule { iteration: usize, total: usize },
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub eval_every: usize,
    pub eta0: f64,
    pub alpha: f64,
    pub batch_size: usize,
    /// Rotations are drawn from `[-range, range]` degrees; 0 disables them.
    pub rotation_range_deg: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 100_000,
            eval_every: 1_000,
            eta0: 0.0005,
            alpha: 0.9,
            batch_size: 1,
            rotation_range_deg: 20.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Small overfitting run: 2000 iterations, no augmentation.
    pub fn toy() -> Self {
        Self {
            total_iterations: 2_000,
            eval_every: 250,
            eta0: 0.002,
            rotation_range_deg: 0.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// Zero iterations is accepted and yields an empty run.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(0.0..=180.0).contains(&self.rotation_range_deg) {
            return bad("rotation_range_deg must lie in [0, 180]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// `eta0 * (1 - i / N)^alpha` for `0 <= i <= N`.
pub fn poly_lr(iteration: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let n = cfg.total_iterations;
    if iteration > n || n == 0 {
        return Err(TrainError::Schedule {
            iteration,
            total: n,
        });
    }
    Ok(cfg.eta0 * (1.0 - iteration as f64 / n as f64).powf(cfg.alpha))
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&[f64]]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn for_network(net: &FusionNetwork) -> Self {
        Self::new(&net.parameters())
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient is
/// not finite.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let shapes_agree = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_agree {
        return Err(TrainError::Config(
            "parameter, gradient and optimizer shapes disagree".into(),
        ));
    }
    if let Some((t, i)) = grads
        .iter()
        .enumerate()
        .find_map(|(t, g)| g.iter().position(|v| !v.is_finite()).map(|i| (t, i)))
    {
        return Err(TrainError::Divergence {
            iteration: state.step,
            detail: format!("gradient {} of tensor {t} at index {i}", grads[t][i]),
        });
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y0 = y.floor().clamp(0.0, (h - 1) as f64) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Source coordinates of every output pixel for a rotation by `deg` about
/// the image centre, `None` outside the source frame.
fn rotation_sources(w: usize, h: usize, deg: f64) -> Vec<Option<(f64, f64)>> {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let eps = 1e-9;
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse rotation maps the output grid back onto the source
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let inside = sx >= -eps
                && sy >= -eps
                && sx <= w as f64 - 1.0 + eps
                && sy <= h as f64 - 1.0 + eps;
            inside.then_some((sx.clamp(0.0, w as f64 - 1.0), sy.clamp(0.0, h as f64 - 1.0)))
        })
        .collect()
}

fn rotate_tensor(t: &Tensor, sources: &[Option<(f64, f64)>]) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (d, from) in dst.iter_mut().zip(sources) {
                if let Some((x, y)) = *from {
                    *d = bilinear(src, s.width, s.height, x, y);
                }
            }
        }
    }
    out
}

fn rotate_labels(l: &LabelMap, sources: &[Option<(f64, f64)>]) -> LabelMap {
    let (w, h) = (l.width(), l.height());
    let mut out = LabelMap::new(h, w, LabelMap::IGNORE);
    for (d, from) in out.data_mut().iter_mut().zip(sources) {
        if let Some((x, y)) = *from {
            let (xi, yi) = (x.round() as usize, y.round() as usize);
            *d = l.get(yi.min(h - 1), xi.min(w - 1));
        }
    }
    out
}

/// An aligned RGB image, ZYX image and label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotated {
    pub rgb: Option<Tensor>,
    pub zyx: Option<Tensor>,
    pub labels: LabelMap,
    pub angle_deg: f64,
}

/// Rotates everything by `angle_deg` about the image centre. Inputs are
/// interpolated bilinearly and labels by nearest neighbour; regions revealed
/// from outside the frame become 0 in the inputs and ignore in the labels.
pub fn rotate(
    rgb: Option<&Tensor>,
    zyx: Option<&Tensor>,
    labels: &LabelMap,
    angle_deg: f64,
) -> Result<Rotated, TrainError> {
    let (w, h) = (labels.width(), labels.height());
    for t in [rgb, zyx].into_iter().flatten() {
        if t.shape().width != w || t.shape().height != h {
            return Err(TrainError::Dataset(format!(
                "input {} does not match {h}x{w} labels",
                t.shape()
            )));
        }
    }
    if angle_deg == 0.0 || w == 0 || h == 0 {
        return Ok(Rotated {
            rgb: rgb.cloned(),
            zyx: zyx.cloned(),
            labels: labels.clone(),
            angle_deg,
        });
    }
    let sources = rotation_sources(w, h, angle_deg);
    Ok(Rotated {
        rgb: rgb.map(|t| rotate_tensor(t, &sources)),
        zyx: zyx.map(|t| rotate_tensor(t, &sources)),
        labels: rotate_labels(labels, &sources),
        angle_deg,
    })
}

/// Rotation by an angle drawn uniformly from `[-range_deg, range_deg]`.
pub fn augment_rotation(
    rgb: Option<&Tensor>,
    zyx: Option<&Tensor>,
    labels: &LabelMap,
    rng: &mut RngState,
    range_deg: f64,
) -> Result<Rotated, TrainError> {
    let angle = if range_deg > 0.0 {
        rng.uniform_range(-range_deg, range_deg)
    } else {
        0.0
    };
    rotate(rgb, zyx, labels, angle)
}

/// One training or validation frame; tensors are `1 x 3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Option<Tensor>,
    pub zyx: Option<Tensor>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn input(&self) -> NetworkInput<'_> {
        NetworkInput::new(self.rgb.as_ref(), self.zyx.as_ref())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Road confidences of every sample, dropout disabled.
pub fn predict(net: &FusionNetwork, samples: &[Sample]) -> Result<Vec<Vec<f64>>, NetworkError> {
    samples
        .iter()
        .map(|s| Ok(net.road_confidence(s.input())?.remove(0)))
        .collect()
}

/// Metrics of `net` over `samples` with the default threshold grid.
pub fn evaluate(net: &FusionNetwork, samples: &[Sample]) -> Result<EvalReport, TrainError> {
    let confs = predict(net, samples)?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    let curve = sweep(&confs, &gts, ThresholdGrid::default())?;
    Ok(EvalReport::from_curve(&curve)?)
}

/// Mean per-frame cross-entropy, dropout disabled.
pub fn mean_loss(net: &FusionNetwork, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let logits = net.forward(s.input())?;
        let (l, _) = softmax_cross_entropy(&logits, std::slice::from_ref(&s.labels))
            .map_err(NetworkError::from)?;
        total += l;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_maxf: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iteration={}\tloss={:.9e}\tlr={:.9e}\tval_maxf=",
            self.iteration, self.loss, self.lr
        )?;
        match self.val_maxf {
            Some(v) => write!(f, "{v:.9}"),
            None => f.write_str("-"),
        }
    }
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub best_maxf: Option<f64>,
    pub best_iteration: Option<usize>,
    /// Weights at the best validation score.
    pub best: Option<FusionNetwork>,
    pub checkpoints_written: usize,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor, TrainError> {
    let s = parts[0].shape();
    if parts.iter().any(|p| p.shape() != s) {
        return Err(TrainError::Dataset(
            "frames in one batch must share a shape".into(),
        ));
    }
    let data = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::from_vec(
        Shape::new(parts.len() * s.batch, s.channels, s.height, s.width),
        data,
    )
    .map_err(|e| TrainError::Dataset(e.to_string()))
}

/// Trains `net` in place for `cfg.total_iterations` steps. Validation MaxF is
/// measured every `cfg.eval_every` iterations and after the last one; each
/// strict improvement is written to `checkpoint_path` when given.
pub fn train(
    net: &mut FusionNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        log: vec![],
        best_maxf: None,
        best_iteration: None,
        best: None,
        checkpoints_written: 0,
    };
    if cfg.total_iterations == 0 {
        return Ok(outcome);
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::Dataset(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mode = net.mode();
    for s in data.train.iter().chain(&data.val) {
        if (mode.needs_rgb() && s.rgb.is_none()) || (mode.needs_zyx() && s.zyx.is_none()) {
            return Err(TrainError::Dataset(format!(
                "frame {} lacks an input needed by {mode} fusion",
                s.id
            )));
        }
    }
    let mut rng = RngState::new(cfg.seed);
    let mut aug_rng = rng.fork(1);
    let mut drop_rng = rng.fork(2);
    let mut adam = AdamState::for_network(net);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();

    for i in 0..cfg.total_iterations {
        let lr = poly_lr(i, cfg)?;
        let mut frames = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let s = &data.train[order[cursor]];
            cursor += 1;
            ids.push(s.id.as_str());
            frames.push(augment_rotation(
                s.rgb.as_ref(),
                s.zyx.as_ref(),
                &s.labels,
                &mut aug_rng,
                cfg.rotation_range_deg,
            )?);
        }
        let rgb = if mode.needs_rgb() {
            Some(stack(
                &frames
                    .iter()
                    .map(|f| f.rgb.as_ref().unwrap())
                    .collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        let zyx = if mode.needs_zyx() {
            Some(stack(
                &frames
                    .iter()
                    .map(|f| f.zyx.as_ref().unwrap())
                    .collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        let labels: Vec<LabelMap> = frames.into_iter().map(|f| f.labels).collect();
        if labels.iter().all(|l| l.evaluated() == 0) {
            // a rotation can in principle hide every labelled pixel
            log::debug!("iteration {i}: no labelled pixels, skipping update");
            outcome.log.push(LogRecord {
                iteration: i,
                loss: 0.0,
                lr,
                val_maxf: None,
            });
            continue;
        }
        let input = NetworkInput::new(rgb.as_ref(), zyx.as_ref());
        let (loss, grads): (f64, Gradients) =
            net.loss_and_gradients(input, &labels, true, &mut drop_rng)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(TrainError::Divergence {
                iteration: i as u64,
                detail: format!(
                    "loss {loss}, gradient norm {:.3e}, lr {lr:.3e}, frames {}",
                    grads.norm(),
                    ids.join(",")
                ),
            });
        }
        adam_step(
            &mut net.parameters_mut(),
            &grads.tensors,
            &mut adam,
            lr,
            cfg,
        )?;

        let mut record = LogRecord {
            iteration: i,
            loss,
            lr,
            val_maxf: None,
        };
        let done = i + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_iterations {
            let report = evaluate(net, &data.val)?;
            record.val_maxf = Some(report.maxf);
            log::info!("iteration {done}: loss {loss:.5} val {report}");
            if outcome.best_maxf.is_none_or(|b| report.maxf > b) {
                outcome.best_maxf = Some(report.maxf);
                outcome.best_iteration = Some(done);
                outcome.best = Some(net.clone());
                if let Some(path) = checkpoint_path {
                    checkpoint::save(net, path)?;
                    outcome.checkpoints_written += 1;
                }
            }
        }
        outcome.log.push(record);
    }
    Ok(outcome)
}

/// Where [`train`] artifacts go when driven from a run directory.
pub fn checkpoint_file(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}
