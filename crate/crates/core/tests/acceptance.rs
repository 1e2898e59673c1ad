//! Acceptance suite: one [PASS]/[FAIL] line per criterion, nonzero exit on
//! any failure. Expected values come from independent oracles written here.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lidcam::densify::{densify, PixelSource};
use lidcam::eval::{EvalReport, Sweep, ThresholdGrid};
use lidcam::geometry::{
    project_cloud, CalibrationSet, ChannelFrame, Point, PointCloud, SparseZyxImage,
};
use lidcam::network::spec::receptive_field_sequence;
use lidcam::network::{
    FusionMode, FusionNetwork, LabeledBatch, Layer, LayerKind, LayerSpec, NetworkInput, NetworkSpec,
};
use lidcam::numerics::{
    gradient_check_with, softmax_cross_entropy, Differentiable, GradCheckOptions, LabelMap,
    RngState, Shape, Stencil, Tensor,
};
use lidcam::pipeline::{dense_zyx, sample_from_parts, PreprocessOptions};
use lidcam::trainer::{self, mean_loss, poly_lr, Dataset, Sample, TrainConfig};
use nalgebra::{Matrix3x4, Matrix4, Rotation3, Vector3};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-6;
const GRAD_OPTS: GradCheckOptions = GradCheckOptions {
    step: 1e-4,
    floor: 1e-4,
    stencil: Stencil::FivePoint,
    max_refinements: 12,
};

/// Parameters plus a loss and its analytic gradient, all as closures.
/// `loss` also returns the ELU sign pattern when the function has kinks.
struct Probe<'a> {
    x: Vec<f64>,
    loss: Box<dyn Fn(&[f64]) -> (f64, Option<Vec<bool>>) + 'a>,
    grad: Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
}

impl Differentiable for Probe<'_> {
    type Input = ();
    fn parameter_count(&self) -> usize {
        self.x.len()
    }
    fn parameter(&self, i: usize) -> f64 {
        self.x[i]
    }
    fn set_parameter(&mut self, i: usize, v: f64) {
        self.x[i] = v;
    }
    fn loss(&self, _: &()) -> f64 {
        (self.loss)(&self.x).0
    }
    fn loss_and_gradient(&self, _: &()) -> (f64, Vec<f64>) {
        (self.loss(&()), (self.grad)(&self.x))
    }
    fn loss_and_region(&self, _: &()) -> (f64, Option<Vec<bool>>) {
        (self.loss)(&self.x)
    }
}

fn random_tensor(rng: &mut RngState, s: Shape) -> Tensor {
    Tensor::from_fn(s, |_, _, _, _| rng.uniform_range(-1.0, 1.0))
}

fn random_labels(rng: &mut RngState, h: usize, w: usize) -> LabelMap {
    let data = (0..h * w)
        .map(|_| match rng.below(6) {
            0 => LabelMap::IGNORE,
            1 | 2 => LabelMap::ROAD,
            _ => LabelMap::NOT_ROAD,
        })
        .collect();
    LabelMap::from_vec(h, w, data).unwrap()
}

/// Checks weight, bias and input gradients of one layer under the loss
/// `sum(out * r)` for a fixed random `r`. Dropout uses a fixed mask.
fn check_layer(spec: LayerSpec, h: usize, w: usize, rng: &mut RngState) -> Result<f64, String> {
    let layer = Layer::new(spec.clone(), rng);
    let input = random_tensor(rng, Shape::new(1, spec.in_channels, h, w));
    let (out, _) = layer
        .forward(input.clone(), true, &mut RngState::new(11))
        .map_err(|e| e.to_string())?;
    let r = random_tensor(rng, out.shape());
    let (nw, nb) = (layer.params.weight.len(), layer.params.bias.len());
    let split = |x: &[f64]| {
        let mut l = layer.clone();
        l.params.weight.copy_from_slice(&x[..nw]);
        l.params.bias.copy_from_slice(&x[nw..nw + nb]);
        (
            l,
            Tensor::from_vec(input.shape(), x[nw + nb..].to_vec()).unwrap(),
        )
    };
    let mut x = layer.params.weight.clone();
    x.extend(&layer.params.bias);
    x.extend(input.data());
    let mut probe = Probe {
        x,
        loss: Box::new(|x| {
            let (l, t) = split(x);
            let (out, tape) = l.forward(t, true, &mut RngState::new(11)).unwrap();
            let signs = tape
                .activation()
                .map(|a| a.data().iter().map(|&v| v < 0.0).collect());
            (out.dot(&r).unwrap(), signs)
        }),
        grad: Box::new(|x| {
            let (l, t) = split(x);
            let (_, tape) = l.forward(t, true, &mut RngState::new(11)).unwrap();
            let g = l.backward(&r, &tape).unwrap();
            let mut v = g.weight;
            v.extend(g.bias);
            v.extend(g.input.data());
            v
        }),
    };
    let rep = gradient_check_with(&mut probe, &(), GRAD_TOL, GRAD_OPTS);
    ensure(rep.passed, || format!("{rep:?}"))?;
    Ok(rep.max_rel_error)
}

fn check_cross_entropy(rng: &mut RngState) -> Result<f64, String> {
    let s = Shape::new(1, 2, 8, 16);
    let logits = random_tensor(rng, s).scaled(3.0);
    let labels = vec![random_labels(rng, 8, 16)];
    let mut probe = Probe {
        x: logits.data().to_vec(),
        loss: Box::new(|x| {
            (
                softmax_cross_entropy(&Tensor::from_vec(s, x.to_vec()).unwrap(), &labels)
                    .unwrap()
                    .0,
                None,
            )
        }),
        grad: Box::new(|x| {
            let g = softmax_cross_entropy(&Tensor::from_vec(s, x.to_vec()).unwrap(), &labels)
                .unwrap()
                .1;
            g.data().to_vec()
        }),
    };
    let rep = gradient_check_with(&mut probe, &(), GRAD_TOL, GRAD_OPTS);
    ensure(rep.passed, || format!("{rep:?}"))?;
    Ok(rep.max_rel_error)
}

fn criterion_gradients() -> Check {
    let mut rng = RngState::new(2024);
    let spec = NetworkSpec::with_width(2, 2);
    let mut lines = vec![];
    let mut context = spec.layer(10).clone();
    context.dropout_p = 0.5;
    let layer_cases: [(&str, LayerSpec, usize, usize); 6] = [
        ("strided conv 4x4/2", spec.layer(1).clone(), 8, 16),
        ("conv 3x3", spec.layer(2).clone(), 8, 16),
        ("dilated conv 3x3 d(4,8) + dropout", context, 8, 16),
        ("conv 1x1", spec.layer(14).clone(), 8, 16),
        ("transposed conv 4x4/2", spec.layer(15).clone(), 4, 8),
        ("output conv (no ELU)", spec.layer(21).clone(), 8, 16),
    ];
    for (name, l, h, w) in layer_cases {
        let e = check_layer(l, h, w, &mut rng).map_err(|e| format!("{name}: {e}"))?;
        lines.push(format!("{name} {e:.1e}"));
    }
    lines.push(format!(
        "cross-entropy {:.1e}",
        check_cross_entropy(&mut rng)?
    ));

    for mode in FusionMode::ALL {
        let mut net = FusionNetwork::build(mode, &spec, &mut rng).map_err(|e| e.to_string())?;
        if let Some(c) = net.cross_scalars_mut() {
            for v in c.a.iter_mut().chain(c.b.iter_mut()) {
                *v = rng.uniform_range(-0.5, 0.5);
            }
        }
        let s = Shape::new(1, 3, 8, 16);
        let batch = LabeledBatch {
            rgb: mode.needs_rgb().then(|| random_tensor(&mut rng, s)),
            zyx: mode.needs_zyx().then(|| random_tensor(&mut rng, s)),
            labels: vec![random_labels(&mut rng, 8, 16)],
        };
        let rep = gradient_check_with(&mut net, &batch, GRAD_TOL, GRAD_OPTS);
        ensure(rep.passed, || format!("{mode} network: {rep:?}"))?;
        lines.push(format!(
            "{mode} net ({} params, {} near a kink) {:.1e}",
            rep.checked, rep.refined, rep.max_rel_error
        ));
    }
    Ok(format!(
        "max rel. error < {GRAD_TOL:.0e}: {}",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------- receptive field

fn criterion_receptive_field() -> Check {
    let spec = NetworkSpec::default();
    // stride-1 layers: each grows the field by (k - 1) * dilation
    let (mut h, mut w) = (1, 1);
    let mut expected = vec![];
    for l in &spec.layers[5..14] {
        ensure(l.stride == 1 && l.kind == LayerKind::Conv, || {
            format!("layer {} is not a plain conv", l.index)
        })?;
        h += (l.kernel_h - 1) * l.dilation_h;
        w += (l.kernel_w - 1) * l.dilation_w;
        expected.push((h, w));
    }
    let table: Vec<(usize, usize)> = [3, 5, 7, 11, 19, 35, 67, 69, 69]
        .into_iter()
        .zip([3, 5, 9, 17, 33, 65, 129, 131, 131])
        .collect();
    let got = receptive_field_sequence(&spec, 6, 14);
    ensure(got == expected, || {
        format!("sequence {got:?}, recurrence {expected:?}")
    })?;
    ensure(got == table, || {
        format!("sequence {got:?}, table {table:?}")
    })?;
    Ok(format!(
        "H {:?}, W {:?}",
        got.iter().map(|r| r.0).collect::<Vec<_>>(),
        got.iter().map(|r| r.1).collect::<Vec<_>>()
    ))
}

// --------------------------------------------------------- parameter counts

/// Independent count from the channel plan: conv k x k, cin -> cout.
fn oracle_base_params(d: usize, c: usize, input: usize) -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let (e, x) = ([d, d, 2 * d, 2 * d, 4 * d], 4 * d);
    let mut n = conv(4, input, e[0])
        + conv(3, e[0], e[1])
        + conv(4, e[1], e[2])
        + conv(3, e[2], e[3])
        + conv(4, e[3], e[4]);
    n += conv(3, e[4], x) + 7 * conv(3, x, x) + conv(1, x, x);
    let dec = [2 * d, 2 * d, d, d, d, d];
    let mut cin = x;
    for (i, &cout) in dec.iter().enumerate() {
        n += conv(if i % 2 == 0 { 4 } else { 3 }, cin, cout);
        cin = cout;
    }
    n + conv(3, cin, c)
}

fn criterion_parameter_counts() -> Check {
    let mut rng = RngState::new(3);
    let mut specs = vec![(32, 2)];
    for _ in 0..3 {
        specs.push((1 + rng.below(24), 2 + rng.below(4)));
    }
    let mut base_default = 0;
    for &(d, c) in &specs {
        let spec = NetworkSpec::with_width(d, c);
        spec.validate().map_err(|e| e.to_string())?;
        let count =
            |m| FusionNetwork::build(m, &spec, &mut RngState::new(0)).map(|n| n.parameter_count());
        let base = count(FusionMode::Zyx).map_err(|e| e.to_string())?;
        let [rgb, early, late, cross] = [
            FusionMode::Rgb,
            FusionMode::Early,
            FusionMode::Late,
            FusionMode::Cross,
        ]
        .map(|m| count(m).unwrap());
        let oracle = oracle_base_params(d, c, 3);
        ensure(base == oracle && rgb == base, || {
            format!("D={d} C={c}: base {base}, rgb {rgb}, oracle {oracle}")
        })?;
        ensure(early - base == 3 * 16 * d, || {
            format!("D={d}: early - base = {}", early - base)
        })?;
        ensure(cross == 2 * base + 40, || {
            format!("D={d}: cross {cross} vs 2*{base}+40")
        })?;
        ensure(late + c == 2 * base, || {
            format!("D={d} C={c}: late {late} vs 2*{base}-{c}")
        })?;
        if d == 32 {
            ensure(early - base == 1536, || {
                format!("early - base = {}", early - base)
            })?;
            base_default = base;
        }
    }
    let target = 1_623_395i64;
    let diff = base_default as i64 - target;
    Ok(format!(
        "identities hold for (D, C) in {specs:?}; base {base_default} vs published {target} ({diff:+}, {:+.2}%), \
         the gap comes from the assumed decoder widths (2D,2D,D,D,D,D) which the published count does not pin down",
        100.0 * diff as f64 / target as f64
    ))
}

// ------------------------------------------------------- zero-init fusion

fn criterion_zero_init() -> Check {
    let mut rng = RngState::new(4);
    let spec = NetworkSpec::with_width(4, 2);
    let lidar =
        FusionNetwork::build(FusionMode::Zyx, &spec, &mut rng).map_err(|e| e.to_string())?;
    let camera =
        FusionNetwork::build(FusionMode::Rgb, &spec, &mut rng).map_err(|e| e.to_string())?;
    let mut cross =
        FusionNetwork::build(FusionMode::Cross, &spec, &mut rng).map_err(|e| e.to_string())?;
    let c = cross.cross_scalars().unwrap();
    ensure(c.a.iter().chain(&c.b).all(|&v| v == 0.0), || {
        "cross scalars not initialised to zero".into()
    })?;
    let donors: Vec<Vec<f64>> = lidar
        .parameters()
        .into_iter()
        .chain(camera.parameters())
        .map(<[f64]>::to_vec)
        .collect();
    {
        let mut p = cross.parameters_mut();
        ensure(p.len() == donors.len() + 2, || {
            format!(
                "{} cross tensors for {} donor tensors",
                p.len(),
                donors.len()
            )
        })?;
        for (dst, src) in p.iter_mut().zip(&donors) {
            dst.copy_from_slice(src);
        }
    }
    let mut worst = 0.0f64;
    for (h, w) in [(48, 156), (37, 61)] {
        let s = Shape::new(2, 3, h, w);
        let (rgb, zyx) = (
            random_tensor(&mut rng, s),
            random_tensor(&mut rng, s).scaled(20.0),
        );
        let a = lidar
            .forward(NetworkInput::new(None, Some(&zyx)))
            .map_err(|e| e.to_string())?;
        let b = camera
            .forward(NetworkInput::new(Some(&rgb), None))
            .map_err(|e| e.to_string())?;
        let got = cross
            .forward(NetworkInput::new(Some(&rgb), Some(&zyx)))
            .map_err(|e| e.to_string())?;
        let mut sum = a.clone();
        sum.add_scaled(&b, 1.0).unwrap();
        worst = worst.max(got.max_abs_diff(&sum).unwrap());
    }
    ensure(worst == 0.0, || format!("max abs deviation {worst:e}"))?;
    Ok("cross logits equal lidar + camera logits, max abs deviation 0".into())
}

// --------------------------------------------------------- toy overfitting

struct ToyRun {
    initial: f64,
    final_loss: f64,
    maxf: f64,
    largest_scalar: f64,
    elapsed: Duration,
}

fn toy_run() -> Result<ToyRun, String> {
    let (w, h) = (156, 48);
    let samples: Vec<Sample> = (0..5)
        .map(|i| {
            let f = lidcam::synth::generate_frame(w, h, 1, i);
            let (d, _) = dense_zyx(&f.cloud, &f.calib, w, h, PreprocessOptions::default()).unwrap();
            sample_from_parts(
                &f.id,
                Some(lidcam::dataio::images::rgb_to_tensor(&f.rgb)),
                Some(&d),
                f.labels,
            )
        })
        .collect();
    let data = Dataset {
        train: samples.clone(),
        val: samples,
    };
    let cfg = TrainConfig::toy();
    let mut net = FusionNetwork::build(
        FusionMode::Cross,
        &NetworkSpec::with_width(8, 2),
        &mut RngState::new(1),
    )
    .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let initial = mean_loss(&net, &data.train).map_err(|e| e.to_string())?;
    trainer::train(&mut net, &data, &cfg, None).map_err(|e| e.to_string())?;
    let final_loss = mean_loss(&net, &data.train).map_err(|e| e.to_string())?;
    let report = trainer::evaluate(&net, &data.train).map_err(|e| e.to_string())?;
    let c = net.cross_scalars().unwrap();
    Ok(ToyRun {
        initial,
        final_loss,
        maxf: report.maxf,
        largest_scalar: c.a.iter().chain(&c.b).fold(0.0, |m, v| m.max(v.abs())),
        elapsed: start.elapsed(),
    })
}

fn criterion_toy(run: &Result<ToyRun, String>) -> Check {
    let r = run.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "training MaxF {:.2}%, loss {:.4} -> {:.4} (ratio {:.4}), {:.0} s",
        100.0 * r.maxf,
        r.initial,
        r.final_loss,
        r.final_loss / r.initial,
        r.elapsed.as_secs_f64()
    );
    ensure(r.maxf >= 0.99, || detail.clone())?;
    ensure(r.final_loss <= 0.1 * r.initial, || detail.clone())?;
    ensure(r.elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

fn criterion_learnable_fusion(run: &Result<ToyRun, String>) -> Check {
    let r = run.as_ref().map_err(Clone::clone)?;
    let detail = format!("largest |a_j|, |b_j| = {:.4e}", r.largest_scalar);
    ensure(r.largest_scalar > 1e-3, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ metrics

#[derive(Clone, Copy, Debug, PartialEq, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

fn oracle_counts(pairs: &[(Vec<f64>, LabelMap)], t: f64) -> Counts {
    let mut c = Counts::default();
    for (conf, gt) in pairs {
        for (i, &p) in conf.iter().enumerate() {
            let l = gt.data()[i];
            if l == LabelMap::IGNORE {
                continue;
            }
            match (p >= t, l == LabelMap::ROAD) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    c
}

struct OracleReport {
    counts: Vec<Counts>,
    maxf: f64,
    threshold: f64,
    ap: f64,
    fpr: f64,
    fnr: f64,
}

fn oracle_report(pairs: &[(Vec<f64>, LabelMap)], thresholds: &[f64]) -> OracleReport {
    let counts: Vec<Counts> = thresholds
        .iter()
        .map(|&t| oracle_counts(pairs, t))
        .collect();
    let pr: Vec<Option<(f64, f64)>> = counts
        .iter()
        .map(|c| {
            let rec = c.tp as f64 / (c.tp + c.fn_) as f64;
            (c.tp + c.fp > 0).then(|| (c.tp as f64 / (c.tp + c.fp) as f64, rec))
        })
        .collect();
    let (mut best, mut best_i) = (-1.0, 0);
    for (i, v) in pr.iter().enumerate() {
        if let Some((p, r)) = *v {
            let f = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            if f > best {
                best = f;
                best_i = i;
            }
        }
    }
    let mut ap = 0.0;
    for k in 0..=10 {
        let level = k as f64 / 10.0;
        let mut m: f64 = 0.0;
        for (p, r) in pr.iter().flatten() {
            if *r >= level {
                m = m.max(*p);
            }
        }
        ap += m;
    }
    let c = counts[best_i];
    OracleReport {
        maxf: best,
        threshold: thresholds[best_i],
        ap: ap / 11.0,
        fpr: c.fp as f64 / (c.fp + c.tn) as f64,
        fnr: c.fn_ as f64 / (c.fn_ + c.tp) as f64,
        counts,
    }
}

fn compare_metrics(pairs: &[(Vec<f64>, LabelMap)], grid: ThresholdGrid) -> Result<(), String> {
    let mut sweep = Sweep::new(grid).map_err(|e| e.to_string())?;
    for (c, g) in pairs {
        sweep.add(c, g).map_err(|e| e.to_string())?;
    }
    let curve = sweep.finish().map_err(|e| e.to_string())?;
    if grid == ThresholdGrid::Uniform(255) {
        let t: Vec<f64> = (0..255).map(|i| i as f64 / 254.0).collect();
        ensure(
            curve
                .thresholds
                .iter()
                .zip(&t)
                .all(|(a, b)| (a - b).abs() < 1e-15),
            || "threshold grid".into(),
        )?;
    }
    let oracle = oracle_report(pairs, &curve.thresholds);
    for (i, (c, o)) in curve.counts.iter().zip(&oracle.counts).enumerate() {
        let got = Counts {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        };
        ensure(got == *o, || {
            format!("threshold {i}: {got:?} vs oracle {o:?}")
        })?;
    }
    let r = EvalReport::from_curve(&curve).map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure(
        close(r.maxf, oracle.maxf)
            && close(r.ap, oracle.ap)
            && r.threshold == oracle.threshold
            && close(r.fpr.unwrap(), oracle.fpr)
            && close(r.fnr.unwrap(), oracle.fnr),
        || {
            format!(
                "report {r:?} vs oracle maxf {} ap {} t {} fpr {} fnr {}",
                oracle.maxf, oracle.ap, oracle.threshold, oracle.fpr, oracle.fnr
            )
        },
    )
}

fn criterion_metrics() -> Check {
    let mut rng = RngState::new(7);
    let mut pairs = vec![];
    for k in 0..50 {
        let mut gt = random_labels(&mut rng, 16, 16);
        gt.data_mut()[0] = LabelMap::ROAD;
        gt.data_mut()[1] = LabelMap::NOT_ROAD;
        let conf: Vec<f64> = (0..256)
            .map(|i| match (k % 3, rng.below(4)) {
                // some values exactly on the grid, some informative, some noise
                (_, 0) => rng.below(255) as f64 / 254.0,
                (0, _) => rng.uniform(),
                _ => {
                    let road = gt.data()[i] == LabelMap::ROAD;
                    (if road { 0.6 } else { 0.3 } + rng.uniform_range(-0.3, 0.3)).clamp(0.0, 1.0)
                }
            })
            .collect();
        pairs.push((conf, gt));
    }
    for grid in [ThresholdGrid::Uniform(255), ThresholdGrid::Distinct] {
        for (i, p) in pairs.iter().enumerate() {
            compare_metrics(std::slice::from_ref(p), grid)
                .map_err(|e| format!("pair {i} {grid:?}: {e}"))?;
        }
        compare_metrics(&pairs, grid).map_err(|e| format!("all pairs {grid:?}: {e}"))?;
    }
    Ok("counts exact and MaxF/AP/FPR/FNR within 1e-12 on 50 pairs, per pair and pooled, uniform and distinct thresholds".into())
}

// --------------------------------------------------------------- projection

fn random_calibration(rng: &mut RngState, w: usize, h: usize) -> CalibrationSet {
    let rot = Rotation3::from_euler_angles(
        rng.uniform_range(-0.1, 0.1),
        rng.uniform_range(-0.1, 0.1),
        rng.uniform_range(-0.1, 0.1),
    );
    // LIDAR x forward, y left, z up -> camera x right, y down, z forward
    #[rustfmt::skip]
    let axes = Matrix4::new(
        0.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -1.0, 0.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    let mut t = rot.to_homogeneous() * axes;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(
        rng.uniform_range(-0.3, 0.3),
        rng.uniform_range(-0.3, 0.3),
        rng.uniform_range(-0.3, 0.3),
    ));
    let r = Rotation3::from_euler_angles(0.005, -0.01, 0.002).to_homogeneous();
    let f = rng.uniform_range(0.4, 0.8) * w as f64;
    #[rustfmt::skip]
    let p = Matrix3x4::new(
        f, 0.0, w as f64 / 2.0, rng.uniform_range(-20.0, 20.0),
        0.0, f, h as f64 / 2.0, 0.0,
        0.0, 0.0, 1.0, rng.uniform_range(-0.01, 0.01),
    );
    CalibrationSet::new(p, r, t).unwrap()
}

fn mat_mul(a: &[[f64; 4]], b: &[[f64; 4]; 4]) -> Vec<[f64; 4]> {
    a.iter()
        .map(|row| {
            let mut out = [0.0; 4];
            for (j, o) in out.iter_mut().enumerate() {
                for k in 0..4 {
                    *o += row[k] * b[k][j];
                }
            }
            out
        })
        .collect()
}

/// Per-point projection with explicit loops: `lambda (u, v, 1) = P R T p`.
fn oracle_projection(
    cloud: &PointCloud,
    calib: &CalibrationSet,
    w: usize,
    h: usize,
) -> (SparseZyxImage, usize) {
    let rows = |m: &dyn Fn(usize, usize) -> f64, n: usize| -> Vec<[f64; 4]> {
        (0..n)
            .map(|i| [m(i, 0), m(i, 1), m(i, 2), m(i, 3)])
            .collect()
    };
    let p = rows(&|i, j| calib.projection()[(i, j)], 3);
    let r = rows(&|i, j| calib.rectification()[(i, j)], 4);
    let t = rows(&|i, j| calib.lidar_to_camera()[(i, j)], 4);
    let as4 = |m: Vec<[f64; 4]>| -> [[f64; 4]; 4] { [m[0], m[1], m[2], m[3]] };
    let chain = mat_mul(&mat_mul(&p, &as4(r)), &as4(t));
    let mut img = SparseZyxImage::empty(w, h);
    let mut best = vec![f64::INFINITY; w * h];
    let mut in_view = 0;
    for pt in &cloud.points {
        let x = [pt.x as f64, pt.y as f64, pt.z as f64, 1.0];
        let q: Vec<f64> = chain
            .iter()
            .map(|row| (0..4).map(|k| row[k] * x[k]).sum())
            .collect();
        let lambda = q[2];
        if lambda <= 0.0 {
            continue;
        }
        let (u, v) = ((q[0] / lambda).round(), (q[1] / lambda).round());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        in_view += 1;
        let idx = v as usize * w + u as usize;
        if lambda < best[idx] {
            best[idx] = lambda;
            img.set(idx, [x[2], x[1], x[0]]);
        }
    }
    (img, in_view)
}

fn criterion_projection() -> Check {
    let mut rng = RngState::new(8);
    let (mut total_behind, mut total_collisions) = (0, 0);
    let mut max_dev = 0.0f64;
    for trial in 0..10 {
        let (w, h) = (60 + 10 * trial, 40);
        let calib = random_calibration(&mut rng, w, h);
        let mut points = vec![];
        while points.len() < 1000 {
            let x = rng.uniform_range(-30.0, 60.0);
            let p = Point::new(
                x as f32,
                rng.uniform_range(-20.0, 20.0) as f32,
                rng.uniform_range(-3.0, 2.0) as f32,
                0.5,
            );
            points.push(p);
            // a point further along the same ray competes for the same pixel
            if rng.below(4) == 0 && points.len() < 1000 {
                let s = rng.uniform_range(1.01, 2.0) as f32;
                points.push(Point::new(p.x * s, p.y * s, p.z * s, 0.1));
            }
        }
        let cloud = PointCloud::new(points);
        let (got, summary) =
            project_cloud(&cloud, &calib, w, h, ChannelFrame::Lidar).map_err(|e| e.to_string())?;
        let (want, in_view) = oracle_projection(&cloud, &calib, w, h);
        ensure(got.mask == want.mask, || {
            format!("trial {trial}: masks differ")
        })?;
        for (a, b) in got.channels().iter().zip(want.channels()) {
            for (x, y) in a.iter().zip(b) {
                max_dev = max_dev.max((x - y).abs());
            }
        }
        ensure(max_dev == 0.0, || {
            format!("trial {trial}: values deviate by {max_dev:e}")
        })?;
        ensure(summary.points_in_view == in_view, || {
            format!(
                "trial {trial}: {} vs {in_view} in view",
                summary.points_in_view
            )
        })?;
        total_behind += cloud
            .points
            .iter()
            .filter(|p| calib.to_camera(&p.homogeneous())[2] <= 0.0)
            .count();
        total_collisions += in_view - summary.pixels_set;
    }
    ensure(total_behind > 1000 && total_collisions > 1000, || {
        format!("weak fixture: {total_behind} behind, {total_collisions} collisions")
    })?;
    Ok(format!("10 clouds x 1000 points match exactly ({total_behind} points behind the camera rejected, {total_collisions} collisions resolved)"))
}

// ----------------------------------------------------------------- schedule

fn criterion_schedule() -> Check {
    let cfg = TrainConfig::default();
    let n = cfg.total_iterations;
    let lr = |i| poly_lr(i, &cfg).map_err(|e| e.to_string());
    ensure(lr(0)? == 0.0005, || format!("eta(0) = {}", lr(0).unwrap()))?;
    ensure(lr(n)? == 0.0, || format!("eta(N) = {}", lr(n).unwrap()))?;
    let mut rng = RngState::new(9);
    let mut its: Vec<usize> = (0..98).map(|_| rng.below(n + 1)).collect();
    its.extend([0, n]);
    its.sort_unstable();
    its.dedup();
    for pair in its.windows(2) {
        let (a, b) = (lr(pair[0])?, lr(pair[1])?);
        ensure(b < a, || {
            format!("eta({}) = {a} <= eta({}) = {b}", pair[0], pair[1])
        })?;
        let want = 0.0005 * (1.0 - pair[1] as f64 / n as f64).powf(0.9);
        ensure((b - want).abs() <= 1e-15, || {
            format!("eta({}) = {b}, expected {want}", pair[1])
        })?;
    }
    Ok(format!(
        "eta(0) = 0.0005, eta(N) = 0, strictly decreasing over {} sampled iterations",
        its.len()
    ))
}

// ------------------------------------------------------------------ densify

fn sparse_fixture(rng: &mut RngState, w: usize, h: usize, density: f64) -> SparseZyxImage {
    let mut img = SparseZyxImage::empty(w, h);
    for i in 0..w * h {
        if rng.uniform() < density {
            img.set(
                i,
                [
                    rng.uniform_range(-2.0, 1.0),
                    rng.uniform_range(-10.0, 10.0),
                    rng.uniform_range(2.0, 60.0),
                ],
            );
        }
    }
    img
}

fn criterion_densify() -> Check {
    let mut rng = RngState::new(10);
    let (w, h) = (32, 32);

    let full = sparse_fixture(&mut rng, w, h, 1.1);
    let d = densify(&full, 11, 2.0).map_err(|e| e.to_string())?;
    ensure(d.z == full.z && d.y == full.y && d.x == full.x, || {
        "dense input changed".into()
    })?;
    ensure(d.source.iter().all(|s| *s == PixelSource::Measured), || {
        "dense input not all measured".into()
    })?;

    let mut checked = 0;
    for (density, window, power) in [
        (0.05, 3, 2.0),
        (0.1, 5, 1.0),
        (0.02, 11, 2.0),
        (0.3, 7, 3.0),
        (0.0, 5, 2.0),
    ] {
        let img = sparse_fixture(&mut rng, w, h, density);
        let got = densify(&img, window, power).map_err(|e| e.to_string())?;
        let r = (window / 2) as i64;
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                let idx = (py * w as i64 + px) as usize;
                let (mut acc, mut total) = ([0.0; 3], 0.0);
                let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
                for y in (py - r).max(0)..=(py + r).min(h as i64 - 1) {
                    for x in (px - r).max(0)..=(px + r).min(w as i64 - 1) {
                        let j = (y * w as i64 + x) as usize;
                        if !img.mask[j] || j == idx {
                            continue;
                        }
                        let dist = (((x - px).pow(2) + (y - py).pow(2)) as f64).sqrt();
                        let wt = 1.0 / dist.powf(power);
                        let v = [img.z[j], img.y[j], img.x[j]];
                        for c in 0..3 {
                            acc[c] += wt * v[c];
                            lo[c] = lo[c].min(v[c]);
                            hi[c] = hi[c].max(v[c]);
                        }
                        total += wt;
                    }
                }
                let g = [got.z[idx], got.y[idx], got.x[idx]];
                let (want_src, want) = if img.mask[idx] {
                    (PixelSource::Measured, [img.z[idx], img.y[idx], img.x[idx]])
                } else if total > 0.0 {
                    (
                        PixelSource::Interpolated,
                        [acc[0] / total, acc[1] / total, acc[2] / total],
                    )
                } else {
                    (PixelSource::Unfilled, [0.0; 3])
                };
                ensure(got.source[idx] == want_src, || {
                    format!("pixel ({px},{py}): {:?} vs {want_src:?}", got.source[idx])
                })?;
                for c in 0..3 {
                    ensure(
                        (g[c] - want[c]).abs() <= 1e-12 * want[c].abs().max(1.0),
                        || {
                            format!(
                                "pixel ({px},{py}) channel {c}: {} vs oracle {}",
                                g[c], want[c]
                            )
                        },
                    )?;
                    if want_src == PixelSource::Interpolated {
                        // a weighted mean can round one ulp past its extreme inputs
                        let slack = 1e-14 * lo[c].abs().max(hi[c].abs());
                        ensure(lo[c] - slack <= g[c] && g[c] <= hi[c] + slack, || {
                            format!("pixel ({px},{py}): {} outside [{}, {}]", g[c], lo[c], hi[c])
                        })?;
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(format!("dense input unchanged; {checked} pixels of 5 fixtures match the oracle and stay within their window bounds"))
}

// ------------------------------------------------------------ determinism

fn lidcam(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lidcam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LIDCAM_DATA_ROOT")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "lidcam {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn pipeline_run(root: &Path) -> Result<(BTreeMap<PathBuf, Vec<u8>>, String), String> {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let (data, prep, run) = (
        s(root.join("data")),
        s(root.join("prep")),
        s(root.join("run")),
    );
    let manifest = s(root.join("prep/manifest.tsv"));
    let ckpt = s(root.join("run/best.ckpt"));
    lidcam(&[
        "synth", "--out", &data, "--frames", "4", "--val", "1", "--seed", "5",
    ])?;
    lidcam(&[
        "preprocess",
        "--manifest",
        &s(root.join("data/manifest.tsv")),
        "--out",
        &prep,
    ])?;
    let train = lidcam(&[
        "train",
        "--manifest",
        &manifest,
        "--mode",
        "cross",
        "--config",
        "toy",
        "--iterations",
        "40",
        "--eval-every",
        "20",
        "--out",
        &run,
    ])?;
    let eval = lidcam(&[
        "eval",
        "--manifest",
        &manifest,
        "--checkpoint",
        &ckpt,
        "--split",
        "all",
        "--report",
        &s(root.join("run/eval.txt")),
    ])?;
    lidcam(&[
        "infer",
        "--manifest",
        &manifest,
        "--checkpoint",
        &ckpt,
        "--out",
        &s(root.join("run/infer")),
    ])?;
    let console = format!("{train}{eval}").replace(&*root.to_string_lossy(), "<root>");
    Ok((files_under(root), console))
}

fn criterion_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, out_a) = pipeline_run(&tmp.path().join("a"))?;
    let (b, out_b) = pipeline_run(&tmp.path().join("b"))?;
    let names: Vec<_> = a.keys().collect();
    ensure(names == b.keys().collect::<Vec<_>>(), || {
        "different file sets".into()
    })?;
    for (k, v) in &a {
        ensure(b[k] == *v, || format!("{} differs", k.display()))?;
    }
    ensure(out_a == out_b, || "different console output".into())?;
    for needed in [
        "prep/zyx",
        "prep/preprocess_report.tsv",
        "run/best.ckpt",
        "run/train_log.tsv",
        "run/eval.txt",
        "run/infer",
    ] {
        ensure(a.keys().any(|k| k.starts_with(needed)), || {
            format!("missing {needed}")
        })?;
    }
    Ok(format!(
        "synth -> preprocess -> train -> eval -> infer: {} files byte-identical across two runs",
        a.len()
    ))
}

// --------------------------------------------------------------------- main

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .map_or("panicked".into(), |m| format!("panicked: {m}")))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("[PASS] {name} ({secs:.1} s): {detail}");
            true
        }
        Err(detail) => {
            println!("[FAIL] {name} ({secs:.1} s): {detail}");
            false
        }
    }
}

fn main() {
    let grad_start = Instant::now();
    let mut ok = run("1 gradient correctness", || {
        let r = criterion_gradients()?;
        let t = grad_start.elapsed();
        ensure(t < Duration::from_secs(120), || format!("took {t:?}; {r}"))?;
        Ok(r)
    });
    ok &= run("2 receptive field", criterion_receptive_field);
    ok &= run("3 parameter-count identities", criterion_parameter_counts);
    ok &= run("4 zero-init fusion equivalence", criterion_zero_init);
    let toy = catch_unwind(toy_run).unwrap_or_else(|_| Err("toy run panicked".into()));
    ok &= run("5 toy overfitting", || criterion_toy(&toy));
    ok &= run("6 learnable fusion", || criterion_learnable_fusion(&toy));
    ok &= run("7 metric oracle", criterion_metrics);
    ok &= run("8 projection oracle", criterion_projection);
    ok &= run("9 learning-rate schedule", criterion_schedule);
    ok &= run("10 densify properties", criterion_densify);
    ok &= run("11 end-to-end determinism", criterion_determinism);
    if !ok {
        std::process::exit(1);
    }
}
