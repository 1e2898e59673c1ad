//! The `lidcam` command line: synth, preprocess, train, eval and infer.
//!
//! Frame-level problems (a missing file, a frame without labelled pixels)
//! are reported as warnings and the frame is skipped. Anything else, such as
//! an unreadable manifest or a mode the data cannot feed, is an error and
//! makes the process exit nonzero.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataio::{self, manifest::DATA_ROOT_ENV, Category, LoadOptions, Manifest};
use crate::eval::{EvalReport, Sweep, ThresholdGrid};
use crate::geometry::ChannelFrame;
use crate::network::{checkpoint, FusionMode, FusionNetwork, NetworkSpec};
use crate::numerics::{LabelMap, RngState};
use crate::pipeline::{self, PreprocessOptions};
use crate::trainer::{self, Sample};

#[derive(Debug, Parser)]
#[command(
    name = "lidcam",
    version,
    about = "LIDAR-camera fusion for road segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a small synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Project and densify every cloud into a ZYX image.
    Preprocess(PreprocessArgs),
    /// Train a network and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Report MaxF, AP, PRE, REC, FPR and FNR per category.
    Eval(EvalArgs),
    /// Write road confidence images, plus overlays where labels exist.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Frame manifest (tab-separated).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory relative manifest paths resolve against (default: the
    /// manifest's directory).
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
}

impl ManifestArgs {
    fn read(&self) -> anyhow::Result<Manifest> {
        Manifest::read(&self.manifest, self.data_root.as_deref())
            .with_context(|| format!("reading manifest {}", self.manifest.display()))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    /// Frames assigned to the validation split.
    #[arg(long, default_value_t = 1)]
    pub val: usize,
    #[arg(long, default_value_t = 156)]
    pub width: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    /// Output directory for ZYX images, the report and the updated manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Odd interpolation window side.
    #[arg(long, default_value_t = crate::densify::DEFAULT_WINDOW)]
    pub window: usize,
    /// Inverse-distance weighting power.
    #[arg(long, default_value_t = crate::densify::DEFAULT_POWER)]
    pub power: f64,
    /// Store coordinates in the rectified camera frame instead of the LIDAR frame.
    #[arg(long)]
    pub camera_frame: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long, default_value = "cross")]
    pub mode: FusionMode,
    /// Preset name (default, toy) or a `key = value` config file.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Run directory for the checkpoint and the training log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature maps of the first layer.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to evaluate: train, val, test or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: ManifestArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame ids to run; all frames when omitted.
    #[arg(long = "frame")]
    pub frames: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Decision threshold for the binary mask and the overlay.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.val > a.frames {
        bail!("--val {} exceeds --frames {}", a.val, a.frames);
    }
    create_dir(&a.out)?;
    let records = crate::synth::write_dataset(&a.out, a.frames, a.val, a.width, a.height, a.seed)?;
    println!(
        "wrote {} frames to {}",
        records.len(),
        a.out.join("manifest.tsv").display()
    );
    Ok(())
}

/// `target` relative to `base`; both are made absolute first.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| {
        p.canonicalize()
            .or_else(|_| std::path::absolute(p))
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let (t, b) = (abs(target), abs(base));
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return t;
    }
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

fn preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let manifest = a.input.read()?;
    let zyx_dir = a.out.join("zyx");
    create_dir(&zyx_dir)?;
    let opts = PreprocessOptions {
        window: a.window,
        power: a.power,
        frame: if a.camera_frame {
            ChannelFrame::Camera
        } else {
            ChannelFrame::Lidar
        },
    };
    crate::densify::densify(
        &crate::geometry::SparseZyxImage::empty(1, 1),
        opts.window,
        opts.power,
    )
    .context("invalid densification settings")?;

    let results: Vec<_> = manifest
        .records
        .par_iter()
        .map(|r| {
            let path = zyx_dir.join(format!("{}.zyx", r.id));
            pipeline::preprocess_frame(&manifest, r, opts)
                .map_err(anyhow::Error::from)
                .and_then(|(img, summary)| {
                    dataio::write_zyx(&path, &img)?;
                    Ok((img.fill_rate(), summary))
                })
        })
        .collect();

    let mut report = String::from("# id\tstatus\tpoints\tin_view\tpixels_set\tfill_rate\n");
    let mut records = vec![];
    let mut failed = 0;
    for (r, res) in manifest.records.iter().zip(results) {
        let mut rec = r.clone();
        for p in [
            &mut rec.rgb,
            &mut rec.cloud,
            &mut rec.calib,
            &mut rec.zyx,
            &mut rec.gt,
        ] {
            if let Some(x) = p.take() {
                *p = Some(relative_path(&manifest.resolve(&x), &a.out));
            }
        }
        match res {
            Ok((fill, s)) => {
                writeln!(
                    report,
                    "{}\tok\t{}\t{}\t{}\t{fill:.6}",
                    r.id, s.points_in, s.points_in_view, s.pixels_set
                )?;
                rec.zyx = Some(PathBuf::from("zyx").join(format!("{}.zyx", r.id)));
            }
            Err(e) => {
                failed += 1;
                log::warn!("frame {}: {e:#}", r.id);
                writeln!(
                    report,
                    "{}\terror: {}\t-\t-\t-\t-",
                    r.id,
                    format!("{e:#}").replace(['\t', '\n'], " ")
                )?;
            }
        }
        records.push(rec);
    }
    let report_path = a.out.join("preprocess_report.tsv");
    std::fs::write(&report_path, &report)
        .with_context(|| format!("writing {}", report_path.display()))?;
    let manifest_path = a.out.join("manifest.tsv");
    Manifest::write(&manifest_path, &records)?;
    println!(
        "preprocessed {} of {} frames; manifest {}",
        records.len() - failed,
        records.len(),
        manifest_path.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = a.iterations {
        cfg.train.total_iterations = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = a.eta0 {
        cfg.train.eta0 = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    cfg.train.validate()?;

    let manifest = a.input.read()?;
    let opts = LoadOptions {
        mode: a.mode,
        canvas: cfg.canvas,
        require_gt: true,
    };
    let data = pipeline::load_dataset(&manifest, opts)?;
    if data.train.is_empty() {
        bail!("manifest has no training frames");
    }

    let spec = NetworkSpec::with_width(cfg.width, cfg.num_classes);
    spec.validate()?;
    let mut net = FusionNetwork::build(a.mode, &spec, &mut RngState::new(cfg.train.seed).fork(3))?;
    let n = net.parameter_count();
    let base =
        FusionNetwork::build(FusionMode::Zyx, &spec, &mut RngState::new(0))?.parameter_count();
    let identity = match a.mode {
        FusionMode::Zyx | FusionMode::Rgb => "base network".to_string(),
        FusionMode::Early => format!("base {base} + {} for three extra input channels", n - base),
        FusionMode::Late => format!("base {base} + {}", n as i64 - base as i64),
        FusionMode::Cross => format!("2 x {base} + 40"),
    };
    println!("mode {}: {n} parameters ({identity})", a.mode);

    create_dir(&a.out)?;
    let ckpt = trainer::checkpoint_file(&a.out);
    let outcome = trainer::train(&mut net, &data, &cfg.train, Some(&ckpt))?;
    let log_path = a.out.join("train_log.tsv");
    trainer::write_log(&log_path, &outcome.log)
        .with_context(|| format!("writing {}", log_path.display()))?;
    match (outcome.best_maxf, outcome.best_iteration) {
        (Some(f), Some(i)) => {
            let last = outcome
                .log
                .iter()
                .rev()
                .find_map(|r| r.val_maxf)
                .unwrap_or(f);
            println!("final validation MaxF {:.2}%", 100.0 * last);
            println!(
                "best validation MaxF {:.2}% at iteration {i}; checkpoint {}",
                100.0 * f,
                ckpt.display()
            );
        }
        _ => {
            log::warn!("no iterations run; no checkpoint written");
        }
    }
    if let Some(c) = net.cross_scalars() {
        let max = c.a.iter().chain(&c.b).fold(0.0f64, |m, v| m.max(v.abs()));
        println!("largest cross connection weight {max:.6}");
    }
    Ok(())
}

/// Loads the frames of `split` the network can run on, warning about and
/// skipping frames that fail to load.
fn load_frames(
    manifest: &Manifest,
    ids: impl Iterator<Item = usize>,
    mode: FusionMode,
    require_gt: bool,
) -> anyhow::Result<Vec<(usize, Sample)>> {
    let ids: Vec<usize> = ids.collect();
    let opts = LoadOptions {
        mode,
        canvas: None,
        require_gt,
    };
    let mut out = vec![];
    let mut first_err = None;
    for i in &ids {
        match dataio::load_sample(manifest, &manifest.records[*i], opts) {
            Ok(s) => out.push((*i, s)),
            Err(e) => {
                log::warn!("skipping frame {}: {e}", manifest.records[*i].id);
                first_err.get_or_insert(e);
            }
        }
    }
    if out.is_empty() {
        match first_err {
            Some(e) => bail!("no frame could be loaded for {mode} fusion: {e}"),
            None => bail!("no frames selected"),
        }
    }
    Ok(out)
}

fn parse_split(s: &str) -> anyhow::Result<Option<dataio::Split>> {
    if s == "all" {
        return Ok(None);
    }
    Ok(Some(s.parse().map_err(anyhow::Error::msg)?))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let net = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = a.input.read()?;
    let split = parse_split(&a.split)?;
    let ids = (0..manifest.records.len())
        .filter(|&i| split.is_none_or(|s| manifest.records[i].split == s));
    let frames = load_frames(&manifest, ids, net.mode(), true)?;

    let mut groups: BTreeMap<String, (Vec<Vec<f64>>, Vec<LabelMap>)> = BTreeMap::new();
    let mut used = 0;
    for (i, s) in frames {
        if s.labels.evaluated() == 0 {
            log::warn!("skipping frame {}: every pixel is ignored", s.id);
            continue;
        }
        let conf = net.road_confidence(s.input())?.remove(0);
        let cat = manifest.records[i].category;
        let mut names = vec![cat.to_string(), "all".to_string()];
        if cat.is_urban() {
            names.push("urban".into());
        }
        for name in names {
            let g = groups.entry(name).or_default();
            g.0.push(conf.clone());
            g.1.push(s.labels.clone());
        }
        used += 1;
    }
    if used == 0 {
        bail!("no evaluable frames");
    }

    let mut text = format!("# mode {} frames {used}\n", net.mode());
    let order = [
        Category::Um,
        Category::Umm,
        Category::Uu,
        Category::Challenging,
    ]
    .map(|c| c.to_string())
    .into_iter()
    .chain(["urban".to_string(), "all".to_string()]);
    for name in order {
        let Some((confs, gts)) = groups.get(&name) else {
            continue;
        };
        let mut sweep = Sweep::new(ThresholdGrid::default())?;
        sweep.add_all(confs, gts)?;
        match sweep.finish().and_then(|c| EvalReport::from_curve(&c)) {
            Ok(r) => writeln!(text, "{name}\t{r}")?,
            Err(e) => writeln!(text, "{name}\tundefined: {e}")?,
        }
    }
    print!("{text}");
    if let Some(p) = &a.report {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("threshold {} outside [0, 1]", a.threshold);
    }
    let net = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = a.input.read()?;
    for id in &a.frames {
        if !manifest.records.iter().any(|r| &r.id == id) {
            bail!("frame {id} is not in the manifest");
        }
    }
    let ids = (0..manifest.records.len())
        .filter(|&i| a.frames.is_empty() || a.frames.contains(&manifest.records[i].id));
    let frames = load_frames(&manifest, ids, net.mode(), false)?;
    create_dir(&a.out)?;
    for (i, s) in frames {
        let rec = &manifest.records[i];
        let (h, w) = (s.labels.height(), s.labels.width());
        let conf = net.road_confidence(s.input())?.remove(0);
        let conf_path = a.out.join(format!("{}_confidence.png", s.id));
        let bin_path = a.out.join(format!("{}_binary.png", s.id));
        dataio::write_segmentation(&conf, w, h, &conf_path, Some((&bin_path, a.threshold)))?;
        let mut written = vec![conf_path, bin_path];
        if rec.gt.is_some() {
            match &rec.rgb {
                Some(p) => {
                    let rgb = dataio::read_rgb(&manifest.resolve(p))?;
                    let img = dataio::images::overlay(&rgb, &conf, &s.labels, a.threshold)?;
                    let path = a.out.join(format!("{}_overlay.png", s.id));
                    dataio::images::write_rgb(&path, &img)?;
                    written.push(path);
                }
                None => log::warn!("frame {}: no camera image to draw the overlay on", s.id),
            }
        }
        for p in written {
            println!("{}", p.display());
        }
    }
    Ok(())
}
