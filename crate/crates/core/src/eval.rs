//! Pixel-wise evaluation of road-confidence maps.
//!
//! A pixel is predicted road at threshold `t` when its confidence is `>= t`.
//! Ignored ground-truth pixels are excluded everywhere and counts from
//! several images are summed before any ratio is taken.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::LabelMap;

pub const DEFAULT_THRESHOLDS: usize = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("ground truth contains no road pixels, recall is undefined")]
    NoPositives,
    #[error("confidence map has {actual} values, ground truth has {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("confidence {value} at pixel {index} is outside [0, 1]")]
    Confidence { index: usize, value: f64 },
    #[error("need at least 2 thresholds, got {0}")]
    Thresholds(usize),
    #[error("F-measure is undefined at every threshold")]
    UndefinedF,
    #[error("empty precision-recall curve")]
    EmptyCurve,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; `None` when either is undefined
    /// or both are zero.
    pub fn f_measure(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

/// `(fp / (fp + tn), fn / (fn + tp))`, each `None` when its denominator is 0.
pub fn fpr_fnr(counts: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    (counts.fpr(), counts.fnr())
}

/// How thresholds are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdGrid {
    /// `n` evenly spaced thresholds from 0 to 1 inclusive.
    Uniform(usize),
    /// Every distinct confidence value seen.
    Distinct,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid::Uniform(DEFAULT_THRESHOLDS)
    }
}

pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

/// Confusion counts at ascending thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<ConfusionCounts>,
}

/// Accumulates images and produces a [`PrCurve`].
#[derive(Clone, Debug)]
pub struct Sweep {
    grid: ThresholdGrid,
    thresholds: Vec<f64>,
    /// `hist[k]`: pixels with exactly `k` thresholds at or below their confidence.
    pos: Vec<u64>,
    neg: Vec<u64>,
    exact: Vec<(f64, bool)>,
}

fn check_pair(conf: &[f64], gt: &LabelMap) -> Result<(), EvalError> {
    if conf.len() != gt.data().len() {
        return Err(EvalError::ShapeMismatch {
            expected: gt.data().len(),
            actual: conf.len(),
        });
    }
    if let Some((index, &value)) = conf
        .iter()
        .enumerate()
        .find(|(_, c)| !(0.0..=1.0).contains(*c))
    {
        return Err(EvalError::Confidence { index, value });
    }
    Ok(())
}

fn histogram(conf: &[f64], gt: &LabelMap, thresholds: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut pos = vec![0; thresholds.len() + 1];
    let mut neg = vec![0; thresholds.len() + 1];
    for (&c, &l) in conf.iter().zip(gt.data()) {
        if l == LabelMap::IGNORE {
            continue;
        }
        let k = thresholds.partition_point(|&t| t <= c);
        if l == LabelMap::ROAD {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    (pos, neg)
}

impl Sweep {
    pub fn new(grid: ThresholdGrid) -> Result<Self, EvalError> {
        let thresholds = match grid {
            ThresholdGrid::Uniform(n) if n < 2 => return Err(EvalError::Thresholds(n)),
            ThresholdGrid::Uniform(n) => uniform_thresholds(n),
            ThresholdGrid::Distinct => vec![],
        };
        let bins = thresholds.len() + 1;
        Ok(Self {
            grid,
            thresholds,
            pos: vec![0; bins],
            neg: vec![0; bins],
            exact: vec![],
        })
    }

    /// Adds one image: row-major road confidences and its label map.
    pub fn add(&mut self, conf: &[f64], gt: &LabelMap) -> Result<(), EvalError> {
        check_pair(conf, gt)?;
        if self.grid == ThresholdGrid::Distinct {
            self.exact.extend(
                conf.iter()
                    .zip(gt.data())
                    .filter(|(_, &l)| l != LabelMap::IGNORE)
                    .map(|(&c, &l)| (c, l == LabelMap::ROAD)),
            );
            return Ok(());
        }
        let (pos, neg) = histogram(conf, gt, &self.thresholds);
        self.merge(&pos, &neg);
        Ok(())
    }

    /// Adds many images, counting them in parallel.
    pub fn add_all(&mut self, confs: &[Vec<f64>], gts: &[LabelMap]) -> Result<(), EvalError> {
        if confs.len() != gts.len() {
            return Err(EvalError::ShapeMismatch {
                expected: gts.len(),
                actual: confs.len(),
            });
        }
        if self.grid == ThresholdGrid::Distinct {
            for (c, g) in confs.iter().zip(gts) {
                self.add(c, g)?;
            }
            return Ok(());
        }
        let thresholds = &self.thresholds;
        let hists = confs
            .par_iter()
            .zip(gts)
            .map(|(c, g)| {
                check_pair(c, g)?;
                Ok(histogram(c, g, thresholds))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        for (p, n) in hists {
            self.merge(&p, &n);
        }
        Ok(())
    }

    fn merge(&mut self, pos: &[u64], neg: &[u64]) {
        for (a, b) in self.pos.iter_mut().zip(pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(neg) {
            *a += b;
        }
    }

    pub fn finish(mut self) -> Result<PrCurve, EvalError> {
        if self.grid == ThresholdGrid::Distinct {
            let mut t: Vec<f64> = self.exact.iter().map(|e| e.0).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            self.pos = vec![0; t.len() + 1];
            self.neg = vec![0; t.len() + 1];
            for &(c, road) in &self.exact {
                let k = t.partition_point(|&x| x <= c);
                if road {
                    self.pos[k] += 1;
                } else {
                    self.neg[k] += 1;
                }
            }
            self.thresholds = t;
        }
        let total_pos: u64 = self.pos.iter().sum();
        let total_neg: u64 = self.neg.iter().sum();
        if total_pos == 0 {
            return Err(EvalError::NoPositives);
        }
        // a pixel in bin k is predicted road at thresholds 0..k
        let mut counts = Vec::with_capacity(self.thresholds.len());
        let (mut above_pos, mut above_neg) = (total_pos, total_neg);
        for j in 0..self.thresholds.len() {
            above_pos -= self.pos[j];
            above_neg -= self.neg[j];
            counts.push(ConfusionCounts {
                tp: above_pos,
                fp: above_neg,
                fn_: total_pos - above_pos,
                tn: total_neg - above_neg,
            });
        }
        Ok(PrCurve {
            thresholds: self.thresholds,
            counts,
        })
    }
}

/// Sweeps a set of images in one call.
pub fn sweep(
    confs: &[Vec<f64>],
    gts: &[LabelMap],
    grid: ThresholdGrid,
) -> Result<PrCurve, EvalError> {
    let mut s = Sweep::new(grid)?;
    s.add_all(confs, gts)?;
    s.finish()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxF {
    pub f: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub index: usize,
}

/// Best F-measure over the curve; ties go to the lower threshold.
pub fn max_f(curve: &PrCurve) -> Result<MaxF, EvalError> {
    if curve.counts.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let mut best: Option<MaxF> = None;
    for (index, c) in curve.counts.iter().enumerate() {
        let Some(f) = c.f_measure() else { continue };
        if best.is_none_or(|b| f > b.f) {
            best = Some(MaxF {
                f,
                precision: c.precision().unwrap_or(0.0),
                recall: c.recall().unwrap_or(0.0),
                threshold: curve.thresholds[index],
                index,
            });
        }
    }
    best.ok_or(EvalError::UndefinedF)
}

/// Mean over recall levels `0, 0.1, ..., 1` of the best precision reached at
/// or above that recall (0 when no threshold reaches it).
pub fn average_precision(curve: &PrCurve) -> Result<f64, EvalError> {
    if curve.counts.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let points: Vec<(f64, f64)> = curve
        .counts
        .iter()
        .filter_map(|c| Some((c.recall()?, c.precision()?)))
        .collect();
    let sum: f64 = (0..=10)
        .map(|k| {
            let level = k as f64 / 10.0;
            points
                .iter()
                .filter(|(r, _)| *r >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / 11.0)
}

/// Headline metrics at the MaxF threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub maxf: f64,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub threshold: f64,
    pub pixels: u64,
}

impl EvalReport {
    pub fn from_curve(curve: &PrCurve) -> Result<Self, EvalError> {
        let m = max_f(curve)?;
        let at = curve.counts[m.index];
        Ok(Self {
            maxf: m.f,
            precision: m.precision,
            recall: m.recall,
            ap: average_precision(curve)?,
            fpr: at.fpr(),
            fnr: at.fnr(),
            threshold: m.threshold,
            pixels: at.total(),
        })
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{:.4}", 100.0 * v))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "maxf={} ap={} pre={} rec={} fpr={} fnr={} threshold={:.6} pixels={}",
            pct(Some(self.maxf)),
            pct(Some(self.ap)),
            pct(Some(self.precision)),
            pct(Some(self.recall)),
            pct(self.fpr),
            pct(self.fnr),
            self.threshold,
            self.pixels
        )
    }
}
