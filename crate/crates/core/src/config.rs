//! Run configuration files: `key = value` lines, `#` comments.
//!
//! Keys are the [`TrainConfig`] field names plus `width` (first-layer
//! feature maps), `num_classes` and `canvas` (`HxW` or `none`). A `preset`
//! key, if present, must come first and selects the starting values.

use std::path::Path;

use anyhow::{anyhow, bail, Context};

use crate::dataio::{CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub width: usize,
    pub num_classes: usize,
    pub canvas: Option<(usize, usize)>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self {
                train: TrainConfig::default(),
                width: 32,
                num_classes: 2,
                canvas: Some((CANVAS_HEIGHT, CANVAS_WIDTH)),
            }),
            "toy" => Some(Self {
                train: TrainConfig::toy(),
                width: 8,
                num_classes: 2,
                canvas: None,
            }),
            _ => None,
        }
    }

    /// A preset name or a config file path.
    pub fn load(spec: &str) -> anyhow::Result<Self> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let text = std::fs::read_to_string(Path::new(spec)).with_context(|| {
            format!("{spec} is neither a preset (default, toy) nor a readable file")
        })?;
        Self::parse(&text).with_context(|| format!("config {spec}"))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Self::preset("default").unwrap();
        let mut seen_setting = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            if key == "preset" {
                if seen_setting {
                    bail!("line {}: preset must precede other settings", i + 1);
                }
                cfg = Self::preset(value)
                    .ok_or_else(|| anyhow!("line {}: unknown preset {value}", i + 1))?;
                continue;
            }
            seen_setting = true;
            cfg.set(key, value)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<T> {
            v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
        }
        let t = &mut self.train;
        match key {
            "total_iterations" => t.total_iterations = num(key, value)?,
            "eval_every" => t.eval_every = num(key, value)?,
            "eta0" => t.eta0 = num(key, value)?,
            "alpha" => t.alpha = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "rotation_range_deg" => t.rotation_range_deg = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "canvas" => {
                self.canvas = if value == "none" {
                    None
                } else {
                    let (h, w) = value
                        .split_once('x')
                        .ok_or_else(|| anyhow!("canvas: expected HxW or none"))?;
                    Some((num(key, h)?, num(key, w)?))
                }
            }
            _ => bail!("unknown key {key}"),
        }
        Ok(())
    }
}
