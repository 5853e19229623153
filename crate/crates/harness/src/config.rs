//! Experiment configuration files.
//!
//! A config is a TOML document. Unknown keys are rejected, and every
//! semantic check reports the dotted path of the offending field together
//! with its line in the source when it can be found.
//!
//! ```toml
//! task = "toy_classify"
//! seed = 7
//! out = "runs/spiral"
//! steps = 3000
//! batch_size = 32
//! lr = 0.1
//!
//! [data]
//! n_samples = 1000
//! noise = 0.05
//!
//! [[layers]]
//! kind = "dense"
//! in_features = 2
//! out_features = 32
//!
//! [wraps.2.weight_prune]
//! final_sparsity = 0.5
//! start_step = 200
//! interval = 100
//! repetitions = 10
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use qprune::nn::{LayerSpec, LossKind};
use qprune::pipeline::{default_excluded, TrainPlan, WrapSpec};
use serde::{Deserialize, Serialize};

use crate::data::{gen_toy_classify, gen_toy_superres, Split};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ToyClassify,
    ToySuperres,
}

impl Task {
    pub fn default_loss(self) -> LossKind {
        match self {
            Task::ToyClassify => LossKind::SoftmaxXent,
            Task::ToySuperres => LossKind::Mse,
        }
    }
}

/// Dataset parameters. Spiral tasks read `n_samples` and `noise`; image
/// tasks read `n_images`, `size` and `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: Option<u64>,
    pub n_samples: usize,
    pub noise: f64,
    pub n_images: usize,
    pub size: usize,
    pub scale: usize,
    /// Subtracted from every model input after generation; targets are unchanged.
    pub input_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: None,
            n_samples: 1000,
            noise: 0.05,
            n_images: 64,
            size: 16,
            scale: 2,
            input_shift: 0.0,
        }
    }
}

/// Gradient-spike detection windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeConfig {
    pub pre_window: usize,
    pub post_window: usize,
    pub ratio: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            pre_window: 50,
            post_window: 5,
            ratio: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub loss: Option<LossKind>,
    /// Defaults to the first and last parameterised layers.
    #[serde(default)]
    pub excluded_layers: Option<BTreeSet<usize>>,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub spike: SpikeConfig,
    pub layers: Vec<LayerSpec>,
    /// Operators keyed by layer index.
    #[serde(default)]
    pub wraps: BTreeMap<String, WrapSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_batch() -> usize {
    16
}

/// Distance between weight and feature quantization starts when the
/// feature start is not given: 1% of the run, at least one step.
pub fn feature_quantize_stagger(steps: u64) -> u64 {
    steps.div_ceil(100).max(1)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.apply_stagger_defaults(&table);
        cfg.validate().map_err(|e| locate(e, text))?;
        Ok(cfg)
    }

    /// Fills in omitted quantization start steps: weights start at 0 and
    /// features one stagger after the weights of the same layer.
    fn apply_stagger_defaults(&mut self, table: &toml::Table) {
        let stagger = feature_quantize_stagger(self.steps);
        for (key, wrap) in self.wraps.iter_mut() {
            let given = |tensor: &str| {
                table
                    .get("wraps")
                    .and_then(|w| w.get(key))
                    .and_then(|w| w.get(tensor))
                    .is_some_and(|q| q.get("quantize_step").is_some())
            };
            let weight_start = wrap.weight_quantize.as_ref().map_or(0, |q| q.quantize_step);
            if let Some(fq) = wrap.feature_quantize.as_mut() {
                if !given("feature_quantize") {
                    fq.quantize_step = weight_start + stagger;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, message: String| HarnessError::Config {
            field: name.to_string(),
            line: None,
            message,
        };
        if self.steps == 0 {
            return Err(field("steps", "must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(field("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.layers.is_empty() {
            return Err(field("layers", "at least one layer is required".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| field(&format!("layers.{i}"), e.to_string()))?;
        }
        let d = &self.data;
        match self.task {
            Task::ToyClassify => {
                if d.n_samples < 4 {
                    return Err(field("data.n_samples", format!("must be >= 4, got {}", d.n_samples)));
                }
                if !(d.noise.is_finite() && d.noise >= 0.0) {
                    return Err(field("data.noise", format!("must be >= 0, got {}", d.noise)));
                }
            }
            Task::ToySuperres => {
                if d.n_images < 3 {
                    return Err(field("data.n_images", format!("must be >= 3, got {}", d.n_images)));
                }
                if d.scale == 0 {
                    return Err(field("data.scale", "must be >= 1".into()));
                }
                if d.size == 0 || !d.size.is_multiple_of(d.scale) {
                    return Err(field(
                        "data.size",
                        format!("{} is not divisible by scale {}", d.size, d.scale),
                    ));
                }
            }
        }
        if !d.input_shift.is_finite() {
            return Err(field("data.input_shift", format!("must be finite, got {}", d.input_shift)));
        }
        let s = &self.spike;
        if s.pre_window == 0 {
            return Err(field("spike.pre_window", "must be >= 1".into()));
        }
        if s.post_window == 0 {
            return Err(field("spike.post_window", "must be >= 1".into()));
        }
        if !(s.ratio.is_finite() && s.ratio >= 0.0) {
            return Err(field("spike.ratio", format!("must be >= 0, got {}", s.ratio)));
        }
        let excluded = self.excluded();
        if let Some(&i) = excluded.iter().find(|&&i| i >= self.layers.len()) {
            return Err(field("excluded_layers", format!("layer {i} does not exist")));
        }
        for (key, wrap) in &self.wraps {
            let path = format!("wraps.{key}");
            let i: usize = key
                .parse()
                .map_err(|_| field(&path, "key must be a layer index".into()))?;
            let Some(layer) = self.layers.get(i) else {
                return Err(field(&path, format!("layer {i} does not exist")));
            };
            if !layer.has_params() {
                return Err(field(&path, format!("layer {i} ({}) has no weights to wrap", layer.name())));
            }
            if excluded.contains(&i) && !wrap.is_empty() {
                return Err(field(&path, format!("layer {i} is excluded")));
            }
            for (name, p) in [("weight_prune", &wrap.weight_prune), ("feature_prune", &wrap.feature_prune)] {
                if let Some(p) = p {
                    p.validate().map_err(|e| field(&format!("{path}.{name}"), e.to_string()))?;
                }
            }
            for (name, q) in [("weight_quantize", &wrap.weight_quantize), ("feature_quantize", &wrap.feature_quantize)] {
                if let Some(q) = q {
                    q.validate().map_err(|e| field(&format!("{path}.{name}"), e.to_string()))?;
                }
            }
        }
        self.plan().validate().map_err(|e| field("layers", e.to_string()))?;
        Ok(())
    }

    pub fn excluded(&self) -> BTreeSet<usize> {
        self.excluded_layers.clone().unwrap_or_else(|| default_excluded(&self.layers))
    }

    pub fn plan(&self) -> TrainPlan {
        let mut plan = TrainPlan::new(self.layers.clone(), self.loss.unwrap_or(self.task.default_loss()));
        plan.excluded_layers = self.excluded();
        for (key, wrap) in &self.wraps {
            if let Some(slot) = key.parse::<usize>().ok().and_then(|i| plan.wraps.get_mut(i)) {
                *slot = wrap.clone();
            }
        }
        plan.steps = self.steps;
        plan.batch_size = self.batch_size;
        plan.lr = self.lr;
        plan.seed = self.seed;
        plan
    }

    /// Seed of the synthetic dataset; the run seed unless overridden.
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn dataset(&self) -> Result<Split> {
        let d = &self.data;
        let mut split = match self.task {
            Task::ToyClassify => gen_toy_classify(self.data_seed(), d.n_samples, d.noise)?,
            Task::ToySuperres => gen_toy_superres(self.data_seed(), d.n_images, d.size, d.scale)?,
        };
        if d.input_shift != 0.0 {
            for set in [&mut split.train, &mut split.eval] {
                set.inputs = set.inputs.map(|v| v - d.input_shift);
            }
        }
        Ok(split)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Parse(e.to_string()))
    }
}

/// Attaches the source line of the field named in a config error.
fn locate(err: HarnessError, text: &str) -> HarnessError {
    match err {
        HarnessError::Config { field, message, .. } => {
            let line = find_line(text, &field);
            HarnessError::Config { field, line, message }
        }
        other => other,
    }
}

/// Line of the deepest table header or key matching a prefix of `field`.
fn find_line(text: &str, field: &str) -> Option<usize> {
    let target: Vec<&str> = field.split('.').collect();
    let mut table: Vec<String> = Vec::new();
    let mut arrays: BTreeMap<String, usize> = BTreeMap::new();
    let mut best: Option<(usize, usize)> = None;
    let mut consider = |path: &[String], line: usize| {
        let depth = path.iter().zip(&target).take_while(|(a, b)| a.as_str() == **b).count();
        if depth == path.len() && depth > 0 && best.is_none_or(|(d, _)| depth > d) {
            best = Some((depth, line));
        }
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            let name = unquote_path(name);
            let key = name.join(".");
            let idx = arrays.entry(key).and_modify(|i| *i += 1).or_insert(0);
            table = name;
            table.push(idx.to_string());
            consider(&table, n + 1);
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            table = unquote_path(name);
            consider(&table, n + 1);
        } else if let Some((key, _)) = line.split_once('=') {
            if line.starts_with('#') {
                continue;
            }
            let mut path = table.clone();
            path.extend(unquote_path(key));
            consider(&path, n + 1);
        }
    }
    best.map(|(_, line)| line)
}

fn unquote_path(s: &str) -> Vec<String> {
    s.split('.')
        .map(|p| p.trim().trim_matches('"').trim_matches('\'').to_string())
        .collect()
}
