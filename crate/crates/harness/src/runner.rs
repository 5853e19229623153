//! Single training runs: metrics stream, summary and checkpoints.

use std::path::{Path, PathBuf};

use qprune::metrics::{detect_gradient_spike, performance_density, MetricsRecord, TaskMetric};
use qprune::pipeline::{derive_order, Trainer};
use qprune::prune::PruneState;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One row of `metrics.csv`: a single tensor of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub metric: f64,
    /// `<layer>/w` for a weight, `<layer>/f` for a feature.
    pub layer_id: String,
    pub grad_norm: f64,
    pub sparsity: f64,
    pub d_bits: Option<i32>,
    pub footprint_mb: f64,
    pub pd: f64,
}

pub fn rows_of(rec: &MetricsRecord) -> impl Iterator<Item = MetricsRow> + '_ {
    rec.tensors.iter().map(move |t| MetricsRow {
        step: rec.step,
        loss: rec.loss,
        metric: rec.metric,
        layer_id: format!("{}/{}", t.layer, t.role.tag()),
        grad_norm: t.grad_norm,
        sparsity: t.sparsity,
        d_bits: t.decimal_bits,
        footprint_mb: rec.footprint_mb,
        pd: rec.performance_density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintSummary {
    pub weights_mb: f64,
    pub activations_mb: f64,
    pub total_mb: f64,
}

/// Sparsity reached by one pruned tensor, counted from its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub layer: usize,
    pub tensor: String,
    pub target: f64,
    pub achieved: f64,
    pub zeros: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEntry {
    pub layer: usize,
    pub step: u64,
    pub peak: f64,
    pub baseline: f64,
    pub spike: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub seed: u64,
    pub steps: u64,
    /// Temporal order of the operators; absent unless both families are configured.
    pub order: Option<String>,
    pub metric_name: String,
    /// Task metric on the evaluation split.
    pub final_metric: f64,
    pub final_loss: f64,
    pub footprint: FootprintSummary,
    pub performance_density: f64,
    pub achieved_sparsity: Vec<SparsityEntry>,
    pub spikes: Vec<SpikeEntry>,
}

/// Controls for [`run_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory if one exists.
    pub resume: bool,
    /// Stop after this many steps, leaving a checkpoint behind.
    pub stop_at: Option<u64>,
}

/// Runs `cfg` from scratch, writing outputs under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    run_with(cfg, RunOptions::default()).map(|s| s.expect("runs to completion"))
}

/// Runs `cfg`; returns `None` when stopped early by `opts.stop_at`.
pub fn run_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Option<Summary>> {
    cfg.validate()?;
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let split = cfg.dataset()?;
    let plan = cfg.plan();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let (mut trainer, mut rows) = if opts.resume && ckpt_path.exists() {
        let trainer = Checkpoint::load(&ckpt_path)?.restore(&plan)?;
        let step = trainer.step();
        let rows: Vec<MetricsRow> = read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= step).collect();
        (trainer, rows)
    } else {
        (Trainer::new(plan)?, Vec::new())
    };

    let mut last_loss = rows.last().map_or(f64::NAN, |r| r.loss);
    while !trainer.is_done() {
        if opts.stop_at.is_some_and(|s| trainer.step() >= s) {
            save_state(&trainer, &rows, out)?;
            return Ok(None);
        }
        let rec = trainer.train_step(&split.train)?;
        last_loss = rec.loss;
        rows.extend(rows_of(&rec));
        let step = trainer.step();
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !trainer.is_done() {
            save_state(&trainer, &rows, out)?;
        }
    }
    save_state(&trainer, &rows, out)?;

    let summary = summarize(cfg, &mut trainer, &split.eval, &rows, last_loss)?;
    write_atomic(&out.join(SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(Some(summary))
}

fn save_state(trainer: &Trainer, rows: &[MetricsRow], out: &Path) -> Result<()> {
    write_metrics(&out.join(METRICS_FILE), rows)?;
    Checkpoint::capture(trainer).save(&out.join(CHECKPOINT_FILE))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

/// Evaluation-split metric and footprint of a trainer's current model.
pub fn evaluate(
    trainer: &mut Trainer,
    eval: &qprune::pipeline::Dataset,
) -> Result<(f64, FootprintSummary, f64)> {
    let metric = trainer.evaluate(eval)?;
    let fp = trainer.model().footprint(eval.sample_shape())?;
    let footprint = FootprintSummary {
        weights_mb: fp.weights_mb(),
        activations_mb: fp.activations_mb(),
        total_mb: fp.weights_mb() + fp.activations_mb(),
    };
    let pd = performance_density(metric, footprint.total_mb)?;
    Ok((metric, footprint, pd))
}

fn summarize(
    cfg: &ExperimentConfig,
    trainer: &mut Trainer,
    eval: &qprune::pipeline::Dataset,
    rows: &[MetricsRow],
    final_loss: f64,
) -> Result<Summary> {
    let (final_metric, footprint, performance_density) = evaluate(trainer, eval)?;
    let plan = trainer.plan();
    let order = derive_order(plan).ok().map(|o| o.to_string());
    let metric_name = match plan.task_metric() {
        TaskMetric::Accuracy => "accuracy",
        TaskMetric::Psnr { .. } => "psnr",
    }
    .to_string();

    let mut achieved_sparsity = Vec::new();
    for (layer, ops) in trainer.model().operators().iter().enumerate() {
        for (tensor, p) in [("weight", &ops.weight_prune), ("feature", &ops.feature_prune)] {
            if let Some(p) = p {
                achieved_sparsity.push(sparsity_entry(layer, tensor, p));
            }
        }
    }

    let mut spikes = Vec::new();
    for (layer, wrap) in plan.wraps.iter().enumerate() {
        let Some(p) = &wrap.feature_prune else { continue };
        let id = format!("{layer}/f");
        let series: Vec<f64> = rows.iter().filter(|r| r.layer_id == id).map(|r| r.grad_norm).collect();
        // A record of step t sits at series index t - 1.
        let s = &cfg.spike;
        let boundaries: Vec<usize> = (1..=p.repetitions)
            .map(|k| (p.start_step + k * p.interval) as usize)
            .filter(|&t| t > s.pre_window && t - 1 + s.post_window <= series.len())
            .map(|t| t - 1)
            .collect();
        for v in detect_gradient_spike(&series, &boundaries, s.pre_window, s.post_window, s.ratio)? {
            spikes.push(SpikeEntry {
                layer,
                step: v.boundary as u64 + 1,
                peak: v.peak,
                baseline: v.baseline,
                spike: v.spike,
            });
        }
    }

    Ok(Summary {
        task: cfg.task,
        seed: cfg.seed,
        steps: trainer.step(),
        order,
        metric_name,
        final_metric,
        final_loss,
        footprint,
        performance_density,
        achieved_sparsity,
        spikes,
    })
}

fn sparsity_entry(layer: usize, tensor: &str, p: &PruneState) -> SparsityEntry {
    let (zeros, count) = p.mask().map_or((0, 0), |m| (m.count_zeros(), m.len()));
    SparsityEntry {
        layer,
        tensor: tensor.to_string(),
        target: p.config().final_sparsity,
        achieved: p.mask_sparsity(),
        zeros,
        count,
    }
}

/// Output directory of a run with `cfg` overridden by CLI flags.
pub fn with_overrides(mut cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> ExperimentConfig {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out = out;
    }
    cfg
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
