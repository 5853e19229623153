//! Compression and task metrics: memory footprint, performance density,
//! PSNR, accuracy and gradient-spike detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bits assumed for tensors that are not quantized.
pub const FLOAT_BITS: u32 = 32;

/// Storage of one tensor: element count, bits per element and the fraction
/// of elements that are pruned away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintEntry {
    pub count: usize,
    pub bits: u32,
    pub sparsity: f64,
}

impl FootprintEntry {
    pub fn new(count: usize, bits: u32, sparsity: f64) -> Self {
        Self { count, bits, sparsity }
    }

    pub fn megabits(&self) -> f64 {
        self.count as f64 * self.bits as f64 * (1.0 - self.sparsity) / 1e6
    }
}

/// Weight and activation storage of a model. Activation counts are per
/// single input (no batch axis).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FootprintSpec {
    pub weights: Vec<FootprintEntry>,
    pub activations: Vec<FootprintEntry>,
}

impl FootprintSpec {
    pub fn validate(&self) -> Result<()> {
        for e in self.weights.iter().chain(&self.activations) {
            if e.bits == 0 || !(0.0..=1.0).contains(&e.sparsity) {
                return Err(Error::InvalidArgument(format!("invalid footprint entry {e:?}")));
            }
        }
        Ok(())
    }

    pub fn weights_mb(&self) -> f64 {
        self.weights.iter().map(FootprintEntry::megabits).sum()
    }

    pub fn activations_mb(&self) -> f64 {
        self.activations.iter().map(FootprintEntry::megabits).sum()
    }
}

/// Total footprint in megabits: `Σ count · bits · (1 − sparsity) / 10^6`.
pub fn memory_footprint(spec: &FootprintSpec) -> f64 {
    spec.weights_mb() + spec.activations_mb()
}

/// Task performance per megabit of footprint.
pub fn performance_density(perf: f64, footprint_mb: f64) -> Result<f64> {
    if footprint_mb.is_nan() || footprint_mb <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "footprint must be positive, got {footprint_mb}"
        )));
    }
    Ok(perf / footprint_mb)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, "mse operands", |x, y| x - y)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Percentage of rows of `[B, C]` logits whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::ShapeMismatch {
            context: "accuracy logits".into(),
            expected: vec![labels.len(), 0],
            actual: logits.shape().to_vec(),
        });
    };
    if batch != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "accuracy labels".into(),
            expected: vec![batch],
            actual: vec![labels.len()],
        });
    }
    let correct = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            best == label
        })
        .count();
    Ok(100.0 * correct as f64 / batch as f64)
}

/// Task metric reported alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    /// Classification accuracy in percent.
    Accuracy,
    /// PSNR in dB for signals with the given peak value.
    Psnr { peak: f64 },
}

/// Per-tensor scalars of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Feature,
}

impl TensorRole {
    pub fn tag(self) -> &'static str {
        match self {
            TensorRole::Weight => "w",
            TensorRole::Feature => "f",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub layer: usize,
    pub role: TensorRole,
    pub grad_norm: f64,
    pub sparsity: f64,
    pub decimal_bits: Option<i32>,
}

/// Scalars recorded after one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub metric: f64,
    pub tensors: Vec<TensorRecord>,
    pub footprint_mb: f64,
    pub performance_density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeVerdict {
    pub boundary: usize,
    pub peak: f64,
    pub baseline: f64,
    pub spike: bool,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For every boundary index `b`, flags a spike when
/// `max(series[b..b + post]) >= ratio * median(series[b - pre..b])`.
pub fn detect_gradient_spike(
    series: &[f64],
    boundaries: &[usize],
    pre_window: usize,
    post_window: usize,
    ratio: f64,
) -> Result<Vec<SpikeVerdict>> {
    if pre_window == 0 || post_window == 0 {
        return Err(Error::InvalidArgument("spike windows must be non-empty".into()));
    }
    boundaries
        .iter()
        .map(|&b| {
            if b < pre_window || b + post_window > series.len() {
                return Err(Error::InvalidArgument(format!(
                    "boundary {b} with windows ({pre_window}, {post_window}) exceeds series of length {}",
                    series.len()
                )));
            }
            let baseline = median(&series[b - pre_window..b]);
            let peak = series[b..b + post_window]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(SpikeVerdict {
                boundary: b,
                peak,
                baseline,
                spike: peak >= ratio * baseline,
            })
        })
        .collect()
}
