//! Gradual magnitude pruning with a cubic sparsity schedule.
//!
//! Each call to [`PruneState::step`] pushes the magnitudes of its input into a
//! sliding window. Whenever the scheduled sparsity changes, the mask is
//! recomputed from the window's running sum by zeroing exactly
//! `round(s * M)` entries with the smallest scores; between schedule
//! boundaries the mask is held fixed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{select_k_smallest_magnitude, Tensor};

/// Granularity of the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Unstructured,
    /// Whole slices along `channel_axis` are kept or dropped together.
    Channelwise,
}

fn default_gamma() -> f64 {
    3.0
}

fn default_one() -> u64 {
    1
}

/// Default sliding-window length for weight pruners.
pub const DEFAULT_WEIGHT_WINDOW: usize = 1;
/// Default sliding-window length for feature pruners.
pub const DEFAULT_FEATURE_WINDOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Target sparsity `s_f`.
    pub final_sparsity: f64,
    /// First step of the schedule `t_0`.
    #[serde(default)]
    pub start_step: u64,
    /// Steps between pruning boundaries.
    #[serde(default = "default_one")]
    pub interval: u64,
    /// Number of pruning repetitions `n`.
    #[serde(default = "default_one")]
    pub repetitions: u64,
    /// Sliding-window length; unset picks the weight or feature default.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub mode: PruneMode,
    /// Channel axis within a single sample (features) or the weight tensor.
    #[serde(default)]
    pub channel_axis: usize,
}

impl PruneConfig {
    pub fn new(final_sparsity: f64, start_step: u64, interval: u64, repetitions: u64) -> Self {
        Self {
            final_sparsity,
            start_step,
            interval,
            repetitions,
            window: None,
            gamma: default_gamma(),
            mode: PruneMode::Unstructured,
            channel_axis: 0,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn channelwise(mut self, axis: usize) -> Self {
        self.mode = PruneMode::Channelwise;
        self.channel_axis = axis;
        self
    }

    /// Step at which the final sparsity is reached, `t_0 + n * Δt`.
    pub fn end_step(&self) -> u64 {
        self.start_step + self.repetitions * self.interval
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.final_sparsity) {
            return Err(Error::Config(format!(
                "final_sparsity must be in [0, 1], got {}",
                self.final_sparsity
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("interval must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Scheduled sparsity at step `t`: `s_f * (1 - (1 - i/n)^gamma)` with
/// `i = clamp(floor((t - t_0) / Δt), 0, n)`, and 0 before `t_0`.
pub fn sparsity_at(t: u64, cfg: &PruneConfig) -> f64 {
    if t < cfg.start_step || cfg.interval == 0 || cfg.repetitions == 0 {
        return 0.0;
    }
    let i = ((t - cfg.start_step) / cfg.interval).min(cfg.repetitions);
    let remaining = 1.0 - i as f64 / cfg.repetitions as f64;
    let decay = if cfg.gamma.fract() == 0.0 && cfg.gamma <= i32::MAX as f64 {
        remaining.powi(cfg.gamma as i32)
    } else {
        remaining.powf(cfg.gamma)
    };
    cfg.final_sparsity * (1.0 - decay)
}

/// Number of entries zeroed for sparsity `s` over `m` entries (half-up rounding).
pub fn pruned_count(s: f64, m: usize) -> usize {
    ((s * m as f64).round() as usize).min(m)
}

/// Binary mask zeroing the `round(s * M)` smallest-magnitude scores.
pub fn compute_mask(scores: &Tensor, s: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity {s} outside [0, 1]")));
    }
    let k = pruned_count(s, scores.len());
    let mut mask = Tensor::ones(scores.shape());
    let data = mask.data_mut();
    for i in select_k_smallest_magnitude(scores, k)? {
        data[i] = 0.0;
    }
    Ok(mask)
}

/// `upstream ⊙ mask`, the derivative of `x ⊙ mask`.
pub fn prune_backward(upstream: &Tensor, mask: &Tensor) -> Result<Tensor> {
    upstream.zip_map(mask, "prune backward mask", |g, m| g * m)
}

/// Ring of the most recent score tensors and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreWindow {
    capacity: usize,
    entries: VecDeque<Tensor>,
    sum: Option<Tensor>,
}

impl ScoreWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity),
            sum: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn running_sum(&self) -> Option<&Tensor> {
        self.sum.as_ref()
    }

    /// Appends `scores`, evicting the oldest entry when full. Shape checks are
    /// the caller's job.
    pub fn push(&mut self, scores: Tensor) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(scores);
        // Re-summed oldest to newest so the sum never drifts from its entries.
        let mut iter = self.entries.iter();
        let mut sum = iter.next().cloned().expect("window is non-empty after push");
        for e in iter {
            sum.add_assign(e).expect("window entries share one shape");
        }
        self.sum = Some(sum);
    }
}

/// Serializable view of a [`PruneState`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSnapshot {
    pub step: u64,
    pub sparsity: f64,
    pub mask: Option<Tensor>,
    pub window: Vec<Tensor>,
    pub running_sum: Option<Tensor>,
}

/// Pruning operator state for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    config: PruneConfig,
    batched: bool,
    step: u64,
    sparsity: f64,
    mask: Option<Tensor>,
    window: ScoreWindow,
}

impl PruneState {
    /// Pruner for a parameter tensor (no batch axis, window default 1).
    pub fn for_weights(config: PruneConfig) -> Result<Self> {
        Self::new(config, false)
    }

    /// Pruner for batched features: axis 0 is the batch and one mask is shared
    /// by every sample (window default 16).
    pub fn for_features(config: PruneConfig) -> Result<Self> {
        Self::new(config, true)
    }

    fn new(config: PruneConfig, batched: bool) -> Result<Self> {
        config.validate()?;
        let default = if batched {
            DEFAULT_FEATURE_WINDOW
        } else {
            DEFAULT_WEIGHT_WINDOW
        };
        let window = ScoreWindow::new(config.window.unwrap_or(default));
        Ok(Self {
            config,
            batched,
            step: 0,
            sparsity: 0.0,
            mask: None,
            window,
        })
    }

    pub fn restore(config: PruneConfig, batched: bool, snap: PruneSnapshot) -> Result<Self> {
        let mut state = Self::new(config, batched)?;
        if snap.window.len() > state.window.capacity() {
            return Err(Error::Config(format!(
                "{} window entries exceed capacity {}",
                snap.window.len(),
                state.window.capacity()
            )));
        }
        if let Some(first) = snap.window.first() {
            if snap.window.iter().any(|e| e.shape() != first.shape()) {
                return Err(Error::Config("window entries differ in shape".into()));
            }
        }
        for e in snap.window {
            state.window.push(e);
        }
        if state.window.running_sum() != snap.running_sum.as_ref() {
            return Err(Error::Config("stored running sum disagrees with window entries".into()));
        }
        if let Some(mask) = &snap.mask {
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config("mask is not binary".into()));
            }
        }
        state.step = snap.step;
        state.sparsity = snap.sparsity;
        state.mask = snap.mask;
        Ok(state)
    }

    pub fn snapshot(&self) -> PruneSnapshot {
        PruneSnapshot {
            step: self.step,
            sparsity: self.sparsity,
            mask: self.mask.clone(),
            window: self.window.entries().cloned().collect(),
            running_sum: self.window.running_sum().cloned(),
        }
    }

    pub fn config(&self) -> &PruneConfig {
        &self.config
    }

    pub fn is_batched(&self) -> bool {
        self.batched
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Current scheduled sparsity `s_t`.
    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    /// Mask over scores: per element of one sample (or the whole weight) in
    /// unstructured mode, per channel in channelwise mode.
    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn window(&self) -> &ScoreWindow {
        &self.window
    }

    /// Fraction of zeros in the current mask (0 when unset).
    pub fn mask_sparsity(&self) -> f64 {
        self.mask
            .as_ref()
            .map_or(0.0, |m| m.count_zeros() as f64 / m.len() as f64)
    }

    /// Shape of one unit the mask covers: the sample shape for features or the
    /// whole tensor for weights.
    fn unit_shape<'a>(&self, x: &'a Tensor) -> Result<&'a [usize]> {
        if self.batched {
            if x.shape().len() < 2 {
                return Err(Error::ShapeMismatch {
                    context: "feature pruner input (batch axis required)".into(),
                    expected: vec![0, 0],
                    actual: x.shape().to_vec(),
                });
            }
            Ok(&x.shape()[1..])
        } else {
            Ok(x.shape())
        }
    }

    /// Channel count and the stride of one channel slice within a unit.
    fn channel_layout(&self, unit: &[usize]) -> Result<(usize, usize)> {
        let axis = self.config.channel_axis;
        if axis >= unit.len() {
            return Err(Error::InvalidArgument(format!(
                "channel axis {axis} out of range for shape {unit:?}"
            )));
        }
        Ok((unit[axis], unit[axis + 1..].iter().product()))
    }

    /// Magnitude scores of `x` as they enter the window.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let unit = self.unit_shape(x)?.to_vec();
        let unit_len: usize = unit.iter().product();
        let batch = x.len() / unit_len;
        match self.config.mode {
            PruneMode::Unstructured => {
                let mut acc = vec![0.0; unit_len];
                for sample in x.data().chunks_exact(unit_len) {
                    for (a, v) in acc.iter_mut().zip(sample) {
                        *a += v.abs();
                    }
                }
                if batch > 1 {
                    acc.iter_mut().for_each(|a| *a /= batch as f64);
                }
                Ok(Tensor::from_raw(unit, acc))
            }
            PruneMode::Channelwise => {
                let (channels, inner) = self.channel_layout(&unit)?;
                let mut acc = vec![0.0; channels];
                for (j, v) in x.data().iter().enumerate() {
                    acc[(j % unit_len / inner) % channels] += v.abs();
                }
                let per_channel = (x.len() / channels) as f64;
                acc.iter_mut().for_each(|a| *a /= per_channel);
                Ok(Tensor::from_raw(vec![channels], acc))
            }
        }
    }

    /// Pushes the magnitudes of `x` into the sliding window.
    pub fn window_push(&mut self, x: &Tensor) -> Result<()> {
        let scores = self.scores(x)?;
        if let Some(prev) = self.window.running_sum() {
            if prev.shape() != scores.shape() {
                return Err(match self.config.mode {
                    PruneMode::Unstructured => Error::VaryingFeatureShape {
                        expected: prev.shape().to_vec(),
                        actual: scores.shape().to_vec(),
                    },
                    PruneMode::Channelwise => Error::ShapeMismatch {
                        context: "channel extent".into(),
                        expected: prev.shape().to_vec(),
                        actual: scores.shape().to_vec(),
                    },
                });
            }
        }
        self.window.push(scores);
        Ok(())
    }

    /// Advances one step: push to the window, update the schedule, recompute
    /// the mask when the scheduled sparsity changed, and return `x ⊙ m`.
    pub fn step(&mut self, x: &Tensor) -> Result<Tensor> {
        self.window_push(x)?;
        self.step += 1;
        let s = sparsity_at(self.step, &self.config);
        if s != self.sparsity {
            let sum = self.window.running_sum().expect("window holds the pushed scores");
            self.mask = Some(compute_mask(sum, s)?);
            self.sparsity = s;
        }
        self.apply(x)
    }

    /// `x ⊙ m` with the current mask, without advancing the schedule.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(x.clone()),
            Some(mask) => self.broadcast(x, mask),
        }
    }

    /// Gradient with respect to the operator input.
    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        self.apply(upstream)
    }

    /// Mask expanded to the full shape of `x`.
    pub fn expanded_mask(&self, x: &Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(Tensor::ones(x.shape())),
            Some(mask) => self.broadcast(&Tensor::ones(x.shape()), mask),
        }
    }

    fn broadcast(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let unit = self.unit_shape(x)?.to_vec();
        let unit_len: usize = unit.iter().product();
        let m = mask.data();
        let mut out = x.clone();
        match self.config.mode {
            PruneMode::Unstructured => {
                if mask.shape() != unit.as_slice() {
                    return Err(if self.batched {
                        Error::VaryingFeatureShape {
                            expected: mask.shape().to_vec(),
                            actual: unit,
                        }
                    } else {
                        Error::ShapeMismatch {
                            context: "pruned weight".into(),
                            expected: mask.shape().to_vec(),
                            actual: unit,
                        }
                    });
                }
                for sample in out.data_mut().chunks_exact_mut(unit_len) {
                    for (v, &keep) in sample.iter_mut().zip(m) {
                        *v *= keep;
                    }
                }
            }
            PruneMode::Channelwise => {
                let (channels, inner) = self.channel_layout(&unit)?;
                if channels != mask.len() {
                    return Err(Error::ShapeMismatch {
                        context: "channel extent".into(),
                        expected: mask.shape().to_vec(),
                        actual: vec![channels],
                    });
                }
                for (j, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= m[(j % unit_len / inner) % channels];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v).unwrap()
    }

    #[test]
    fn sparsity_schedule_points() {
        let cfg = PruneConfig::new(0.5, 10, 5, 4);
        assert_eq!(sparsity_at(0, &cfg), 0.0);
        assert_eq!(sparsity_at(9, &cfg), 0.0);
        assert_eq!(sparsity_at(10, &cfg), 0.0);
        assert_eq!(sparsity_at(15, &cfg), 0.2890625);
        assert_eq!(sparsity_at(19, &cfg), 0.2890625);
        assert_eq!(sparsity_at(20, &cfg), 0.4375);
        assert_eq!(sparsity_at(25, &cfg), 0.4921875);
        assert_eq!(sparsity_at(30, &cfg), 0.5);
        assert_eq!(sparsity_at(10_000, &cfg), 0.5);
        assert_eq!(cfg.end_step(), 30);
    }

    #[test]
    fn non_integer_gamma() {
        let mut cfg = PruneConfig::new(0.8, 0, 1, 2);
        cfg.gamma = 1.5;
        let expected = 0.8 * (1.0 - 0.5f64.powf(1.5));
        assert_eq!(sparsity_at(1, &cfg), expected);
        assert_eq!(sparsity_at(2, &cfg), 0.8);
    }

    #[test]
    fn mask_examples() {
        let scores = t(&[0.1, -0.5, 0.3, 0.05]);
        assert_eq!(compute_mask(&scores, 0.5).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(compute_mask(&scores, 0.0).unwrap().data(), &[1.0; 4]);
        assert_eq!(compute_mask(&scores, 1.0).unwrap().data(), &[0.0; 4]);
        assert!(compute_mask(&scores, 1.5).is_err());
        // round half up: 0.125 * 4 = 0.5 -> 1 zero
        assert_eq!(compute_mask(&scores, 0.125).unwrap().count_zeros(), 1);
    }

    #[test]
    fn backward_examples() {
        let g = t(&[3.0, 7.0]);
        assert_eq!(prune_backward(&g, &t(&[1.0, 1.0])).unwrap(), g);
        assert_eq!(prune_backward(&g, &t(&[0.0, 0.0])).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(prune_backward(&g, &t(&[1.0, 0.0])).unwrap().data(), &[3.0, 0.0]);
        assert!(prune_backward(&g, &t(&[1.0])).is_err());
    }

    #[test]
    fn window_examples() {
        let mut p = PruneState::for_weights(PruneConfig::new(0.5, 100, 1, 1).with_window(2)).unwrap();
        p.window_push(&t(&[1.0, 3.0])).unwrap();
        assert_eq!(p.window().running_sum().unwrap().data(), &[1.0, 3.0]);
        p.window_push(&t(&[5.0, -1.0])).unwrap();
        assert_eq!(p.window().running_sum().unwrap().data(), &[6.0, 4.0]);
        p.window_push(&t(&[0.5, 0.5])).unwrap();
        assert_eq!(p.window().running_sum().unwrap().data(), &[5.5, 1.5]);

        let mut one = PruneState::for_weights(PruneConfig::new(0.5, 100, 1, 1)).unwrap();
        for v in [[1.0, -2.0], [4.0, 0.5], [-0.25, 8.0]] {
            one.window_push(&t(&v)).unwrap();
            assert_eq!(one.window().running_sum().unwrap(), &t(&v).map(f64::abs));
        }
    }

    #[test]
    fn varying_feature_shape_is_rejected() {
        let mut p = PruneState::for_features(PruneConfig::new(0.5, 0, 1, 1)).unwrap();
        p.step(&Tensor::ones(&[2, 3, 4])).unwrap();
        let err = p.step(&Tensor::ones(&[2, 3, 5])).unwrap_err();
        assert!(err.to_string().contains("use channelwise mode"), "{err}");
        // the batch size itself may vary
        p.step(&Tensor::ones(&[7, 3, 4])).unwrap();

        let mut c = PruneState::for_features(PruneConfig::new(0.5, 0, 1, 1).channelwise(0)).unwrap();
        c.step(&Tensor::ones(&[2, 3, 4, 4])).unwrap();
        c.step(&Tensor::ones(&[2, 3, 6, 5])).unwrap();
        assert!(c.step(&Tensor::ones(&[2, 4, 4, 4])).is_err());
    }

    #[test]
    fn step_before_start_is_identity() {
        let mut p = PruneState::for_weights(PruneConfig::new(0.5, 10, 2, 2)).unwrap();
        let x = t(&[0.3, -0.1, 0.7, 0.05]);
        for _ in 0..9 {
            assert_eq!(p.step(&x).unwrap(), x);
            assert!(p.mask().is_none());
        }
    }

    #[test]
    fn mask_is_held_between_boundaries_and_reaches_target() {
        let cfg = PruneConfig::new(0.5, 2, 3, 2);
        let mut p = PruneState::for_weights(cfg).unwrap();
        let mut masks = Vec::new();
        for step in 1..=12u64 {
            // magnitudes shift every step so a recomputed mask would differ
            let x: Vec<f64> = (0..10).map(|i| (i as f64 + step as f64 * 0.7).sin()).collect();
            let y = p.step(&t(&x)).unwrap();
            masks.push(p.mask().cloned());
            if let Some(m) = p.mask() {
                assert_eq!(m.count_zeros(), pruned_count(p.sparsity(), 10));
                for (yv, mv) in y.data().iter().zip(m.data()) {
                    if *mv == 0.0 {
                        assert_eq!(*yv, 0.0);
                    }
                }
            }
        }
        // boundaries at steps 5 and 8; masks fixed on 5..=7 and from 8 on
        assert_eq!(masks[4], masks[5]);
        assert_eq!(masks[5], masks[6]);
        assert_ne!(masks[6], masks[7]);
        assert!(masks[7..].iter().all(|m| m == &masks[7]));
        assert_eq!(p.sparsity(), 0.5);
        assert_eq!(p.mask().unwrap().count_zeros(), 5);
    }

    #[test]
    fn masked_positions_may_reactivate() {
        // T = 1 so each boundary sees only the newest magnitudes
        let cfg = PruneConfig::new(0.5, 1, 1, 2);
        let mut p = PruneState::for_weights(cfg).unwrap();
        p.step(&t(&[1.0, 1.0, 1.0, 1.0])).unwrap(); // s = 0
        p.step(&t(&[0.1, 2.0, 3.0, 4.0])).unwrap(); // s = 0.4375 -> 2 zeros
        assert_eq!(p.mask().unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        p.step(&t(&[9.0, 2.0, 0.5, 4.0])).unwrap(); // s = 0.5 -> 2 zeros
        let m = p.mask().unwrap();
        assert_eq!(m.data()[0], 1.0, "index 0 became the largest score");
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn feature_mask_shared_across_batch() {
        let mut p = PruneState::for_features(PruneConfig::new(0.5, 0, 1, 1).with_window(1)).unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, 0.1, 3.0, 0.2, 2.0, 0.3, 1.0, 0.1]).unwrap();
        p.step(&x).unwrap();
        let y = p.step(&x).unwrap();
        assert_eq!(p.mask().unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(y.data(), &[1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn channelwise_mask_is_constant_per_channel() {
        let cfg = PruneConfig::new(0.5, 0, 1, 1).channelwise(0).with_window(1);
        let mut p = PruneState::for_features(cfg).unwrap();
        let data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let x = Tensor::new(vec![2, 4, 3, 3], data).unwrap();
        p.step(&x).unwrap();
        let y = p.step(&x).unwrap();
        let mask = p.mask().unwrap();
        assert_eq!(mask.shape(), &[4]);
        assert_eq!(mask.count_zeros(), 2);
        for (j, v) in y.data().iter().enumerate() {
            let c = (j / 9) % 4;
            if mask.data()[c] == 0.0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, x.data()[j]);
            }
        }
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let cfg = PruneConfig::new(0.6, 1, 2, 3).with_window(3);
        let mut p = PruneState::for_features(cfg.clone()).unwrap();
        for s in 0..5 {
            let x = Tensor::new(vec![2, 5], (0..10).map(|i| ((i + s) as f64).cos()).collect()).unwrap();
            p.step(&x).unwrap();
        }
        let restored = PruneState::restore(cfg.clone(), true, p.snapshot()).unwrap();
        assert_eq!(restored, p);

        let mut bad = p.snapshot();
        bad.running_sum = Some(Tensor::zeros(&[5]));
        assert!(PruneState::restore(cfg, true, bad).is_err());
    }
}
