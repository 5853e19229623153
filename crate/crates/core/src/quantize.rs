//! Uniform fixed-point quantization with a delayed, saturated choice of
//! decimal bits and a clipped straight-through backward rule.
//!
//! A value `x` is mapped to `clip(floor(x * 2^d), -2^(N-1), 2^(N-1) - 1) / 2^d`,
//! i.e. onto the signed `N`-bit grid with `d` fractional bits. All grid
//! values are exactly representable in `f64`, so results are bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{interpolate_sorted, Tensor};

fn default_bits() -> u32 {
    8
}

fn default_upper_quantile() -> f64 {
    1.0
}

fn default_d_min() -> i32 {
    -8
}

fn default_d_max() -> i32 {
    24
}

fn default_true() -> bool {
    true
}

/// Configuration of one per-tensor quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    /// Total bits `N`.
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// Step `t_q` at which the quantizer activates.
    #[serde(default)]
    pub quantize_step: u64,
    /// Saturation quantiles used when searching for the decimal bits.
    #[serde(default)]
    pub lower_quantile: f64,
    #[serde(default = "default_upper_quantile")]
    pub upper_quantile: f64,
    /// Inclusive range of candidate decimal bits.
    #[serde(default = "default_d_min")]
    pub min_decimal_bits: i32,
    #[serde(default = "default_d_max")]
    pub max_decimal_bits: i32,
    /// Clip gradients to the representable range in the backward pass.
    #[serde(default = "default_true")]
    pub ste_clip: bool,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            bits: default_bits(),
            quantize_step: 0,
            lower_quantile: 0.0,
            upper_quantile: 1.0,
            min_decimal_bits: default_d_min(),
            max_decimal_bits: default_d_max(),
            ste_clip: true,
        }
    }
}

impl QuantizeConfig {
    pub fn new(bits: u32, quantize_step: u64) -> Self {
        Self {
            bits,
            quantize_step,
            ..Self::default()
        }
    }

    pub fn with_saturation(mut self, lower: f64, upper: f64) -> Self {
        self.lower_quantile = lower;
        self.upper_quantile = upper;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in [2, 32], got {}", self.bits)));
        }
        let (l, u) = (self.lower_quantile, self.upper_quantile);
        if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) || l >= u {
            return Err(Error::Config(format!(
                "saturation quantiles must satisfy 0 <= lower < upper <= 1, got ({l}, {u})"
            )));
        }
        if self.min_decimal_bits > self.max_decimal_bits {
            return Err(Error::Config(format!(
                "empty decimal-bit search range [{}, {}]",
                self.min_decimal_bits, self.max_decimal_bits
            )));
        }
        Ok(())
    }

    pub fn decimal_bit_range(&self) -> std::ops::RangeInclusive<i32> {
        self.min_decimal_bits..=self.max_decimal_bits
    }
}

/// Integer clip range `[-2^(N-1), 2^(N-1) - 1]` of a signed `N`-bit code.
pub fn code_range(bits: u32) -> (f64, f64) {
    let half = 2f64.powi(bits as i32 - 1);
    (-half, half - 1.0)
}

#[inline]
fn quantize_value(v: f64, scale: f64, lo: f64, hi: f64) -> f64 {
    (v * scale).floor().max(lo).min(hi) / scale
}

/// Quantizes every element onto the grid `k / 2^d`, `k` in the signed `bits` range.
pub fn uniform_quantize(x: &Tensor, decimal_bits: i32, bits: u32) -> Tensor {
    let scale = 2f64.powi(decimal_bits);
    let (lo, hi) = code_range(bits);
    x.map(|v| quantize_value(v, scale, lo, hi))
}

/// Gradient bounds `[-2^(N-d-1), 2^(N-d-1) - 2^(-d)]`, the representable value range.
pub fn ste_bounds(decimal_bits: i32, bits: u32) -> (f64, f64) {
    let (lo, hi) = code_range(bits);
    let step = 2f64.powi(-decimal_bits);
    (lo * step, hi * step)
}

/// Straight-through backward: clip to the representable range, or pass through.
pub fn ste_backward(upstream: &Tensor, decimal_bits: i32, bits: u32, clip_enabled: bool) -> Tensor {
    if !clip_enabled {
        return upstream.clone();
    }
    let (lo, hi) = ste_bounds(decimal_bits, bits);
    upstream.map(|g| g.max(lo).min(hi))
}

fn sorted_values(x: &Tensor) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = x.data().to_vec();
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

/// Clips `x` to `[quantile(x, lower), quantile(x, upper)]`.
pub fn saturate(x: &Tensor, lower: f64, upper: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
        return Err(Error::InvalidArgument(format!(
            "saturation quantiles must satisfy 0 <= lower < upper <= 1, got ({lower}, {upper})"
        )));
    }
    let sorted = sorted_values(x)?;
    let lo = interpolate_sorted(&sorted, lower);
    let hi = interpolate_sorted(&sorted, upper);
    Ok(x.map(|v| v.max(lo).min(hi)))
}

/// Mean squared error between `x` and its quantization at `decimal_bits`.
pub fn quantization_mse(x: &Tensor, decimal_bits: i32, bits: u32) -> f64 {
    let scale = 2f64.powi(decimal_bits);
    let (lo, hi) = code_range(bits);
    let sum: f64 = x
        .data()
        .iter()
        .map(|&v| {
            let e = quantize_value(v, scale, lo, hi) - v;
            e * e
        })
        .sum();
    sum / x.len() as f64
}

/// Decimal bits minimising the quantization MSE of the saturated tensor over
/// the configured search range. Ties go to the smallest `d`.
pub fn optimal_decimal_bits(x: &Tensor, cfg: &QuantizeConfig) -> Result<i32> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let target = saturate(x, cfg.lower_quantile, cfg.upper_quantile)?;
    let mut best = (cfg.min_decimal_bits, f64::INFINITY);
    for d in cfg.decimal_bit_range() {
        let mse = quantization_mse(&target, d, cfg.bits);
        if mse < best.1 {
            best = (d, mse);
        }
    }
    Ok(best.0)
}

/// Delayed quantizer for one tensor: identity until `quantize_step`, then the
/// decimal bits are fixed from that step's tensor and every later call is
/// quantized with them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeState {
    config: QuantizeConfig,
    decimal_bits: Option<i32>,
    step: u64,
}

impl QuantizeState {
    pub fn new(config: QuantizeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            decimal_bits: None,
            step: 0,
        })
    }

    /// Restores a state from its serialized fields.
    pub fn restore(config: QuantizeConfig, step: u64, decimal_bits: Option<i32>) -> Result<Self> {
        config.validate()?;
        if let Some(d) = decimal_bits {
            if !config.decimal_bit_range().contains(&d) {
                return Err(Error::Config(format!("decimal bits {d} outside the search range")));
            }
        }
        Ok(Self {
            config,
            decimal_bits,
            step,
        })
    }

    pub fn config(&self) -> &QuantizeConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn decimal_bits(&self) -> Option<i32> {
        self.decimal_bits
    }

    pub fn is_active(&self) -> bool {
        self.decimal_bits.is_some()
    }

    /// Advances the step counter and returns the operator output.
    pub fn step(&mut self, x: &Tensor) -> Result<Tensor> {
        self.step += 1;
        if self.step < self.config.quantize_step {
            return Ok(x.clone());
        }
        if self.decimal_bits.is_none() {
            self.decimal_bits = Some(optimal_decimal_bits(x, &self.config)?);
        }
        Ok(self.apply(x))
    }

    /// Output without advancing the schedule (evaluation passes).
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self.decimal_bits {
            Some(d) => uniform_quantize(x, d, self.config.bits),
            None => x.clone(),
        }
    }

    /// Gradient with respect to the operator input.
    pub fn backward(&self, upstream: &Tensor) -> Tensor {
        match self.decimal_bits {
            Some(d) => ste_backward(upstream, d, self.config.bits, self.config.ste_clip),
            None => upstream.clone(),
        }
    }
}
