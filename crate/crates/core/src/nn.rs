//! Minimal layered network: dense, conv2d and relu layers with hand-written
//! forward and backward passes, two losses and plain SGD.
//!
//! Batched inputs carry the batch on axis 0: dense layers take `[B, in]`,
//! conv layers take `[B, C, H, W]`. Dense weights are stored `[in, out]` so
//! the forward pass is `input · W + b`; conv weights are `[out, in, k, k]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}

fn default_stride() -> usize {
    1
}

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
            bias: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerSpec::Relu)
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Conv2d { bias, .. } => *bias,
            LayerSpec::Relu => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => in_features > 0 && out_features > 0,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
            LayerSpec::Relu => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{self:?} has a zero extent")))
        }
    }

    /// Weight and optional bias shapes, `None` for parameter-free layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                bias,
            } => Some((
                vec![in_features, out_features],
                bias.then(|| vec![out_features]),
            )),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                bias.then(|| vec![out_channels]),
            )),
            LayerSpec::Relu => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => (in_features, out_features),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerSpec::Relu => (0, 0),
        }
    }

    /// Output shape for one sample (no batch axis).
    pub fn output_shape(&self, sample_shape: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if sample_shape != [in_features] {
                    return Err(self.shape_error(vec![in_features], sample_shape));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = sample_shape else {
                    return Err(self.shape_error(vec![in_channels, 0, 0], sample_shape));
                };
                if c != in_channels {
                    return Err(self.shape_error(vec![in_channels, h, w], sample_shape));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(Error::InvalidArgument(format!(
                        "conv2d kernel {kernel} exceeds padded input {}x{}",
                        h + 2 * padding,
                        w + 2 * padding
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(sample_shape.to_vec()),
        }
    }

    fn shape_error(&self, expected: Vec<usize>, actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: format!("{} layer input", self.name()),
            expected,
            actual: actual.to_vec(),
        }
    }
}

/// Parameters of one layer plus gradient buffers of matching shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
}

impl ParamSet {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        let grad_weight = Tensor::zeros(weight.shape());
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Self {
            weight,
            bias,
            grad_weight,
            grad_bias,
        }
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(spec: &LayerSpec, rng: &mut impl Rng) -> Option<Self> {
        let (w_shape, b_shape) = spec.param_shapes()?;
        let (fan_in, fan_out) = spec.fans();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = w_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        let weight = Tensor::from_raw(w_shape, data);
        Some(Self::new(weight, b_shape.map(|s| Tensor::zeros(&s))))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        if let Some(g) = &mut self.grad_bias {
            g.fill(0.0);
        }
    }
}

/// Gradients of a layer's parameters for one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

fn check_batched(spec: &LayerSpec, input: &Tensor) -> Result<Vec<usize>> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            context: format!("{} layer input (batch axis required)", spec.name()),
            expected: vec![0, 0],
            actual: shape.to_vec(),
        });
    }
    let mut out = vec![shape[0]];
    out.extend(spec.output_shape(&shape[1..])?);
    Ok(out)
}

/// Forward pass with explicit weights, so wrapped layers can substitute an
/// effective weight for the stored one.
pub fn forward_with(
    spec: &LayerSpec,
    weight: Option<&Tensor>,
    bias: Option<&Tensor>,
    input: &Tensor,
) -> Result<Tensor> {
    let out_shape = check_batched(spec, input)?;
    match *spec {
        LayerSpec::Relu => Ok(input.map(|v| v.max(0.0))),
        LayerSpec::Dense {
            in_features,
            out_features,
            ..
        } => {
            let w = expect_weight(spec, weight)?;
            let batch = out_shape[0];
            let x = input.data();
            let wd = w.data();
            let mut out = vec![0.0; batch * out_features];
            for b in 0..batch {
                let row = &mut out[b * out_features..(b + 1) * out_features];
                if let Some(bias) = bias {
                    row.copy_from_slice(bias.data());
                }
                for i in 0..in_features {
                    let xi = x[b * in_features + i];
                    let wrow = &wd[i * out_features..(i + 1) * out_features];
                    for (r, &wv) in row.iter_mut().zip(wrow) {
                        *r += xi * wv;
                    }
                }
            }
            Ok(Tensor::from_raw(out_shape, out))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let w = expect_weight(spec, weight)?;
            let geo = ConvGeometry::new(input.shape(), &out_shape, stride, padding);
            let x = input.data();
            let wd = w.data();
            let mut out = vec![0.0; out_shape.iter().product()];
            for b in 0..geo.batch {
                for o in 0..out_channels {
                    let base = (b * out_channels + o) * geo.oh * geo.ow;
                    if let Some(bias) = bias {
                        out[base..base + geo.oh * geo.ow].fill(bias.data()[o]);
                    }
                    for c in 0..in_channels {
                        let xin = &x[(b * in_channels + c) * geo.h * geo.w..][..geo.h * geo.w];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let wv = wd[((o * in_channels + c) * kernel + ky) * kernel + kx];
                                let (x_lo, x_hi) = geo.valid(kx, geo.w, geo.ow);
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let (y_lo, y_hi) = geo.valid(ky, geo.h, geo.oh);
                                for oy in y_lo..y_hi {
                                    let iy = oy * stride + ky - padding;
                                    let src = xin[iy * geo.w + x_lo * stride + kx - padding..].iter().step_by(stride);
                                    let dst = &mut out[base + oy * geo.ow + x_lo..base + oy * geo.ow + x_hi];
                                    for (o, &xv) in dst.iter_mut().zip(src) {
                                        *o += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_raw(out_shape, out))
        }
    }
}

/// Backward pass with explicit weights. Returns the input gradient and, for
/// parameterised layers, the parameter gradients of this pass.
pub fn backward_with(
    spec: &LayerSpec,
    weight: Option<&Tensor>,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Option<ParamGrads>)> {
    let out_shape = check_batched(spec, input)?;
    upstream.expect_shape(&out_shape, &format!("{} layer upstream gradient", spec.name()))?;
    let g = upstream.data();
    match *spec {
        LayerSpec::Relu => {
            let dx = input.zip_map(upstream, "relu backward", |x, g| if x > 0.0 { g } else { 0.0 })?;
            Ok((dx, None))
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            bias,
        } => {
            let w = expect_weight(spec, weight)?;
            let batch = out_shape[0];
            let x = input.data();
            let wd = w.data();
            let mut dx = vec![0.0; batch * in_features];
            let mut dw = vec![0.0; in_features * out_features];
            let mut db = vec![0.0; out_features];
            for b in 0..batch {
                let grow = &g[b * out_features..(b + 1) * out_features];
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d += gv;
                }
                for i in 0..in_features {
                    let xi = x[b * in_features + i];
                    let wrow = &wd[i * out_features..(i + 1) * out_features];
                    let dwrow = &mut dw[i * out_features..(i + 1) * out_features];
                    let mut acc = 0.0;
                    for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(grow) {
                        acc += gv * wv;
                        *dwv += xi * gv;
                    }
                    dx[b * in_features + i] = acc;
                }
            }
            let grads = ParamGrads {
                weight: Tensor::from_raw(w.shape().to_vec(), dw),
                bias: bias.then(|| Tensor::from_raw(vec![out_features], db)),
            };
            Ok((Tensor::from_raw(input.shape().to_vec(), dx), Some(grads)))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let w = expect_weight(spec, weight)?;
            let geo = ConvGeometry::new(input.shape(), &out_shape, stride, padding);
            let x = input.data();
            let wd = w.data();
            let mut dx = vec![0.0; input.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; out_channels];
            for b in 0..geo.batch {
                for (o, db_o) in db.iter_mut().enumerate() {
                    let gbase = (b * out_channels + o) * geo.oh * geo.ow;
                    let gmap = &g[gbase..gbase + geo.oh * geo.ow];
                    *db_o += gmap.iter().sum::<f64>();
                    for c in 0..in_channels {
                        let xoff = (b * in_channels + c) * geo.h * geo.w;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let widx = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                                let wv = wd[widx];
                                let mut acc = 0.0;
                                let (x_lo, x_hi) = geo.valid(kx, geo.w, geo.ow);
                                let (y_lo, y_hi) = geo.valid(ky, geo.h, geo.oh);
                                for oy in y_lo..y_hi {
                                    let iy = oy * stride + ky - padding;
                                    let grow = &gmap[oy * geo.ow..(oy + 1) * geo.ow];
                                    for (ox, &gv) in (x_lo..x_hi).zip(&grow[x_lo..x_hi]) {
                                        let xi = xoff + iy * geo.w + ox * stride + kx - padding;
                                        acc += gv * x[xi];
                                        dx[xi] += gv * wv;
                                    }
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
            let grads = ParamGrads {
                weight: Tensor::from_raw(w.shape().to_vec(), dw),
                bias: bias.then(|| Tensor::from_raw(vec![out_channels], db)),
            };
            Ok((Tensor::from_raw(input.shape().to_vec(), dx), Some(grads)))
        }
    }
}

struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(in_shape: &[usize], out_shape: &[usize], stride: usize, padding: usize) -> Self {
        Self {
            batch: in_shape[0],
            h: in_shape[2],
            w: in_shape[3],
            oh: out_shape[2],
            ow: out_shape[3],
            stride,
            padding,
        }
    }

    /// Output positions `lo..hi` whose input coordinate through kernel tap
    /// `k` lies inside the unpadded extent.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = (extent + self.padding)
            .checked_sub(k)
            .map_or(0, |span| span.div_ceil(self.stride))
            .min(out_extent);
        (lo, hi.max(lo))
    }
}

fn expect_weight<'a>(spec: &LayerSpec, weight: Option<&'a Tensor>) -> Result<&'a Tensor> {
    let weight = weight.ok_or_else(|| {
        Error::InvalidArgument(format!("{} layer requires parameters", spec.name()))
    })?;
    if let Some((shape, _)) = spec.param_shapes() {
        weight.expect_shape(&shape, &format!("{} layer weight", spec.name()))?;
    }
    Ok(weight)
}

pub fn layer_forward(spec: &LayerSpec, params: Option<&ParamSet>, input: &Tensor) -> Result<Tensor> {
    forward_with(
        spec,
        params.map(|p| &p.weight),
        params.and_then(|p| p.bias.as_ref()),
        input,
    )
}

/// Backward pass that accumulates parameter gradients into `params`.
pub fn layer_backward(
    spec: &LayerSpec,
    params: Option<&mut ParamSet>,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (dx, grads) = backward_with(spec, params.as_ref().map(|p| &p.weight), input, upstream)?;
    if let (Some(params), Some(grads)) = (params, grads) {
        params.grad_weight.add_assign(&grads.weight)?;
        if let (Some(acc), Some(g)) = (&mut params.grad_bias, &grads.bias) {
            acc.add_assign(g)?;
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxXent,
}

/// Training target matching a [`LossKind`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Values(&'a Tensor),
    Classes(&'a [usize]),
}

/// Loss value and gradient with respect to the prediction.
///
/// `mse` averages over every element. `softmax_xent` expects `[B, C]` logits
/// and averages the per-sample cross-entropy over the batch.
pub fn loss_and_grad(kind: LossKind, prediction: &Tensor, target: Target<'_>) -> Result<(f64, Tensor)> {
    match (kind, target) {
        (LossKind::Mse, Target::Values(t)) => {
            let diff = prediction.zip_map(t, "mse target", |p, t| p - t)?;
            let n = diff.len() as f64;
            let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
            Ok((loss, diff.map(|d| 2.0 * d / n)))
        }
        (LossKind::SoftmaxXent, Target::Classes(labels)) => {
            let &[batch, classes] = prediction.shape() else {
                return Err(Error::ShapeMismatch {
                    context: "softmax_xent logits".into(),
                    expected: vec![labels.len(), 0],
                    actual: prediction.shape().to_vec(),
                });
            };
            if labels.len() != batch {
                return Err(Error::ShapeMismatch {
                    context: "softmax_xent labels".into(),
                    expected: vec![batch],
                    actual: vec![labels.len()],
                });
            }
            let logits = prediction.data();
            let mut grad = vec![0.0; logits.len()];
            let mut loss = 0.0;
            for (b, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::ClassOutOfRange { index: label, classes });
                }
                let row = &logits[b * classes..(b + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                loss += log_z - row[label];
                for (c, g) in grad[b * classes..(b + 1) * classes].iter_mut().enumerate() {
                    let p = (row[c] - log_z).exp();
                    *g = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
                }
            }
            Ok((loss / batch as f64, Tensor::from_raw(prediction.shape().to_vec(), grad)))
        }
        (kind, _) => Err(Error::InvalidArgument(format!(
            "target type does not match loss {kind:?}"
        ))),
    }
}

/// `p ← p − lr·g`, then zero the gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) {
    for (p, g) in params.weight.data_mut().iter_mut().zip(params.grad_weight.data()) {
        *p -= lr * g;
    }
    if let (Some(b), Some(gb)) = (&mut params.bias, &params.grad_bias) {
        for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= lr * g;
        }
    }
    params.zero_grad();
}

/// Sequential network: layer specs with their parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: Vec<Option<ParamSet>>,
}

impl Network {
    pub fn new(specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        for spec in &specs {
            spec.validate()?;
        }
        let params = specs.iter().map(|s| ParamSet::init(s, rng)).collect();
        Ok(Self { specs, params })
    }

    /// Network from explicit parameters, checked against the layer specs.
    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<Option<ParamSet>>) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers but {} parameter slots",
                specs.len(),
                params.len()
            )));
        }
        for (i, (spec, p)) in specs.iter().zip(&params).enumerate() {
            spec.validate()?;
            match (spec.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    p.weight.expect_shape(&w, &format!("layer {i} weight"))?;
                    match (b, &p.bias) {
                        (None, None) => {}
                        (Some(b), Some(pb)) => pb.expect_shape(&b, &format!("layer {i} bias"))?,
                        _ => return Err(Error::InvalidArgument(format!("layer {i} bias presence mismatch"))),
                    }
                }
                _ => return Err(Error::InvalidArgument(format!("layer {i} parameter presence mismatch"))),
            }
        }
        Ok(Self { specs, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Option<ParamSet>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<ParamSet>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Indices of layers that carry parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&i| self.specs[i].has_params()).collect()
    }

    /// Per-sample output shape of every layer for a per-sample input shape.
    pub fn output_shapes(&self, sample_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = sample_shape.to_vec();
        let mut out = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            shape = spec.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Forward pass keeping every intermediate; `acts[0]` is the input and
    /// `acts[i + 1]` the output of layer `i`.
    pub fn forward_cached(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = vec![input.clone()];
        for (spec, params) in self.specs.iter().zip(&self.params) {
            let next = layer_forward(spec, params.as_ref(), acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (spec, params) in self.specs.iter().zip(&self.params) {
            x = layer_forward(spec, params.as_ref(), &x)?;
        }
        Ok(x)
    }

    /// Backpropagates `grad_out` through cached activations, accumulating
    /// parameter gradients.
    pub fn backward(&mut self, acts: &[Tensor], grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for i in (0..self.specs.len()).rev() {
            g = layer_backward(&self.specs[i], self.params[i].as_mut(), &acts[i], &g)?;
        }
        Ok(g)
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.params.iter_mut().flatten() {
            sgd_step(p, lr);
        }
    }

    /// One plain SGD step on a batch; returns the loss.
    pub fn train_step(&mut self, input: &Tensor, target: Target<'_>, loss: LossKind, lr: f64) -> Result<f64> {
        let acts = self.forward_cached(input)?;
        let (value, grad) = loss_and_grad(loss, acts.last().unwrap(), target)?;
        self.backward(&acts, &grad)?;
        self.sgd_step(lr);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn identity_dense() -> (LayerSpec, ParamSet) {
        let spec = LayerSpec::dense(2, 2);
        let params = ParamSet::new(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Some(Tensor::zeros(&[2])));
        (spec, params)
    }

    #[test]
    fn dense_identity() {
        let (spec, mut params) = identity_dense();
        let x = t(&[1, 2], &[3.0, 4.0]);
        assert_eq!(layer_forward(&spec, Some(&params), &x).unwrap(), x);
        let dx = layer_backward(&spec, Some(&mut params), &x, &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0]);
        assert_eq!(params.grad_weight.data(), &[3.0, 3.0, 4.0, 4.0]);
        assert_eq!(params.grad_bias.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_forward_backward() {
        let x = t(&[1, 2], &[-1.0, 2.0]);
        assert_eq!(layer_forward(&LayerSpec::Relu, None, &x).unwrap().data(), &[0.0, 2.0]);
        let dx = layer_backward(&LayerSpec::Relu, None, &x, &t(&[1, 2], &[5.0, 5.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0]);
    }

    #[test]
    fn conv_one_by_one() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: false,
        };
        let params = ParamSet::new(t(&[1, 1, 1, 1], &[2.0]), None);
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = layer_forward(&spec, Some(&params), &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let spec = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            bias: true,
        };
        assert_eq!(spec.output_shape(&[2, 7, 5]).unwrap(), vec![3, 4, 3]);
        assert!(spec.output_shape(&[1, 7, 5]).is_err());
        let big = LayerSpec::conv2d(1, 1, 5, 0);
        assert!(big.output_shape(&[1, 3, 3]).is_err());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let (spec, params) = identity_dense();
        let err = layer_forward(&spec, Some(&params), &t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense") && msg.contains("[2]"), "{msg}");
        let err = layer_backward(&LayerSpec::Relu, None, &t(&[1, 2], &[1.0, 1.0]), &t(&[1, 1], &[1.0]));
        assert!(err.is_err());
    }

    #[test]
    fn loss_examples() {
        let p = t(&[1, 2], &[0.3, -0.2]);
        let (l, g) = loss_and_grad(LossKind::Mse, &p, Target::Values(&p)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let (l, _) = loss_and_grad(
            LossKind::Mse,
            &t(&[2], &[1.0, 0.0]),
            Target::Values(&t(&[2], &[0.0, 0.0])),
        )
        .unwrap();
        assert_eq!(l, 0.5);

        let (l, g) = loss_and_grad(LossKind::SoftmaxXent, &t(&[1, 2], &[0.7, 0.7]), Target::Classes(&[1])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.data()[0] - 0.5).abs() < 1e-15 && (g.data()[1] + 0.5).abs() < 1e-15);

        let err = loss_and_grad(LossKind::SoftmaxXent, &t(&[1, 2], &[0.0, 0.0]), Target::Classes(&[2]));
        assert_eq!(err.unwrap_err(), Error::ClassOutOfRange { index: 2, classes: 2 });
    }

    #[test]
    fn xent_nonnegative_and_vanishes_with_margin() {
        let (l, _) = loss_and_grad(LossKind::SoftmaxXent, &t(&[1, 3], &[20.0, 0.0, 0.0]), Target::Classes(&[0])).unwrap();
        assert!((0.0..1e-6).contains(&l));
        let (l, _) = loss_and_grad(LossKind::SoftmaxXent, &t(&[1, 3], &[-5.0, 3.0, 1.0]), Target::Classes(&[0])).unwrap();
        assert!(l > 0.0);
        // large logits stay finite thanks to the log-sum-exp shift
        let (l, _) = loss_and_grad(LossKind::SoftmaxXent, &t(&[1, 2], &[1000.0, -1000.0]), Target::Classes(&[1])).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn sgd_examples() {
        let mut p = ParamSet::new(t(&[1], &[1.0]), None);
        p.grad_weight = t(&[1], &[2.0]);
        sgd_step(&mut p, 0.1);
        assert_eq!(p.weight.data(), &[0.8]);
        assert_eq!(p.grad_weight.data(), &[0.0]);

        sgd_step(&mut p, 0.1);
        assert_eq!(p.weight.data(), &[0.8]);

        p.grad_weight = t(&[1], &[3.0]);
        sgd_step(&mut p, 0.0);
        assert_eq!(p.weight.data(), &[0.8]);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = LayerSpec::dense(10, 20);
        let p = ParamSet::init(&spec, &mut rng).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(p.weight.data().iter().all(|v| v.abs() < limit));
        assert!(p.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::new(
            vec![LayerSpec::conv2d(1, 3, 3, 1), LayerSpec::Relu, LayerSpec::conv2d(3, 1, 3, 1)],
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 1, 5, 5], (0..50).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(net.output_shapes(&[1, 5, 5]).unwrap()[2], vec![1, 5, 5]);
    }
}
