//! Joint pipeline: wraps layers with prune and quantize operators and drives
//! their schedules during training.
//!
//! Structurally, pruning always precedes quantization inside a layer:
//! the effective weight is `Q(P(w))` and the emitted feature is `Q(P(y))`.
//! Temporally, the relation between each pruner's `t_0 + n·Δt` and each
//! quantizer's `t_q` decides whether a plan prunes then quantizes or the
//! reverse; see [`derive_order`].

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    self, FootprintEntry, FootprintSpec, MetricsRecord, TaskMetric, TensorRecord, TensorRole, FLOAT_BITS,
};
use crate::nn::{backward_with, forward_with, loss_and_grad, LayerSpec, LossKind, Network, ParamSet, Target};
use crate::prune::{PruneConfig, PruneState};
use crate::quantize::{QuantizeConfig, QuantizeState};
use crate::tensor::Tensor;

/// Operators attached to one layer. Biases are never wrapped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrapSpec {
    #[serde(default)]
    pub weight_prune: Option<PruneConfig>,
    #[serde(default)]
    pub weight_quantize: Option<QuantizeConfig>,
    #[serde(default)]
    pub feature_prune: Option<PruneConfig>,
    #[serde(default)]
    pub feature_quantize: Option<QuantizeConfig>,
}

impl WrapSpec {
    pub fn is_empty(&self) -> bool {
        self.weight_prune.is_none()
            && self.weight_quantize.is_none()
            && self.feature_prune.is_none()
            && self.feature_quantize.is_none()
    }

    fn prune_configs(&self) -> impl Iterator<Item = &PruneConfig> {
        self.weight_prune.iter().chain(&self.feature_prune)
    }

    fn quantize_configs(&self) -> impl Iterator<Item = &QuantizeConfig> {
        self.weight_quantize.iter().chain(&self.feature_quantize)
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub layers: Vec<LayerSpec>,
    /// One entry per layer.
    pub wraps: Vec<WrapSpec>,
    pub excluded_layers: BTreeSet<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub lr: f64,
    pub seed: u64,
}

impl TrainPlan {
    /// Plan with no operators and the first and last parameterised layers excluded.
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Self {
        let excluded = default_excluded(&layers);
        Self {
            wraps: vec![WrapSpec::default(); layers.len()],
            layers,
            excluded_layers: excluded,
            steps: 100,
            batch_size: 16,
            loss,
            lr: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("plan has no layers".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if self.wraps.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} wrap specs for {} layers",
                self.wraps.len(),
                self.layers.len()
            )));
        }
        if let Some(&i) = self.excluded_layers.iter().find(|&&i| i >= self.layers.len()) {
            return Err(Error::Config(format!("excluded layer {i} does not exist")));
        }
        for (i, (layer, wrap)) in self.layers.iter().zip(&self.wraps).enumerate() {
            if wrap.is_empty() {
                continue;
            }
            if self.excluded_layers.contains(&i) {
                return Err(Error::Config(format!("layer {i} is excluded but has operators")));
            }
            if !layer.has_params() {
                return Err(Error::Config(format!("layer {i} ({}) cannot be wrapped", layer.name())));
            }
            for p in wrap.prune_configs() {
                p.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            }
            for q in wrap.quantize_configs() {
                q.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn task_metric(&self) -> TaskMetric {
        match self.loss {
            LossKind::SoftmaxXent => TaskMetric::Accuracy,
            LossKind::Mse => TaskMetric::Psnr { peak: 1.0 },
        }
    }
}

/// First and last parameterised layers.
pub fn default_excluded(layers: &[LayerSpec]) -> BTreeSet<usize> {
    let params: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].has_params()).collect();
    params.first().into_iter().chain(params.last()).copied().collect()
}

/// Temporal relation between the prune and quantize schedules of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleOrder {
    PruneThenQuantize,
    QuantizeThenPrune,
    Mixed,
}

impl fmt::Display for ScheduleOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleOrder::PruneThenQuantize => "PruneThenQuantize",
            ScheduleOrder::QuantizeThenPrune => "QuantizeThenPrune",
            ScheduleOrder::Mixed => "Mixed",
        };
        f.write_str(s)
    }
}

/// Classifies a plan: prune-then-quantize when every pruner finishes no later
/// than the earliest quantizer activates, quantize-then-prune when every
/// quantizer activates no later than the earliest pruner starts.
pub fn derive_order(plan: &TrainPlan) -> Result<ScheduleOrder> {
    let prune_end = plan.wraps.iter().flat_map(WrapSpec::prune_configs).map(PruneConfig::end_step).max();
    let prune_start = plan.wraps.iter().flat_map(WrapSpec::prune_configs).map(|p| p.start_step).min();
    let q_first = plan.wraps.iter().flat_map(WrapSpec::quantize_configs).map(|q| q.quantize_step).min();
    let q_last = plan.wraps.iter().flat_map(WrapSpec::quantize_configs).map(|q| q.quantize_step).max();
    let (Some(prune_end), Some(prune_start), Some(q_first), Some(q_last)) =
        (prune_end, prune_start, q_first, q_last)
    else {
        return Err(Error::Config(
            "schedule order needs at least one prune and one quantize operator".into(),
        ));
    };
    Ok(if prune_end <= q_first {
        ScheduleOrder::PruneThenQuantize
    } else if q_last <= prune_start {
        ScheduleOrder::QuantizeThenPrune
    } else {
        ScheduleOrder::Mixed
    })
}

/// Operator states attached to one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerOperators {
    pub weight_prune: Option<PruneState>,
    pub weight_quantize: Option<QuantizeState>,
    pub feature_prune: Option<PruneState>,
    pub feature_quantize: Option<QuantizeState>,
}

impl LayerOperators {
    pub fn from_spec(spec: &WrapSpec) -> Result<Self> {
        Ok(Self {
            weight_prune: spec.weight_prune.clone().map(PruneState::for_weights).transpose()?,
            weight_quantize: spec.weight_quantize.clone().map(QuantizeState::new).transpose()?,
            feature_prune: spec.feature_prune.clone().map(PruneState::for_features).transpose()?,
            feature_quantize: spec.feature_quantize.clone().map(QuantizeState::new).transpose()?,
        })
    }

    pub fn has_weight_ops(&self) -> bool {
        self.weight_prune.is_some() || self.weight_quantize.is_some()
    }

    pub fn has_feature_ops(&self) -> bool {
        self.feature_prune.is_some() || self.feature_quantize.is_some()
    }

    /// `Q(P(w))`; `advance` steps the schedules (training passes only).
    pub fn effective_weight(&mut self, weight: &Tensor, advance: bool) -> Result<Tensor> {
        let mut w = weight.clone();
        if let Some(p) = &mut self.weight_prune {
            w = if advance { p.step(&w)? } else { p.apply(&w)? };
        }
        if let Some(q) = &mut self.weight_quantize {
            w = if advance { q.step(&w)? } else { q.apply(&w) };
        }
        Ok(w)
    }

    /// Chain rule through `Q(P(w))`: STE first, then the prune mask.
    pub fn weight_backward(&self, grad: &Tensor) -> Result<Tensor> {
        let mut g = match &self.weight_quantize {
            Some(q) => q.backward(grad),
            None => grad.clone(),
        };
        if let Some(p) = &self.weight_prune {
            g = p.backward(&g)?;
        }
        Ok(g)
    }

    pub fn feature_forward(&mut self, y: &Tensor, advance: bool) -> Result<Tensor> {
        let mut out = y.clone();
        if let Some(p) = &mut self.feature_prune {
            out = if advance { p.step(&out)? } else { p.apply(&out)? };
        }
        if let Some(q) = &mut self.feature_quantize {
            out = if advance { q.step(&out)? } else { q.apply(&out) };
        }
        Ok(out)
    }

    pub fn feature_backward(&self, grad: &Tensor) -> Result<Tensor> {
        let mut g = match &self.feature_quantize {
            Some(q) => q.backward(grad),
            None => grad.clone(),
        };
        if let Some(p) = &self.feature_prune {
            g = p.backward(&g)?;
        }
        Ok(g)
    }

    /// Step counters of every attached operator.
    pub fn step_counts(&self) -> Vec<u64> {
        let mut v = Vec::new();
        v.extend(self.weight_prune.as_ref().map(PruneState::step_count));
        v.extend(self.weight_quantize.as_ref().map(QuantizeState::step_count));
        v.extend(self.feature_prune.as_ref().map(PruneState::step_count));
        v.extend(self.feature_quantize.as_ref().map(QuantizeState::step_count));
        v
    }
}

/// A single parameterised layer behind its operators. The raw parameters are
/// never modified by the operators; only the effective weight is.
#[derive(Debug, Clone)]
pub struct WrappedLayer {
    pub spec: LayerSpec,
    pub params: ParamSet,
    pub ops: LayerOperators,
    cache: Option<(Tensor, Tensor)>,
}

/// Wraps `layer` with the operators described by `spec`.
pub fn wrap_layer(layer: LayerSpec, params: ParamSet, spec: &WrapSpec) -> Result<WrappedLayer> {
    if !layer.has_params() && !spec.is_empty() {
        return Err(Error::Config(format!("{} layer cannot be wrapped", layer.name())));
    }
    if let Some((w_shape, _)) = layer.param_shapes() {
        params.weight.expect_shape(&w_shape, "wrapped layer weight")?;
    }
    Ok(WrappedLayer {
        ops: LayerOperators::from_spec(spec)?,
        spec: layer,
        params,
        cache: None,
    })
}

impl WrappedLayer {
    /// Forward pass; `train` advances every attached schedule once.
    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let w_eff = self.ops.effective_weight(&self.params.weight, train)?;
        let y = forward_with(&self.spec, Some(&w_eff), self.params.bias.as_ref(), input)?;
        let out = self.ops.feature_forward(&y, train)?;
        self.cache = Some((input.clone(), w_eff));
        Ok(out)
    }

    /// Backward pass for the most recent forward; accumulates raw-parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (input, w_eff) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("backward called before forward".into()))?;
        let g = self.ops.feature_backward(upstream)?;
        let (dx, grads) = backward_with(&self.spec, Some(w_eff), input, &g)?;
        if let Some(grads) = grads {
            self.params.grad_weight.add_assign(&self.ops.weight_backward(&grads.weight)?)?;
            if let (Some(acc), Some(gb)) = (&mut self.params.grad_bias, &grads.bias) {
                acc.add_assign(gb)?;
            }
        }
        Ok(dx)
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        self.ops.clone().effective_weight(&self.params.weight, false)
    }
}

/// Network plus per-layer operators. Feature operators of a layer act on its
/// output, or on the output of the relu directly following it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    network: Network,
    ops: Vec<LayerOperators>,
    feature_site: Vec<usize>,
}

/// Intermediates of one forward pass kept for backward.
pub struct ForwardPass {
    acts: Vec<Tensor>,
    weights: Vec<Option<Tensor>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("forward pass holds the input")
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.acts
    }
}

/// Gradients observed during one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStats {
    /// `‖∂L/∂output‖` of every parameterised layer's feature site.
    pub feature_grad_norm: Vec<Option<f64>>,
    /// `‖∂L/∂w‖` of every parameterised layer's raw weight.
    pub weight_grad_norm: Vec<Option<f64>>,
}

impl Model {
    pub fn new(network: Network, wraps: &[WrapSpec]) -> Result<Self> {
        if wraps.len() != network.len() {
            return Err(Error::Config(format!(
                "{} wrap specs for {} layers",
                wraps.len(),
                network.len()
            )));
        }
        let ops = wraps.iter().map(LayerOperators::from_spec).collect::<Result<Vec<_>>>()?;
        Self::from_parts(network, ops)
    }

    pub fn from_parts(network: Network, ops: Vec<LayerOperators>) -> Result<Self> {
        if ops.len() != network.len() {
            return Err(Error::Config("operator count does not match layer count".into()));
        }
        let specs = network.specs();
        let feature_site = (0..specs.len())
            .map(|i| {
                if specs.get(i + 1) == Some(&LayerSpec::Relu) && specs[i].has_params() {
                    i + 1
                } else {
                    i
                }
            })
            .collect();
        Ok(Self {
            network,
            ops,
            feature_site,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn operators(&self) -> &[LayerOperators] {
        &self.ops
    }

    /// Layer whose output carries the features of layer `i`.
    pub fn feature_site(&self, i: usize) -> usize {
        self.feature_site[i]
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<ForwardPass> {
        let n = self.network.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(input.clone());
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let spec = &self.network.specs()[i];
            let params = self.network.params()[i].as_ref();
            let w_eff = match params {
                Some(p) => Some(self.ops[i].effective_weight(&p.weight, train)?),
                None => None,
            };
            let mut y = forward_with(spec, w_eff.as_ref(), params.and_then(|p| p.bias.as_ref()), &acts[i])?;
            for j in self.sites_at(i) {
                y = self.ops[j].feature_forward(&y, train)?;
            }
            weights.push(w_eff);
            acts.push(y);
        }
        Ok(ForwardPass { acts, weights })
    }

    fn sites_at(&self, i: usize) -> Vec<usize> {
        // at most two layers (i - 1 fused with relu i, or i itself) map here
        let lo = i.saturating_sub(1);
        (lo..=i).filter(|&j| self.feature_site[j] == i && self.ops[j].has_feature_ops()).collect()
    }

    pub fn predict(&mut self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.acts.pop().expect("non-empty"))
    }

    /// Backpropagates `grad_out`, accumulating raw-parameter gradients.
    pub fn backward(&mut self, pass: &ForwardPass, grad_out: &Tensor) -> Result<BackwardStats> {
        let n = self.network.len();
        let mut stats = BackwardStats {
            feature_grad_norm: vec![None; n],
            weight_grad_norm: vec![None; n],
        };
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            for j in 0..n {
                if self.feature_site[j] == i && self.network.specs()[j].has_params() {
                    stats.feature_grad_norm[j] = Some(g.norm());
                }
            }
            for j in self.sites_at(i) {
                g = self.ops[j].feature_backward(&g)?;
            }
            let spec = &self.network.specs()[i];
            let (dx, grads) = backward_with(spec, pass.weights[i].as_ref(), &pass.acts[i], &g)?;
            if let (Some(grads), Some(params)) = (grads, self.network.params_mut()[i].as_mut()) {
                let gw = self.ops[i].weight_backward(&grads.weight)?;
                stats.weight_grad_norm[i] = Some(gw.norm());
                params.grad_weight.add_assign(&gw)?;
                if let (Some(acc), Some(gb)) = (&mut params.grad_bias, &grads.bias) {
                    acc.add_assign(gb)?;
                }
            }
            g = dx;
        }
        Ok(stats)
    }

    /// Effective (pruned and quantized) weight of layer `i` as used in evaluation.
    pub fn effective_weight(&self, i: usize) -> Result<Option<Tensor>> {
        match &self.network.params()[i] {
            Some(p) => Ok(Some(self.ops[i].clone().effective_weight(&p.weight, false)?)),
            None => Ok(None),
        }
    }

    /// Current storage footprint for one input of `sample_shape`.
    pub fn footprint(&self, sample_shape: &[usize]) -> Result<FootprintSpec> {
        let shapes = self.network.output_shapes(sample_shape)?;
        let mut spec = FootprintSpec::default();
        for i in self.network.param_layers() {
            let ops = &self.ops[i];
            let params = self.network.params()[i].as_ref().expect("parameterised layer");
            spec.weights.push(FootprintEntry::new(
                params.weight.len(),
                active_bits(ops.weight_quantize.as_ref()),
                ops.weight_prune.as_ref().map_or(0.0, PruneState::mask_sparsity),
            ));
            if let Some(b) = &params.bias {
                spec.weights.push(FootprintEntry::new(b.len(), FLOAT_BITS, 0.0));
            }
            spec.activations.push(FootprintEntry::new(
                shapes[self.feature_site[i]].iter().product(),
                active_bits(ops.feature_quantize.as_ref()),
                ops.feature_prune.as_ref().map_or(0.0, PruneState::mask_sparsity),
            ));
        }
        Ok(spec)
    }

    /// Step counters of every operator in the model.
    pub fn operator_steps(&self) -> Vec<u64> {
        self.ops.iter().flat_map(LayerOperators::step_counts).collect()
    }

    pub fn into_parts(self) -> (Network, Vec<LayerOperators>) {
        (self.network, self.ops)
    }
}

fn active_bits(q: Option<&QuantizeState>) -> u32 {
    match q {
        Some(q) if q.is_active() => q.config().bits,
        _ => FLOAT_BITS,
    }
}

/// Training targets, one per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Tensor),
    Classes(Vec<usize>),
}

/// Samples stacked on axis 0 with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let n = inputs.shape()[0];
        let m = match &targets {
            Targets::Values(t) => t.shape()[0],
            Targets::Classes(c) => c.len(),
        };
        if inputs.shape().len() < 2 || n != m {
            return Err(Error::InvalidArgument(format!(
                "dataset with input shape {:?} and {m} targets",
                inputs.shape()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and targets of the given sample indices, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Targets) {
        let inputs = gather(&self.inputs, indices);
        let targets = match &self.targets {
            Targets::Values(t) => Targets::Values(gather(t, indices)),
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
        };
        (inputs, targets)
    }
}

fn gather(x: &Tensor, indices: &[usize]) -> Tensor {
    let row: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(row * indices.len());
    for &i in indices {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::from_raw(shape, data)
}

fn as_target(t: &Targets) -> Target<'_> {
    match t {
        Targets::Values(v) => Target::Values(v),
        Targets::Classes(c) => Target::Classes(c),
    }
}

/// Task metric of a prediction against its targets.
pub fn evaluate_metric(metric: TaskMetric, prediction: &Tensor, targets: &Targets) -> Result<f64> {
    match (metric, targets) {
        (TaskMetric::Accuracy, Targets::Classes(c)) => metrics::accuracy(prediction, c),
        (TaskMetric::Psnr { peak }, Targets::Values(v)) => metrics::psnr(prediction, v, peak),
        _ => Err(Error::InvalidArgument("metric does not match target type".into())),
    }
}

/// Shuffled epoch order over the training set. A new permutation is drawn
/// whenever the previous one is exhausted; the last batch of an epoch may
/// be short.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn from_state(rng: ChaCha8Rng, order: Vec<usize>, cursor: usize) -> Self {
        Self { rng, order, cursor }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn next_batch(&mut self, n: usize, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Stateful training run: model, sampler and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    plan: TrainPlan,
    model: Model,
    sampler: BatchSampler,
    step: u64,
}

impl Trainer {
    pub fn new(plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let network = Network::new(plan.layers.clone(), &mut init_rng)?;
        let model = Model::new(network, &plan.wraps)?;
        let sampler = BatchSampler::new(plan.seed);
        Ok(Self {
            plan,
            model,
            sampler,
            step: 0,
        })
    }

    pub fn from_parts(plan: TrainPlan, model: Model, sampler: BatchSampler, step: u64) -> Result<Self> {
        plan.validate()?;
        if model.network().specs() != plan.layers.as_slice() {
            return Err(Error::Config("model layers differ from the plan".into()));
        }
        if let Some(&s) = model.operator_steps().iter().find(|&&s| s != step) {
            return Err(Error::Config(format!("operator counter {s} out of sync with step {step}")));
        }
        Ok(Self {
            plan,
            model,
            sampler,
            step,
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.steps
    }

    /// One SGD step on the next mini-batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        let indices = self.sampler.next_batch(data.len(), self.plan.batch_size);
        let (inputs, targets) = data.batch(&indices);
        self.step += 1;
        let pass = self.model.forward(&inputs, true)?;
        let (loss, grad) = loss_and_grad(self.plan.loss, pass.output(), as_target(&targets))?;
        if !loss.is_finite() {
            let layer = pass.acts[1..]
                .iter()
                .position(|a| !a.is_finite())
                .unwrap_or(self.model.network.len() - 1);
            return Err(Error::NonFiniteLoss { step: self.step, layer });
        }
        let metric = evaluate_metric(self.plan.task_metric(), pass.output(), &targets)?;
        let stats = self.model.backward(&pass, &grad)?;
        self.model.network.sgd_step(self.plan.lr);
        self.record(loss, metric, &stats, data.sample_shape())
    }

    fn record(&self, loss: f64, metric: f64, stats: &BackwardStats, sample_shape: &[usize]) -> Result<MetricsRecord> {
        let mut tensors = Vec::new();
        for i in self.model.network.param_layers() {
            let ops = &self.model.ops[i];
            tensors.push(TensorRecord {
                layer: i,
                role: TensorRole::Weight,
                grad_norm: stats.weight_grad_norm[i].unwrap_or(0.0),
                sparsity: ops.weight_prune.as_ref().map_or(0.0, PruneState::mask_sparsity),
                decimal_bits: ops.weight_quantize.as_ref().and_then(QuantizeState::decimal_bits),
            });
            tensors.push(TensorRecord {
                layer: i,
                role: TensorRole::Feature,
                grad_norm: stats.feature_grad_norm[i].unwrap_or(0.0),
                sparsity: ops.feature_prune.as_ref().map_or(0.0, PruneState::mask_sparsity),
                decimal_bits: ops.feature_quantize.as_ref().and_then(QuantizeState::decimal_bits),
            });
        }
        let footprint_mb = metrics::memory_footprint(&self.model.footprint(sample_shape)?);
        Ok(MetricsRecord {
            step: self.step,
            loss,
            metric,
            tensors,
            footprint_mb,
            performance_density: metrics::performance_density(metric, footprint_mb)?,
        })
    }

    /// Trains until `plan.steps`, handing each record to `sink`.
    pub fn run(&mut self, data: &Dataset, mut sink: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.train_step(data)?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    /// Task metric over a whole dataset in evaluation mode.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<f64> {
        let pred = self.model.predict(&data.inputs)?;
        evaluate_metric(self.plan.task_metric(), &pred, &data.targets)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Runs a full training plan and returns the trained model with its metrics.
pub fn train(plan: &TrainPlan, data: &Dataset) -> Result<(Model, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(plan.clone())?;
    let mut records = Vec::with_capacity(plan.steps as usize);
    trainer.run(data, |_, r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.into_model(), records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(2, 6),
            LayerSpec::Relu,
            LayerSpec::dense(6, 6),
            LayerSpec::Relu,
            LayerSpec::dense(6, 2),
        ]
    }

    fn plan_with(wrap: WrapSpec) -> TrainPlan {
        let mut plan = TrainPlan::new(mlp(), LossKind::SoftmaxXent);
        plan.wraps[2] = wrap;
        plan
    }

    fn prune(start: u64, interval: u64, reps: u64) -> PruneConfig {
        PruneConfig::new(0.5, start, interval, reps)
    }

    #[test]
    fn default_exclusion_is_first_and_last_param_layer() {
        assert_eq!(default_excluded(&mlp()), BTreeSet::from([0, 4]));
        let mut plan = TrainPlan::new(mlp(), LossKind::SoftmaxXent);
        plan.wraps[0].weight_quantize = Some(QuantizeConfig::new(8, 0));
        assert!(plan.validate().unwrap_err().to_string().contains("excluded"));
        let mut plan = TrainPlan::new(mlp(), LossKind::SoftmaxXent);
        plan.wraps[1].feature_quantize = Some(QuantizeConfig::new(8, 0));
        assert!(plan.validate().is_err());
    }

    #[test]
    fn order_classification() {
        let pq = plan_with(WrapSpec {
            weight_prune: Some(prune(10, 10, 4)),
            weight_quantize: Some(QuantizeConfig::new(8, 100)),
            ..Default::default()
        });
        assert_eq!(derive_order(&pq).unwrap(), ScheduleOrder::PruneThenQuantize);

        let qp = plan_with(WrapSpec {
            weight_prune: Some(prune(100, 10, 4)),
            feature_quantize: Some(QuantizeConfig::new(8, 50)),
            ..Default::default()
        });
        assert_eq!(derive_order(&qp).unwrap(), ScheduleOrder::QuantizeThenPrune);

        // equality boundaries fall on the non-mixed side
        let edge = plan_with(WrapSpec {
            weight_prune: Some(prune(10, 10, 4)),
            weight_quantize: Some(QuantizeConfig::new(8, 50)),
            ..Default::default()
        });
        assert_eq!(derive_order(&edge).unwrap(), ScheduleOrder::PruneThenQuantize);

        let mut mixed = TrainPlan::new(
            vec![
                LayerSpec::dense(2, 4),
                LayerSpec::dense(4, 4),
                LayerSpec::dense(4, 4),
                LayerSpec::dense(4, 2),
            ],
            LossKind::Mse,
        );
        mixed.wraps[1] = WrapSpec {
            weight_prune: Some(prune(0, 10, 5)),
            weight_quantize: Some(QuantizeConfig::new(8, 60)),
            ..Default::default()
        };
        mixed.wraps[2] = WrapSpec {
            weight_prune: Some(prune(40, 10, 5)),
            weight_quantize: Some(QuantizeConfig::new(8, 20)),
            ..Default::default()
        };
        assert_eq!(derive_order(&mixed).unwrap(), ScheduleOrder::Mixed);

        assert!(derive_order(&plan_with(WrapSpec::default())).is_err());
        let only_prune = plan_with(WrapSpec {
            weight_prune: Some(prune(0, 1, 1)),
            ..Default::default()
        });
        assert!(derive_order(&only_prune).is_err());
    }

    #[test]
    fn empty_wrap_is_transparent() {
        let spec = LayerSpec::dense(3, 2);
        let w = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let params = ParamSet::new(w, Some(Tensor::new(vec![2], vec![0.01, -0.02]).unwrap()));
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let bare = crate::nn::layer_forward(&spec, Some(&params), &x).unwrap();
        let mut wrapped = wrap_layer(spec, params, &WrapSpec::default()).unwrap();
        assert_eq!(wrapped.forward(&x, true).unwrap(), bare);
    }

    #[test]
    fn wrapping_relu_is_rejected() {
        let spec = WrapSpec {
            feature_quantize: Some(QuantizeConfig::new(8, 0)),
            ..Default::default()
        };
        let dummy = ParamSet::new(Tensor::zeros(&[1]), None);
        assert!(wrap_layer(LayerSpec::Relu, dummy, &spec).is_err());
    }

    #[test]
    fn pruned_then_quantized_weight_keeps_exact_zeros() {
        let spec = LayerSpec::dense(4, 5);
        let w = Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 37 % 19) as f64 - 9.0) * 0.05).collect()).unwrap();
        let raw = w.clone();
        let wrap = WrapSpec {
            weight_prune: Some(PruneConfig::new(0.5, 0, 1, 1)),
            weight_quantize: Some(QuantizeConfig::new(4, 0)),
            ..Default::default()
        };
        let mut layer = wrap_layer(spec, ParamSet::new(w, None), &wrap).unwrap();
        let x = Tensor::ones(&[1, 4]);
        layer.forward(&x, true).unwrap();
        layer.forward(&x, true).unwrap();
        let mask = layer.ops.weight_prune.as_ref().unwrap().mask().unwrap().clone();
        assert_eq!(mask.count_zeros(), 10);
        let eff = layer.effective_weight().unwrap();
        for (e, m) in eff.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*e, 0.0);
            }
        }
        assert_eq!(layer.params.weight, raw, "raw weights untouched");
    }

    #[test]
    fn operator_counters_stay_in_sync() {
        let mut plan = plan_with(WrapSpec {
            weight_prune: Some(prune(2, 2, 2)),
            weight_quantize: Some(QuantizeConfig::new(8, 7)),
            feature_prune: Some(prune(3, 1, 3)),
            feature_quantize: Some(QuantizeConfig::new(8, 9)),
        });
        plan.steps = 12;
        plan.batch_size = 3;
        let x = Tensor::new(vec![8, 2], (0..16).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let data = Dataset::new(x, Targets::Classes((0..8).map(|i| i % 2).collect())).unwrap();
        let mut trainer = Trainer::new(plan).unwrap();
        for k in 1..=12u64 {
            trainer.train_step(&data).unwrap();
            assert!(trainer.model().operator_steps().iter().all(|&s| s == k));
        }
        // evaluation does not advance schedules
        trainer.evaluate(&data).unwrap();
        assert!(trainer.model().operator_steps().iter().all(|&s| s == 12));
    }

    #[test]
    fn sampler_covers_each_sample_once_per_epoch() {
        let mut s = BatchSampler::new(5);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..4 {
            seen.extend(s.next_batch(10, 3));
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
