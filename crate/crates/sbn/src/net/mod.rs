//! Minimal trainable network stack and the shared training engine.
//!
//! One engine drives both the single-tensor path and the simulated
//! multi-node path: the forward walks layers in lockstep across nodes, a
//! per-policy hook supplies each node's normalization statistics, and the
//! backward pools the statistic reductions where policies share statistics.
//! Cross-node reductions are pairwise and shard-aligned, so a synchronized
//! run over 2^k equal shards reproduces the single-tensor run bit for bit.

pub mod data;
pub mod layers;

use crate::analysis::{ErrorTrace, StatsRecorder};
use crate::batchnorm::{
    bn_backward_apply, bn_backward_reduce, bn_forward_eval, bn_forward_train,
    bn_forward_train_custom, bn_forward_train_mixed, combine_partials, update_moving_average,
    BnForwardCache, BnLayerState, BnPartials, StatSource,
};
use crate::error::{Error, Result};
use crate::microbn::{node_statistics, shard_batch, MicroBnConfig, MicroBnPolicy};
use crate::rng::{RngStream, StreamPurpose};
use crate::sampling::{make_plan, plan_indices, refresh_plan, SamplingPlan, SamplingStrategy};
use crate::tensor::{
    channel_moments, full_index_set, gather_rows, pairwise_sum, ChannelStats, Tensor4,
};
use crate::vdn::{fit_dataset_stats, prepend_virtual, sample_virtual, virtual_stats, VirtualSampler};
use data::SyntheticDataset;
use layers::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, ConvLayer,
    DenseLayer,
};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { out_c: usize },
    Dense { out_dim: usize },
    Relu,
    Bn,
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Dense(DenseLayer),
    Relu,
    Bn { state: BnLayerState, bn_index: usize },
    GlobalAvgPool,
}

impl Layer {
    fn name(&self, position: usize) -> String {
        match self {
            Layer::Conv(_) => format!("conv{position}"),
            Layer::Dense(_) => format!("dense{position}"),
            Layer::Relu => format!("relu{position}"),
            Layer::Bn { .. } => format!("bn{position}"),
            Layer::GlobalAvgPool => format!("gap{position}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// (h, w, c) of a single input sample.
    pub input_dims: (usize, usize, usize),
}

impl Model {
    /// Build from specs with fan-in scaled Gaussian init, one substream per
    /// layer. Shape consistency is checked end to end.
    pub fn build(
        specs: &[LayerSpec],
        input_dims: (usize, usize, usize),
        epsilon: f64,
        decay: f64,
        stream: &RngStream,
    ) -> Result<Model> {
        let (mut h, mut w, mut c) = input_dims;
        let mut layers = Vec::with_capacity(specs.len());
        let mut bn_index = 0usize;
        for (idx, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv3x3 { out_c } => {
                    let mut rng = stream.substream(0, idx as u64, StreamPurpose::WeightInit);
                    let conv = ConvLayer::new_he(c, out_c, &mut rng);
                    c = out_c;
                    Layer::Conv(conv)
                }
                LayerSpec::Dense { out_dim } => {
                    let mut rng = stream.substream(0, idx as u64, StreamPurpose::WeightInit);
                    let dense = DenseLayer::new_he(h * w * c, out_dim, &mut rng);
                    h = 1;
                    w = 1;
                    c = out_dim;
                    Layer::Dense(dense)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Bn => {
                    let state = BnLayerState::new(c, epsilon, decay)?;
                    bn_index += 1;
                    Layer::Bn {
                        state,
                        bn_index: bn_index - 1,
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                    Layer::GlobalAvgPool
                }
            };
            layers.push(layer);
        }
        Ok(Model { layers, input_dims })
    }

    pub fn num_bn_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Bn { .. }))
            .count()
    }

    /// (n, h, w, c) at each normalization layer for a batch of `n` samples.
    pub fn bn_dims(&self, n: usize) -> Vec<(usize, usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_dims;
        let mut dims = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => c = conv.out_c,
                Layer::Dense(dense) => {
                    h = 1;
                    w = 1;
                    c = dense.out_dim;
                }
                Layer::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                }
                Layer::Bn { .. } => dims.push((n, h, w, c)),
                Layer::Relu => {}
            }
        }
        dims
    }

    pub fn reset_moving(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Bn { state, .. } = layer {
                state.reset_moving();
            }
        }
    }
}

/// Per-layer saved state for the backward pass.
pub enum LayerCache {
    Conv { input: Tensor4 },
    Dense { input: Tensor4 },
    Relu { input: Tensor4 },
    Bn(BnForwardCache),
    Pool { h: usize, w: usize },
}

/// How one node's normalization layer gets its statistics.
pub enum BnApply {
    Plain {
        stats: ChannelStats,
        indices: Vec<usize>,
    },
    Mixed {
        virtual_stats: ChannelStats,
        virtual_indices: Vec<usize>,
        sampled_stats: ChannelStats,
        sampled_indices: Vec<usize>,
        mix: f64,
    },
    Custom {
        stats: ChannelStats,
        sources: Vec<StatSource>,
    },
}

/// Lockstep forward over one or more disjoint node tensors. The hook sees
/// every node's activations at each normalization layer and returns one
/// statistics application per node.
pub fn forward_nodes<F>(
    model: &Model,
    inputs: Vec<Tensor4>,
    mut bn_hook: F,
) -> Result<(Vec<Tensor4>, Vec<Vec<LayerCache>>)>
where
    F: FnMut(usize, &BnLayerState, &[Tensor4]) -> Result<Vec<BnApply>>,
{
    let nodes = inputs.len();
    let mut activations = inputs;
    let mut caches: Vec<Vec<LayerCache>> = (0..nodes).map(|_| Vec::new()).collect();
    for layer in &model.layers {
        match layer {
            Layer::Conv(conv) => {
                for (x, cache) in activations.iter_mut().zip(&mut caches) {
                    let y = conv.forward(x)?;
                    cache.push(LayerCache::Conv {
                        input: std::mem::replace(x, y),
                    });
                }
            }
            Layer::Dense(dense) => {
                for (x, cache) in activations.iter_mut().zip(&mut caches) {
                    let y = dense.forward(x)?;
                    cache.push(LayerCache::Dense {
                        input: std::mem::replace(x, y),
                    });
                }
            }
            Layer::Relu => {
                for (x, cache) in activations.iter_mut().zip(&mut caches) {
                    let y = relu_forward(x);
                    cache.push(LayerCache::Relu {
                        input: std::mem::replace(x, y),
                    });
                }
            }
            Layer::GlobalAvgPool => {
                for (x, cache) in activations.iter_mut().zip(&mut caches) {
                    let y = global_avg_pool_forward(x);
                    let old = std::mem::replace(x, y);
                    cache.push(LayerCache::Pool {
                        h: old.h(),
                        w: old.w(),
                    });
                }
            }
            Layer::Bn { state, bn_index } => {
                let applications = bn_hook(*bn_index, state, &activations)?;
                if applications.len() != nodes {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{nodes} statistics applications"),
                        got: format!("{}", applications.len()),
                    });
                }
                for ((x, cache), apply) in
                    activations.iter_mut().zip(&mut caches).zip(applications)
                {
                    let (y, bn_cache) = match apply {
                        BnApply::Plain { stats, indices } => {
                            bn_forward_train(x, state, stats, indices)?
                        }
                        BnApply::Mixed {
                            virtual_stats,
                            virtual_indices,
                            sampled_stats,
                            sampled_indices,
                            mix,
                        } => bn_forward_train_mixed(
                            x,
                            state,
                            virtual_stats,
                            virtual_indices,
                            sampled_stats,
                            sampled_indices,
                            mix,
                        )?,
                        BnApply::Custom { stats, sources } => {
                            bn_forward_train_custom(x, state, stats, sources)?
                        }
                    };
                    *x = y;
                    cache.push(LayerCache::Bn(bn_cache));
                }
            }
        }
    }
    Ok((activations, caches))
}

/// Eval-mode forward: normalization layers use their moving averages.
pub fn forward_eval(model: &Model, x: &Tensor4) -> Result<Tensor4> {
    let mut current = x.clone();
    for layer in &model.layers {
        current = match layer {
            Layer::Conv(conv) => conv.forward(&current)?,
            Layer::Dense(dense) => dense.forward(&current)?,
            Layer::Relu => relu_forward(&current),
            Layer::GlobalAvgPool => global_avg_pool_forward(&current),
            Layer::Bn { state, .. } => bn_forward_eval(&current, state)?,
        };
    }
    Ok(current)
}

/// Virtual-sample context for a single-tensor training forward.
pub struct VdnUse<'a> {
    pub virtual_rows: &'a Tensor4,
    /// None: statistics from the virtual slice only. Some: mix the virtual
    /// statistics with plan-sampled real statistics at this weight.
    pub mixed: Option<f64>,
}

/// Normalization inputs for a single-tensor training forward.
pub struct NormContext<'a> {
    pub plan: Option<&'a SamplingPlan>,
    pub vdn: Option<VdnUse<'a>>,
}

pub struct SingleForward {
    /// Logits over real samples only.
    pub logits: Tensor4,
    pub caches: Vec<LayerCache>,
    pub n_virtual: usize,
    /// Statistics actually applied, per normalization layer.
    pub used_stats: Vec<ChannelStats>,
    /// Full-batch statistics per normalization layer, when requested.
    pub full_stats: Option<Vec<ChannelStats>>,
}

/// Training forward for one tensor: virtual rows prepended when configured,
/// per-layer statistics from the plan and/or the virtual slice.
pub fn forward_single(
    model: &Model,
    x_real: &Tensor4,
    ctx: &NormContext,
    want_full_stats: bool,
) -> Result<SingleForward> {
    let n_virtual = ctx.vdn.as_ref().map_or(0, |v| v.virtual_rows.n());
    let input = match &ctx.vdn {
        Some(v) => prepend_virtual(x_real, v.virtual_rows)?,
        None => x_real.clone(),
    };
    let mut used_stats = vec![None; model.num_bn_layers()];
    let mut full_stats = vec![None; model.num_bn_layers()];
    let (mut outputs, mut caches) = forward_nodes(model, vec![input], |bn_idx, _state, xs| {
        let x = &xs[0];
        let apply = single_bn_apply(x, bn_idx, ctx, n_virtual)?;
        used_stats[bn_idx] = Some(match &apply {
            BnApply::Plain { stats, .. } => stats.clone(),
            BnApply::Mixed {
                virtual_stats,
                sampled_stats,
                mix,
                ..
            } => crate::batchnorm::mix_stats(virtual_stats, sampled_stats, *mix)?,
            BnApply::Custom { stats, .. } => stats.clone(),
        });
        if want_full_stats {
            full_stats[bn_idx] = Some(channel_moments(x, &full_index_set(x))?);
        }
        Ok(vec![apply])
    })?;
    let full_logits = outputs.pop().expect("one node");
    let logits = if n_virtual > 0 {
        full_logits.slice_samples(n_virtual, full_logits.n() - n_virtual)?
    } else {
        full_logits
    };
    Ok(SingleForward {
        logits,
        caches: caches.pop().expect("one node"),
        n_virtual,
        used_stats: used_stats.into_iter().map(|s| s.expect("bn visited")).collect(),
        full_stats: want_full_stats
            .then(|| full_stats.into_iter().map(|s| s.expect("bn visited")).collect()),
    })
}

fn single_bn_apply(
    x: &Tensor4,
    bn_idx: usize,
    ctx: &NormContext,
    n_virtual: usize,
) -> Result<BnApply> {
    let shift = n_virtual * x.h() * x.w();
    let plan_idx = |plan: &SamplingPlan| -> Result<Vec<usize>> {
        let mut idx = plan_indices(plan, bn_idx)?;
        if shift > 0 {
            for p in idx.iter_mut() {
                *p += shift;
            }
        }
        Ok(idx)
    };
    match &ctx.vdn {
        None => {
            let plan = ctx.plan.ok_or(Error::invalid("plan", "missing sampling plan"))?;
            let indices = plan_idx(plan)?;
            let stats = channel_moments(x, &indices)?;
            Ok(BnApply::Plain { stats, indices })
        }
        Some(vdn) => {
            let v_indices = gather_rows(x, 0, n_virtual)?;
            let v_stats = virtual_stats(x, n_virtual)?;
            match vdn.mixed {
                None => Ok(BnApply::Plain {
                    stats: v_stats,
                    indices: v_indices,
                }),
                Some(mix) => {
                    let plan = ctx
                        .plan
                        .ok_or(Error::invalid("plan", "mixed mode needs a sampling plan"))?;
                    let s_indices = plan_idx(plan)?;
                    let s_stats = channel_moments(x, &s_indices)?;
                    Ok(BnApply::Mixed {
                        virtual_stats: v_stats,
                        virtual_indices: v_indices,
                        sampled_stats: s_stats,
                        sampled_indices: s_indices,
                        mix,
                    })
                }
            }
        }
    }
}

/// Per-sample cross-entropy losses and unscaled logits gradient
/// (softmax minus one-hot). The caller applies the 1/N scaling.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(Vec<f64>, Tensor4)> {
    let (n, _, _, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let mut losses = Vec::with_capacity(n);
    let mut d_logits = Tensor4::zeros(n, 1, 1, k);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|j| logits.at(i, 0, 0, j)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + exp_sum.ln();
        losses.push(lse - row[labels[i]]);
        for j in 0..k {
            let softmax = (row[j] - lse).exp();
            *d_logits.at_mut(i, 0, 0, j) = softmax - if j == labels[i] { 1.0 } else { 0.0 };
        }
    }
    Ok((losses, d_logits))
}

pub fn accuracy(logits: &Tensor4, labels: &[usize]) -> f64 {
    let (n, _, _, k) = logits.shape();
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        for j in 1..k {
            if logits.at(i, 0, 0, j) > logits.at(i, 0, 0, best) {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Gradient storage mirroring the model's parameter blocks.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// One (main, bias) pair per layer; empty vectors for parameter-free layers.
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let blocks = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv(conv) => (vec![0.0; conv.weights.len()], vec![0.0; conv.bias.len()]),
                Layer::Dense(dense) => {
                    (vec![0.0; dense.weights.len()], vec![0.0; dense.bias.len()])
                }
                Layer::Bn { state, .. } => {
                    (vec![0.0; state.gamma.len()], vec![0.0; state.beta.len()])
                }
                _ => (Vec::new(), Vec::new()),
            })
            .collect();
        ModelGrads { blocks }
    }
}

/// Lockstep backward. The pool hook turns per-node statistic reductions into
/// the totals each node applies (its own for local statistics, the combined
/// reductions for shared statistics). Parameter gradients always combine
/// across nodes; weight gradients accumulate in global sample order.
pub fn backward_nodes<F>(
    model: &Model,
    caches: &[Vec<LayerCache>],
    d_logits: Vec<Tensor4>,
    mut pool_hook: F,
) -> Result<(ModelGrads, Vec<Tensor4>)>
where
    F: FnMut(usize, &[BnPartials]) -> Result<Vec<BnPartials>>,
{
    let nodes = caches.len();
    let mut grads = ModelGrads::zeros_like(model);
    let mut d_acts = d_logits;
    for (layer_pos, layer) in model.layers.iter().enumerate().rev() {
        match layer {
            Layer::Conv(conv) => {
                let (d_w, d_b) = &mut grads.blocks[layer_pos];
                for node in 0..nodes {
                    let LayerCache::Conv { input } = &caches[node][layer_pos] else {
                        return Err(Error::invalid("cache", "layer cache out of order"));
                    };
                    d_acts[node] = conv.backward(input, &d_acts[node], d_w, d_b)?;
                }
            }
            Layer::Dense(dense) => {
                let (d_w, d_b) = &mut grads.blocks[layer_pos];
                for node in 0..nodes {
                    let LayerCache::Dense { input } = &caches[node][layer_pos] else {
                        return Err(Error::invalid("cache", "layer cache out of order"));
                    };
                    d_acts[node] = dense.backward(input, &d_acts[node], d_w, d_b)?;
                }
            }
            Layer::Relu => {
                for node in 0..nodes {
                    let LayerCache::Relu { input } = &caches[node][layer_pos] else {
                        return Err(Error::invalid("cache", "layer cache out of order"));
                    };
                    d_acts[node] = relu_backward(input, &d_acts[node]);
                }
            }
            Layer::GlobalAvgPool => {
                for node in 0..nodes {
                    let LayerCache::Pool { h, w } = &caches[node][layer_pos] else {
                        return Err(Error::invalid("cache", "layer cache out of order"));
                    };
                    d_acts[node] = global_avg_pool_backward(&d_acts[node], *h, *w);
                }
            }
            Layer::Bn { state, bn_index } => {
                let mut partials = Vec::with_capacity(nodes);
                for node in 0..nodes {
                    let LayerCache::Bn(cache) = &caches[node][layer_pos] else {
                        return Err(Error::invalid("cache", "layer cache out of order"));
                    };
                    let (p, _) = bn_backward_reduce(&d_acts[node], cache, state)?;
                    partials.push(p);
                }
                let param_totals = combine_partials(&partials)?;
                let (d_gamma, d_beta) = &mut grads.blocks[layer_pos];
                for k in 0..d_gamma.len() {
                    d_gamma[k] += param_totals.d_gamma[k];
                    d_beta[k] += param_totals.d_beta[k];
                }
                let totals = pool_hook(*bn_index, &partials)?;
                if totals.len() != nodes {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{nodes} pooled reductions"),
                        got: format!("{}", totals.len()),
                    });
                }
                for node in 0..nodes {
                    let LayerCache::Bn(cache) = &caches[node][layer_pos] else {
                        unreachable!()
                    };
                    d_acts[node] = bn_backward_apply(&d_acts[node], cache, state, &totals[node])?;
                }
            }
        }
    }
    Ok((grads, d_acts))
}

fn sgd_step(model: &mut Model, grads: &ModelGrads, velocity: &mut ModelGrads, lr: f64, momentum: f64) {
    for (layer_pos, layer) in model.layers.iter_mut().enumerate() {
        let (g_main, g_bias) = &grads.blocks[layer_pos];
        let (v_main, v_bias) = &mut velocity.blocks[layer_pos];
        let (p_main, p_bias): (&mut [f64], &mut [f64]) = match layer {
            Layer::Conv(conv) => (&mut conv.weights, &mut conv.bias),
            Layer::Dense(dense) => (&mut dense.weights, &mut dense.bias),
            Layer::Bn { state, .. } => (&mut state.gamma, &mut state.beta),
            _ => continue,
        };
        for ((p, v), g) in p_main.iter_mut().zip(v_main.iter_mut()).zip(g_main) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
        for ((p, v), g) in p_bias.iter_mut().zip(v_bias.iter_mut()).zip(g_bias) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
    }
}

/// Pad a real-rows logits gradient with zero rows for the virtual block.
fn pad_virtual_rows(d_real: &Tensor4, n_virtual: usize) -> Result<Tensor4> {
    if n_virtual == 0 {
        return Ok(d_real.clone());
    }
    let zeros = Tensor4::zeros(n_virtual, d_real.h(), d_real.w(), d_real.c());
    zeros.concat_samples(d_real)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_layer: Vec<(String, f64)>,
    pub input_max_rel: f64,
    pub max_rel: f64,
}

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    // absolute floor keeps finite-difference noise at near-zero entries from
    // registering; real mismatches live at the gradient scale
    let denom = (numeric.abs() + analytic.abs()).max(1e-4);
    (numeric - analytic).abs() / denom
}

/// Central finite differences (step 1e-5) over every parameter and every
/// real input entry, against one analytic forward/backward.
pub fn grad_check(
    model: &Model,
    x: &Tensor4,
    labels: &[usize],
    ctx: &NormContext,
) -> Result<GradCheckReport> {
    let loss_of = |m: &Model, input: &Tensor4| -> Result<f64> {
        let fwd = forward_single(m, input, ctx, false)?;
        let (losses, _) = softmax_cross_entropy(&fwd.logits, labels)?;
        Ok(pairwise_sum(&losses)? / losses.len() as f64)
    };

    let fwd = forward_single(model, x, ctx, false)?;
    let n_real = fwd.logits.n() as f64;
    let (_, mut d_logits) = softmax_cross_entropy(&fwd.logits, labels)?;
    for v in d_logits.data_mut() {
        *v /= n_real;
    }
    let d_full = pad_virtual_rows(&d_logits, fwd.n_virtual)?;
    let (grads, mut d_inputs) =
        backward_nodes(model, std::slice::from_ref(&fwd.caches), vec![d_full], |_, parts| {
            Ok(parts.to_vec())
        })?;
    let d_input = d_inputs.pop().expect("one node");

    let h = 1e-5;
    let mut per_layer = Vec::new();
    let mut max_rel: f64 = 0.0;
    for (layer_pos, layer) in model.layers.iter().enumerate() {
        let (g_main, g_bias) = &grads.blocks[layer_pos];
        if g_main.is_empty() && g_bias.is_empty() {
            continue;
        }
        let mut layer_max: f64 = 0.0;
        for (bias, count) in [(false, g_main.len()), (true, g_bias.len())] {
            for i in 0..count {
                let mut plus = model.clone();
                let mut minus = model.clone();
                perturb_param(&mut plus, layer_pos, bias, i, h);
                perturb_param(&mut minus, layer_pos, bias, i, -h);
                let numeric = (loss_of(&plus, x)? - loss_of(&minus, x)?) / (2.0 * h);
                let analytic = if bias { g_bias[i] } else { g_main[i] };
                layer_max = layer_max.max(rel_err(numeric, analytic));
            }
        }
        per_layer.push((layer.name(layer_pos), layer_max));
        max_rel = max_rel.max(layer_max);
    }

    // input entries: analytic gradient lives at the real rows of d_input
    let row_shift = fwd.n_virtual * x.h() * x.w() * x.c();
    let mut input_max: f64 = 0.0;
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_of(model, &plus)? - loss_of(model, &minus)?) / (2.0 * h);
        let analytic = d_input.data()[row_shift + i];
        input_max = input_max.max(rel_err(numeric, analytic));
    }
    max_rel = max_rel.max(input_max);
    Ok(GradCheckReport {
        per_layer,
        input_max_rel: input_max,
        max_rel,
    })
}

fn perturb_param(model: &mut Model, layer_pos: usize, bias: bool, i: usize, delta: f64) {
    match &mut model.layers[layer_pos] {
        Layer::Conv(conv) => {
            if bias {
                conv.bias[i] += delta;
            } else {
                conv.weights[i] += delta;
            }
        }
        Layer::Dense(dense) => {
            if bias {
                dense.bias[i] += delta;
            } else {
                dense.weights[i] += delta;
            }
        }
        Layer::Bn { state, .. } => {
            if bias {
                state.beta[i] += delta;
            } else {
                state.gamma[i] += delta;
            }
        }
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum NormSetting {
    /// Statistics from a sampling plan over the real batch.
    Strategy(SamplingStrategy),
    /// Statistics from virtual rows; optionally mixed with a plan's sampled
    /// real statistics at the given weight on the virtual side.
    Vdn {
        n_v: usize,
        mixed: Option<(SamplingStrategy, f64)>,
    },
}

impl NormSetting {
    fn plan_strategy(&self) -> Option<SamplingStrategy> {
        match self {
            NormSetting::Strategy(s) => Some(*s),
            NormSetting::Vdn { mixed, .. } => mixed.map(|(s, _)| s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NormSetting::Strategy(s) => format!("{}-{:.4}", s.kind.label(), s.ratio),
            NormSetting::Vdn { n_v, mixed: None } => format!("VDN-{n_v}"),
            NormSetting::Vdn {
                n_v,
                mixed: Some((s, mix)),
            } => format!("{}+VDN-{n_v}-{:.4}-mix{mix}", s.kind.label(), s.ratio),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Moving-average decay (weight on the newest estimate).
    pub decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub norm: NormSetting,
    pub record_errors: bool,
    /// Re-initialize moving averages at each epoch boundary.
    pub reset_moving_each_epoch: bool,
}

impl TrainConfig {
    pub fn basic(epochs: usize, batch: usize, lr: f64, seed: u64, norm: NormSetting) -> Self {
        TrainConfig {
            epochs,
            batch,
            lr,
            momentum: 0.9,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            decay: 0.9,
            epsilon: crate::batchnorm::DEFAULT_EPSILON,
            seed,
            norm,
            record_errors: false,
            reset_moving_each_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub final_val_acc: f64,
    pub diverged: bool,
    pub trace: Option<ErrorTrace>,
    /// The sampling plan used in each completed epoch, when one exists.
    pub plan_epochs: Vec<SamplingPlan>,
    /// Realized per-layer sampling ratios of the first epoch's plan.
    pub realized_ratios: Vec<f64>,
    pub seed: u64,
    pub label: String,
}

pub(crate) enum ExecMode {
    Single,
    Sharded(MicroBnConfig),
}

/// Single-tensor training run.
pub fn train(
    specs: &[LayerSpec],
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_engine(specs, dataset, cfg, ExecMode::Single)
}

pub(crate) fn train_engine(
    specs: &[LayerSpec],
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
    exec: ExecMode,
) -> Result<TrainReport> {
    if cfg.batch == 0 || cfg.batch > dataset.train.n() {
        return Err(Error::invalid(
            "batch",
            format!("must be in [1, {}]", dataset.train.n()),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs", "must be >= 1"));
    }
    if let ExecMode::Sharded(mbn) = &exec {
        mbn.validate()?;
        if mbn.gradient_batch != cfg.batch {
            return Err(Error::invalid(
                "gradient_batch",
                format!("must equal the training batch {}", cfg.batch),
            ));
        }
        if !matches!(cfg.norm, NormSetting::Strategy(s) if s.ratio == 1.0) {
            return Err(Error::invalid(
                "strategy",
                "sharded execution owns its statistics; use the full strategy",
            ));
        }
    }

    let stream = RngStream::new(cfg.seed);
    let mut model = Model::build(
        specs,
        (dataset.train.h(), dataset.train.w(), dataset.train.c()),
        cfg.epsilon,
        cfg.decay,
        &stream,
    )?;
    let mut velocity = ModelGrads::zeros_like(&model);

    // Offline dataset statistics when virtual samples are in play.
    let sampler: Option<VirtualSampler> = match (&exec, &cfg.norm) {
        (ExecMode::Single, NormSetting::Vdn { n_v, .. }) => {
            Some(fit_dataset_stats(std::slice::from_ref(&dataset.train), *n_v)?)
        }
        (ExecMode::Sharded(mbn), _) => match mbn.policy {
            MicroBnPolicy::LocalVdn { n_v, .. } => {
                Some(fit_dataset_stats(std::slice::from_ref(&dataset.train), n_v)?)
            }
            _ => None,
        },
        _ => None,
    };

    let iterations = dataset.train.n() / cfg.batch;
    if iterations == 0 {
        return Err(Error::invalid("batch", "no full batch fits the train split"));
    }
    let plan_strategy = match &exec {
        ExecMode::Single => cfg.norm.plan_strategy(),
        ExecMode::Sharded(_) => None,
    };
    let bn_dims = model.bn_dims(cfg.batch);
    let mut plan: Option<SamplingPlan> = match plan_strategy {
        Some(strategy) => Some(make_plan(strategy, &bn_dims, 0, &stream)?),
        None => None,
    };
    let mut recorder = (cfg.record_errors && matches!(exec, ExecMode::Single))
        .then(|| StatsRecorder::new(model.num_bn_layers()));

    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut plan_epochs: Vec<SamplingPlan> = Vec::new();
    let mut realized_ratios: Vec<f64> = Vec::new();
    let mut diverged = false;
    let mut lr = cfg.lr;

    'epochs: for epoch in 0..cfg.epochs {
        if epoch > 0 {
            if let Some(p) = plan.as_mut() {
                *p = refresh_plan(p, epoch as u64, &stream)?;
            }
            if cfg.reset_moving_each_epoch {
                model.reset_moving();
            }
        }
        if let Some(p) = plan.as_ref() {
            plan_epochs.push(p.clone());
            if epoch == 0 {
                realized_ratios = (0..p.num_layers())
                    .map(|l| p.realized_ratio(l))
                    .collect::<Result<_>>()?;
            }
        }
        if cfg.lr_decay_epochs.contains(&epoch) && epoch > 0 {
            lr *= cfg.lr_decay_factor;
        }

        let order = shuffled_order(dataset.train.n(), epoch as u64, &stream);
        let mut epoch_loss = 0.0;
        for it in 0..iterations {
            let slice = &order[it * cfg.batch..(it + 1) * cfg.batch];
            let (x, labels) = gather_batch(&dataset.train, &dataset.train_labels, slice)?;
            let iteration = epoch * iterations + it;
            match run_step(
                &mut model,
                &x,
                &labels,
                plan.as_ref(),
                sampler.as_ref(),
                cfg,
                &exec,
                &stream,
                epoch as u64,
                iteration,
                recorder.as_mut(),
            ) {
                Ok(Some((loss, grads))) => {
                    epoch_loss += loss;
                    sgd_step(&mut model, &grads, &mut velocity, lr, cfg.momentum);
                }
                Ok(None) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_logits = forward_eval(&model, &dataset.val)?;
        let val_acc = accuracy(&val_logits, &dataset.val_labels);
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / iterations as f64,
            val_acc,
        });
    }

    let final_val_acc = metrics.last().map_or(0.0, |m| m.val_acc);
    Ok(TrainReport {
        metrics,
        final_val_acc,
        diverged,
        trace: recorder.map(|r| r.into_trace()),
        plan_epochs,
        realized_ratios,
        seed: cfg.seed,
        label: match &exec {
            ExecMode::Single => cfg.norm.label(),
            ExecMode::Sharded(mbn) => mbn.label(),
        },
    })
}

fn shuffled_order(n: usize, epoch: u64, stream: &RngStream) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream.substream(epoch, 0, StreamPurpose::Shuffle);
    order.shuffle(&mut rng);
    order
}

fn gather_batch(
    images: &Tensor4,
    labels: &[usize],
    indices: &[usize],
) -> Result<(Tensor4, Vec<usize>)> {
    let (_, h, w, c) = images.shape();
    let stride = h * w * c;
    let mut data = Vec::with_capacity(indices.len() * stride);
    let mut out_labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
        out_labels.push(labels[i]);
    }
    Ok((Tensor4::new(indices.len(), h, w, c, data)?, out_labels))
}

/// One optimizer step. `Ok(None)` flags divergence (non-finite activations
/// or loss); hard errors still propagate.
#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &mut Model,
    x: &Tensor4,
    labels: &[usize],
    plan: Option<&SamplingPlan>,
    sampler: Option<&VirtualSampler>,
    cfg: &TrainConfig,
    exec: &ExecMode,
    stream: &RngStream,
    epoch: u64,
    iteration: usize,
    recorder: Option<&mut StatsRecorder>,
) -> Result<Option<(f64, ModelGrads)>> {
    let step = match exec {
        ExecMode::Single => {
            run_step_single(model, x, labels, plan, sampler, cfg, stream, epoch, iteration, recorder)
        }
        ExecMode::Sharded(mbn) => {
            run_step_sharded(model, x, labels, mbn, sampler, stream, epoch, iteration)
        }
    };
    match step {
        Ok(ok) => Ok(Some(ok)),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step_single(
    model: &mut Model,
    x: &Tensor4,
    labels: &[usize],
    plan: Option<&SamplingPlan>,
    sampler: Option<&VirtualSampler>,
    cfg: &TrainConfig,
    stream: &RngStream,
    epoch: u64,
    iteration: usize,
    recorder: Option<&mut StatsRecorder>,
) -> Result<(f64, ModelGrads)> {
    let virtual_rows = sampler.map(|vs| {
        sample_virtual(
            vs,
            &mut stream.substream(epoch, iteration as u64, StreamPurpose::VirtualSample),
        )
    });
    let mixed = match &cfg.norm {
        NormSetting::Vdn {
            mixed: Some((_, mix)),
            ..
        } => Some(*mix),
        _ => None,
    };
    let ctx = NormContext {
        plan,
        vdn: virtual_rows.as_ref().map(|v| VdnUse {
            virtual_rows: v,
            mixed,
        }),
    };
    let fwd = forward_single(model, x, &ctx, recorder.is_some())?;
    if let Some(rec) = recorder {
        let full = fwd.full_stats.as_ref().expect("requested");
        for (layer, (used, full)) in fwd.used_stats.iter().zip(full).enumerate() {
            rec.record(layer, iteration, used, full)?;
        }
    }
    let (losses, mut d_logits) = softmax_cross_entropy(&fwd.logits, labels)?;
    let loss = pairwise_sum(&losses)? / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "loss" });
    }
    let scale = losses.len() as f64;
    for v in d_logits.data_mut() {
        *v /= scale;
    }
    let d_full = pad_virtual_rows(&d_logits, fwd.n_virtual)?;
    let (grads, _) =
        backward_nodes(model, std::slice::from_ref(&fwd.caches), vec![d_full], |_, parts| {
            Ok(parts.to_vec())
        })?;
    // moving averages follow the statistics actually used
    let mut bn_iter = fwd.used_stats.iter();
    for layer in &mut model.layers {
        if let Layer::Bn { state, .. } = layer {
            update_moving_average(state, bn_iter.next().expect("stats per bn layer"))?;
        }
    }
    Ok((loss, grads))
}

#[allow(clippy::too_many_arguments)]
fn run_step_sharded(
    model: &mut Model,
    x: &Tensor4,
    labels: &[usize],
    mbn: &MicroBnConfig,
    sampler: Option<&VirtualSampler>,
    stream: &RngStream,
    epoch: u64,
    iteration: usize,
) -> Result<(f64, ModelGrads)> {
    let k = mbn.nodes();
    let shards = shard_batch(x, k)?;
    let per_node_real = x.n() / k;
    let n_virtual = match mbn.policy {
        MicroBnPolicy::LocalVdn { n_v, .. } => n_v,
        _ => 0,
    };
    let inputs: Vec<Tensor4> = shards
        .into_iter()
        .enumerate()
        .map(|(node, shard)| match sampler {
            Some(vs) => {
                let mut rng = stream.substream(
                    epoch,
                    (iteration * k + node) as u64,
                    StreamPurpose::VirtualSample,
                );
                prepend_virtual(&shard, &sample_virtual(vs, &mut rng))
            }
            None => Ok(shard),
        })
        .collect::<Result<_>>()?;

    let mut used_stats_per_layer: Vec<Vec<ChannelStats>> = Vec::new();
    let (outputs, caches) = forward_nodes(model, inputs, |_bn_idx, _state, xs| {
        let (applies, used) = sharded_bn_apply(xs, mbn, stream, epoch, n_virtual)?;
        used_stats_per_layer.push(used);
        Ok(applies)
    })?;

    // per-node losses over real rows, combined pairwise across nodes
    let total_real = (per_node_real * k) as f64;
    let mut node_loss_sums = Vec::with_capacity(k);
    let mut d_logits_nodes = Vec::with_capacity(k);
    for (node, logits_full) in outputs.iter().enumerate() {
        let logits = if n_virtual > 0 {
            logits_full.slice_samples(n_virtual, per_node_real)?
        } else {
            logits_full.clone()
        };
        let node_labels = &labels[node * per_node_real..(node + 1) * per_node_real];
        let (losses, mut d_logits) = softmax_cross_entropy(&logits, node_labels)?;
        node_loss_sums.push(pairwise_sum(&losses)?);
        for v in d_logits.data_mut() {
            *v /= total_real;
        }
        d_logits_nodes.push(pad_virtual_rows(&d_logits, n_virtual)?);
    }
    let loss = pairwise_sum(&node_loss_sums)? / total_real;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "loss" });
    }

    let shared_stats = mbn.policy.shares_statistics();
    let (grads, _) = backward_nodes(model, &caches, d_logits_nodes, |_, parts| {
        if shared_stats {
            let combined = combine_partials(parts)?;
            Ok(vec![combined; parts.len()])
        } else {
            Ok(parts.to_vec())
        }
    })?;

    // moving averages: shared statistics update once, local statistics
    // update with the across-node average
    let mut layer_idx = 0usize;
    for layer in &mut model.layers {
        if let Layer::Bn { state, .. } = layer {
            let used = &used_stats_per_layer[layer_idx];
            let stats = if shared_stats {
                used[0].clone()
            } else {
                average_stats(used)?
            };
            update_moving_average(state, &stats)?;
            layer_idx += 1;
        }
    }
    Ok((loss, grads))
}

/// Per-node statistics applications for one normalization layer of a
/// sharded step, plus the statistics each node actually used.
fn sharded_bn_apply(
    xs: &[Tensor4],
    mbn: &MicroBnConfig,
    stream: &RngStream,
    epoch: u64,
    n_virtual: usize,
) -> Result<(Vec<BnApply>, Vec<ChannelStats>)> {
    let mut rng = stream.substream(epoch, 0, StreamPurpose::NodeChoice);
    let node_stats = node_statistics(xs, &mbn.policy, &mut rng)?;
    let mut applies = Vec::with_capacity(xs.len());
    match &mbn.policy {
        MicroBnPolicy::Local => {
            for (x, stats) in xs.iter().zip(&node_stats.per_node) {
                applies.push(BnApply::Plain {
                    stats: stats.clone(),
                    indices: full_index_set(x),
                });
            }
        }
        MicroBnPolicy::SyncFull | MicroBnPolicy::SyncBs { .. } => {
            let chosen = node_stats
                .chosen
                .clone()
                .unwrap_or_else(|| (0..xs.len()).collect());
            let total: usize = chosen.iter().map(|&i| xs[i].positions()).sum();
            for (node, x) in xs.iter().enumerate() {
                let stats = node_stats.per_node[node].clone();
                let indices = if chosen.contains(&node) {
                    full_index_set(x)
                } else {
                    Vec::new()
                };
                let sources = vec![StatSource {
                    indices,
                    weight: 1.0,
                    mean: stats.mean.clone(),
                    count: total,
                }];
                applies.push(BnApply::Custom { stats, sources });
            }
        }
        MicroBnPolicy::LocalVdn { mixed, mix, .. } => {
            for x in xs {
                let v_indices = gather_rows(x, 0, n_virtual)?;
                let v_stats = virtual_stats(x, n_virtual)?;
                if *mixed {
                    let real_indices = gather_rows(x, n_virtual, x.n() - n_virtual)?;
                    let real_stats = channel_moments(x, &real_indices)?;
                    applies.push(BnApply::Mixed {
                        virtual_stats: v_stats,
                        virtual_indices: v_indices,
                        sampled_stats: real_stats,
                        sampled_indices: real_indices,
                        mix: *mix,
                    });
                } else {
                    applies.push(BnApply::Plain {
                        stats: v_stats,
                        indices: v_indices,
                    });
                }
            }
        }
    }
    // statistics as applied (mixing resolved) for moving-average updates
    let used = applies
        .iter()
        .map(|a| match a {
            BnApply::Plain { stats, .. } | BnApply::Custom { stats, .. } => Ok(stats.clone()),
            BnApply::Mixed {
                virtual_stats,
                sampled_stats,
                mix,
                ..
            } => crate::batchnorm::mix_stats(virtual_stats, sampled_stats, *mix),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((applies, used))
}

fn average_stats(per_node: &[ChannelStats]) -> Result<ChannelStats> {
    let k = per_node.len() as f64;
    let c = per_node[0].channels();
    let mut mean = Vec::with_capacity(c);
    let mut variance = Vec::with_capacity(c);
    let mut column = vec![0.0; per_node.len()];
    for ch in 0..c {
        for (i, s) in per_node.iter().enumerate() {
            column[i] = s.mean[ch];
        }
        mean.push(pairwise_sum(&column)? / k);
        for (i, s) in per_node.iter().enumerate() {
            column[i] = s.variance[ch];
        }
        variance.push(pairwise_sum(&column)? / k);
    }
    ChannelStats::new(mean, variance, per_node.iter().map(|s| s.count).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::StrategyKind;
    use data::make_blob_dataset;

    fn toy_specs(classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv3x3 { out_c: 3 },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { out_c: 3 },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out_dim: classes },
        ]
    }

    fn small_input(seed: u64) -> (Tensor4, Vec<usize>) {
        let ds = make_blob_dataset(3, 4, 6, 6, 0.4, seed).unwrap();
        let x = ds.train.slice_samples(0, 4).unwrap();
        let labels = ds.train_labels[0..4].to_vec();
        (x, labels)
    }

    #[test]
    fn dense_only_model_ignores_mode_and_plans() {
        let stream = RngStream::new(3);
        let model = Model::build(
            &[LayerSpec::Dense { out_dim: 3 }],
            (4, 4, 1),
            1e-5,
            0.9,
            &stream,
        )
        .unwrap();
        let (x, _) = small_input(1);
        let x = {
            // reshape to 4x4 inputs
            let ds = make_blob_dataset(3, 4, 4, 4, 0.2, 2).unwrap();
            let _ = x;
            ds.train.slice_samples(0, 4).unwrap()
        };
        let eval = forward_eval(&model, &x).unwrap();
        let ctx = NormContext { plan: None, vdn: None };
        let train_fwd = forward_single(&model, &x, &ctx, false).unwrap();
        assert_eq!(eval, train_fwd.logits);
    }

    #[test]
    fn softmax_ce_matches_direct_formula() {
        let logits = Tensor4::new(2, 1, 1, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let (losses, d) = softmax_cross_entropy(&logits, &[1, 2]).unwrap();
        for (i, label) in [1usize, 2].iter().enumerate() {
            let row: Vec<f64> = (0..3).map(|j| logits.at(i, 0, 0, j)).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let expected = z.ln() - row[*label];
            assert!((losses[i] - expected).abs() < 1e-12);
            for j in 0..3 {
                let softmax = row[j].exp() / z;
                let want = softmax - if j == *label { 1.0 } else { 0.0 };
                assert!((d.at(i, 0, 0, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_model_gradients() {
        let stream = RngStream::new(5);
        let model = Model::build(&toy_specs(3), (6, 6, 1), 1e-5, 0.9, &stream).unwrap();
        let (x, _) = small_input(7);
        let plan = make_plan(
            SamplingStrategy::full(),
            &model.bn_dims(4),
            0,
            &stream,
        )
        .unwrap();
        let ctx = NormContext {
            plan: Some(&plan),
            vdn: None,
        };
        let fwd = forward_single(&model, &x, &ctx, false).unwrap();
        let zeros = Tensor4::zeros(4, 1, 1, 3);
        let (grads, _) =
            backward_nodes(&model, std::slice::from_ref(&fwd.caches), vec![zeros], |_, p| {
                Ok(p.to_vec())
            })
            .unwrap();
        for (a, b) in &grads.blocks {
            assert!(a.iter().all(|&v| v == 0.0));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn train_mode_with_forced_moving_stats_equals_eval() {
        let stream = RngStream::new(9);
        let mut model = Model::build(&toy_specs(3), (6, 6, 1), 1e-5, 0.9, &stream).unwrap();
        let (x, _) = small_input(11);
        let plan = make_plan(SamplingStrategy::full(), &model.bn_dims(4), 0, &stream).unwrap();
        let ctx = NormContext {
            plan: Some(&plan),
            vdn: None,
        };
        // first pass records the used (full) statistics
        let fwd = forward_single(&model, &x, &ctx, false).unwrap();
        let mut stats_iter = fwd.used_stats.iter();
        for layer in &mut model.layers {
            if let Layer::Bn { state, .. } = layer {
                update_moving_average(state, stats_iter.next().unwrap()).unwrap();
            }
        }
        let eval = forward_eval(&model, &x).unwrap();
        let train_again = forward_single(&model, &x, &ctx, false).unwrap();
        assert_eq!(eval, train_again.logits);
    }

    #[test]
    fn grad_check_dense_only_model() {
        let stream = RngStream::new(13);
        let model = Model::build(
            &[LayerSpec::Dense { out_dim: 3 }],
            (4, 4, 1),
            1e-5,
            0.9,
            &stream,
        )
        .unwrap();
        let ds = make_blob_dataset(3, 4, 4, 4, 0.3, 5).unwrap();
        let x = ds.train.slice_samples(0, 4).unwrap();
        let labels = ds.train_labels[0..4].to_vec();
        let ctx = NormContext { plan: None, vdn: None };
        let report = grad_check(&model, &x, &labels, &ctx).unwrap();
        assert!(report.max_rel < 1e-7, "max rel {}", report.max_rel);
    }

    #[test]
    fn grad_check_bn_full_and_sampled() {
        let stream = RngStream::new(17);
        let model = Model::build(&toy_specs(3), (6, 6, 1), 1e-5, 0.9, &stream).unwrap();
        let (x, labels) = small_input(19);
        for (kind, ratio) in [(StrategyKind::Full, 1.0), (StrategyKind::Bs, 0.25)] {
            let strategy = SamplingStrategy::new(kind, ratio).unwrap();
            let plan = make_plan(strategy, &model.bn_dims(4), 0, &stream).unwrap();
            let ctx = NormContext {
                plan: Some(&plan),
                vdn: None,
            };
            let report = grad_check(&model, &x, &labels, &ctx).unwrap();
            assert!(
                report.max_rel < 1e-4,
                "{kind:?} max rel {}",
                report.max_rel
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_loss_constant() {
        // full-batch setup: with frozen parameters the per-epoch batch
        // statistics are identical, so the loss must not move at all
        let ds = make_blob_dataset(3, 8, 6, 6, 0.3, 21).unwrap();
        let cfg = TrainConfig::basic(
            3,
            ds.train.n(),
            0.0,
            1,
            NormSetting::Strategy(SamplingStrategy::full()),
        );
        let report = train(&toy_specs(3), &ds, &cfg).unwrap();
        assert!(!report.diverged);
        let first = report.metrics[0].train_loss;
        for m in &report.metrics {
            assert_eq!(m.train_loss.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = make_blob_dataset(3, 8, 6, 6, 0.3, 23).unwrap();
        let strategy = SamplingStrategy::new(StrategyKind::Bs, 0.5).unwrap();
        let mut cfg = TrainConfig::basic(2, 8, 0.1, 7, NormSetting::Strategy(strategy));
        cfg.record_errors = true;
        let a = train(&toy_specs(3), &ds, &cfg).unwrap();
        let b = train(&toy_specs(3), &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plans_are_frozen_within_an_epoch_and_refreshed_across() {
        let ds = make_blob_dataset(3, 8, 6, 6, 0.3, 29).unwrap();
        let strategy = SamplingStrategy::new(StrategyKind::Bs, 0.5).unwrap();
        let cfg = TrainConfig::basic(3, 8, 0.05, 3, NormSetting::Strategy(strategy));
        let report = train(&toy_specs(3), &ds, &cfg).unwrap();
        assert_eq!(report.plan_epochs.len(), 3);
        for (epoch, plan) in report.plan_epochs.iter().enumerate() {
            assert_eq!(plan.epoch(), epoch as u64);
        }
    }

    #[test]
    fn vdn_pure_and_mixed_training_run() {
        let ds = make_blob_dataset(3, 8, 6, 6, 0.3, 31).unwrap();
        let pure = TrainConfig::basic(
            2,
            8,
            0.05,
            5,
            NormSetting::Vdn { n_v: 2, mixed: None },
        );
        let report = train(&toy_specs(3), &ds, &pure).unwrap();
        assert!(!report.diverged);

        let strategy = SamplingStrategy::new(StrategyKind::Fs, 0.25).unwrap();
        let mixed = TrainConfig::basic(
            2,
            8,
            0.05,
            5,
            NormSetting::Vdn {
                n_v: 2,
                mixed: Some((strategy, 0.5)),
            },
        );
        let report = train(&toy_specs(3), &ds, &mixed).unwrap();
        assert!(!report.diverged);
    }

    #[test]
    fn virtual_rows_receive_zero_loss_gradient() {
        let d_real = Tensor4::from_fn(2, 1, 1, 3, |n, _, _, c| (n * 3 + c) as f64 + 1.0);
        let padded = pad_virtual_rows(&d_real, 2).unwrap();
        assert_eq!(padded.n(), 4);
        for p in 0..2 {
            for k in 0..3 {
                assert_eq!(padded.value_at(p, k), 0.0);
            }
        }
        assert_eq!(padded.slice_samples(2, 2).unwrap(), d_real);
    }
}
