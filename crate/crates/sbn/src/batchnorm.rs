//! The normalization layer: forward with full, sampled, or mixed statistics,
//! the exact backward pass for sampled statistics, and moving-average
//! tracking for eval mode.
//!
//! Backward-pass contract: the per-channel reductions (d_beta, d_gamma, and
//! the statistic terms) always run over all m = N*H*W points, whatever subset
//! produced the statistics. Only the statistic branches of d_input are
//! restricted to the contributing set, scaled by 1/s for that set.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, ChannelStats, Tensor4};

/// Learnable scale/shift plus moving-average state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    /// Weight on the newest estimate when updating the moving average.
    pub decay: f64,
    pub initialized: bool,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

impl BnLayerState {
    pub fn new(channels: usize, epsilon: f64, decay: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::invalid("epsilon", format!("must be > 0, got {epsilon}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid("decay", format!("must be in (0, 1], got {decay}")));
        }
        Ok(BnLayerState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon,
            moving_mean: vec![0.0; channels],
            moving_var: vec![0.0; channels],
            decay,
            initialized: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Drop the moving average so the next update re-initializes it.
    pub fn reset_moving(&mut self) {
        self.moving_mean.iter_mut().for_each(|v| *v = 0.0);
        self.moving_var.iter_mut().for_each(|v| *v = 0.0);
        self.initialized = false;
    }
}

/// One statistics source: which positions contributed, with what weight,
/// that source's own per-channel mean, and its divisor count. A plain
/// sampled forward has one source of weight 1; a mixed forward has two.
#[derive(Debug, Clone)]
pub struct StatSource {
    pub indices: Vec<usize>,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Everything the backward pass needs from one training forward.
#[derive(Debug, Clone)]
pub struct BnForwardCache {
    pub input: Tensor4,
    pub x_hat: Tensor4,
    /// The statistics actually applied in normalization.
    pub stats: ChannelStats,
    pub sources: Vec<StatSource>,
}

#[derive(Debug, Clone)]
pub struct BnGradients {
    pub d_input: Tensor4,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Per-channel partial reductions over one tensor's m points. For a
/// single-tensor backward these are the full reductions; in a multi-node
/// setting partials from disjoint shards combine pairwise.
#[derive(Debug, Clone)]
pub struct BnPartials {
    pub d_beta: Vec<f64>,
    pub d_gamma: Vec<f64>,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}

/// Operand lengths of every backward reduction, for structural checks.
#[derive(Debug, Clone, Default)]
pub struct BnBackwardStats {
    pub reduction_lengths: Vec<usize>,
}

fn check_channels(state: &BnLayerState, c: usize) -> Result<()> {
    if state.channels() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("{c} channels"),
            got: format!("{}", state.channels()),
        });
    }
    Ok(())
}

fn normalize(
    x: &Tensor4,
    mean: &[f64],
    variance: &[f64],
    state: &BnLayerState,
    mut x_hat_out: Option<&mut Tensor4>,
) -> Tensor4 {
    let (_, _, _, c) = x.shape();
    let m = x.positions();
    let mut y = Tensor4::zeros(x.n(), x.h(), x.w(), c);
    for k in 0..c {
        let inv_std = 1.0 / (variance[k] + state.epsilon).sqrt();
        let (g, b, mu) = (state.gamma[k], state.beta[k], mean[k]);
        for p in 0..m {
            let xh = (x.value_at(p, k) - mu) * inv_std;
            if let Some(xh_out) = x_hat_out.as_deref_mut() {
                *xh_out.value_at_mut(p, k) = xh;
            }
            *y.value_at_mut(p, k) = g * xh + b;
        }
    }
    y
}

/// Training forward with caller-assembled statistics and sources. Used when
/// the contributing set spans more than this tensor (synchronized shards):
/// a source's count is the global divisor and its indices are only the
/// positions that live in this tensor.
pub fn bn_forward_train_custom(
    x: &Tensor4,
    state: &BnLayerState,
    stats: ChannelStats,
    sources: Vec<StatSource>,
) -> Result<(Tensor4, BnForwardCache)> {
    let c = x.c();
    check_channels(state, c)?;
    if stats.channels() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("{c} channels"),
            got: format!("{}", stats.channels()),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "normalization input",
        });
    }
    let mut x_hat = Tensor4::zeros(x.n(), x.h(), x.w(), c);
    let y = normalize(x, &stats.mean, &stats.variance, state, Some(&mut x_hat));
    let cache = BnForwardCache {
        input: x.clone(),
        x_hat,
        stats,
        sources,
    };
    Ok((y, cache))
}

/// Training forward with statistics estimated from `indices` of `x`.
///
/// Every position is normalized with those statistics; the cache keeps the
/// contributing set for the backward pass.
pub fn bn_forward_train(
    x: &Tensor4,
    state: &BnLayerState,
    stats: ChannelStats,
    indices: Vec<usize>,
) -> Result<(Tensor4, BnForwardCache)> {
    if stats.count != indices.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("stats.count == {}", indices.len()),
            got: format!("{}", stats.count),
        });
    }
    let source = StatSource {
        weight: 1.0,
        mean: stats.mean.clone(),
        count: indices.len(),
        indices,
    };
    bn_forward_train_custom(x, state, stats, vec![source])
}

/// Training forward with a linear mix of two statistics sources
/// (typically virtual rows and a sampled real subset).
pub fn bn_forward_train_mixed(
    x: &Tensor4,
    state: &BnLayerState,
    virtual_stats: ChannelStats,
    virtual_indices: Vec<usize>,
    sampled_stats: ChannelStats,
    sampled_indices: Vec<usize>,
    mix: f64,
) -> Result<(Tensor4, BnForwardCache)> {
    let mixed = mix_stats(&virtual_stats, &sampled_stats, mix)?;
    let sources = vec![
        StatSource {
            weight: mix,
            mean: virtual_stats.mean,
            count: virtual_indices.len(),
            indices: virtual_indices,
        },
        StatSource {
            weight: 1.0 - mix,
            mean: sampled_stats.mean,
            count: sampled_indices.len(),
            indices: sampled_indices,
        },
    ];
    bn_forward_train_custom(x, state, mixed, sources)
}

/// Eval-mode forward: normalize with the recorded moving average.
pub fn bn_forward_eval(x: &Tensor4, state: &BnLayerState) -> Result<Tensor4> {
    check_channels(state, x.c())?;
    if !state.initialized {
        return Err(Error::MovingStatsUninitialized);
    }
    Ok(normalize(x, &state.moving_mean, &state.moving_var, state, None))
}

/// Fold a new estimate into the moving average. The first call seeds the
/// average with the estimate itself; later calls weight the new estimate
/// by the decay rate.
pub fn update_moving_average(state: &mut BnLayerState, stats: &ChannelStats) -> Result<()> {
    check_channels(state, stats.channels())?;
    if !stats.is_finite() {
        return Err(Error::NonFinite {
            context: "moving-average update",
        });
    }
    if !state.initialized {
        state.moving_mean.copy_from_slice(&stats.mean);
        state.moving_var.copy_from_slice(&stats.variance);
        state.initialized = true;
        return Ok(());
    }
    let a = state.decay;
    for k in 0..state.channels() {
        state.moving_mean[k] = a * stats.mean[k] + (1.0 - a) * state.moving_mean[k];
        state.moving_var[k] = a * stats.variance[k] + (1.0 - a) * state.moving_var[k];
    }
    Ok(())
}

/// Linear mix of two statistics: mix * virtual + (1 - mix) * sampled,
/// applied to mean and variance independently.
pub fn mix_stats(virtual_stats: &ChannelStats, sampled: &ChannelStats, mix: f64) -> Result<ChannelStats> {
    if virtual_stats.channels() != sampled.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", virtual_stats.channels()),
            got: format!("{}", sampled.channels()),
        });
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid("mix", format!("must be in [0, 1], got {mix}")));
    }
    let mean = virtual_stats
        .mean
        .iter()
        .zip(&sampled.mean)
        .map(|(v, s)| mix * v + (1.0 - mix) * s)
        .collect();
    let variance = virtual_stats
        .variance
        .iter()
        .zip(&sampled.variance)
        .map(|(v, s)| mix * v + (1.0 - mix) * s)
        .collect();
    ChannelStats::new(mean, variance, virtual_stats.count + sampled.count)
}

/// Per-channel partial reductions over this tensor's m points. All four
/// reductions run over the full tensor regardless of the sampled set.
pub fn bn_backward_reduce(
    d_out: &Tensor4,
    cache: &BnForwardCache,
    state: &BnLayerState,
) -> Result<(BnPartials, BnBackwardStats)> {
    if d_out.shape() != cache.input.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", cache.input.shape()),
            got: format!("{:?}", d_out.shape()),
        });
    }
    let c = d_out.c();
    check_channels(state, c)?;
    let m = d_out.positions();
    let mut partials = BnPartials {
        d_beta: Vec::with_capacity(c),
        d_gamma: Vec::with_capacity(c),
        d_mean: Vec::with_capacity(c),
        d_var: Vec::with_capacity(c),
    };
    let mut stats = BnBackwardStats::default();
    let mut scratch = vec![0.0; m];
    for k in 0..c {
        let inv_std = 1.0 / (cache.stats.variance[k] + state.epsilon).sqrt();
        let neg_half_inv3 = -0.5 * inv_std * inv_std * inv_std;
        let g = state.gamma[k];
        let mu = cache.stats.mean[k];

        for p in 0..m {
            scratch[p] = d_out.value_at(p, k);
        }
        partials.d_beta.push(pairwise_sum(&scratch)?);
        stats.reduction_lengths.push(m);

        for p in 0..m {
            scratch[p] = d_out.value_at(p, k) * cache.x_hat.value_at(p, k);
        }
        partials.d_gamma.push(pairwise_sum(&scratch)?);
        stats.reduction_lengths.push(m);

        for p in 0..m {
            scratch[p] = d_out.value_at(p, k) * g * (-inv_std);
        }
        partials.d_mean.push(pairwise_sum(&scratch)?);
        stats.reduction_lengths.push(m);

        for p in 0..m {
            scratch[p] =
                d_out.value_at(p, k) * g * (cache.input.value_at(p, k) - mu) * neg_half_inv3;
        }
        partials.d_var.push(pairwise_sum(&scratch)?);
        stats.reduction_lengths.push(m);
    }
    Ok((partials, stats))
}

/// Combine partial reductions from disjoint shards, pairwise per channel.
pub fn combine_partials(parts: &[BnPartials]) -> Result<BnPartials> {
    if parts.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let c = parts[0].d_beta.len();
    let mut out = BnPartials {
        d_beta: Vec::with_capacity(c),
        d_gamma: Vec::with_capacity(c),
        d_mean: Vec::with_capacity(c),
        d_var: Vec::with_capacity(c),
    };
    let mut column = vec![0.0; parts.len()];
    for k in 0..c {
        for (field, dst) in [
            (0usize, &mut out.d_beta),
            (1, &mut out.d_gamma),
            (2, &mut out.d_mean),
            (3, &mut out.d_var),
        ] {
            for (i, p) in parts.iter().enumerate() {
                column[i] = match field {
                    0 => p.d_beta[k],
                    1 => p.d_gamma[k],
                    2 => p.d_mean[k],
                    _ => p.d_var[k],
                };
            }
            dst.push(pairwise_sum(&column)?);
        }
    }
    Ok(out)
}

/// Input gradient for one tensor given the (possibly globally combined)
/// statistic reductions. Statistic branches apply only to positions inside
/// each cached source, with that source's weight, divisor, and mean.
pub fn bn_backward_apply(
    d_out: &Tensor4,
    cache: &BnForwardCache,
    state: &BnLayerState,
    totals: &BnPartials,
) -> Result<Tensor4> {
    if d_out.shape() != cache.input.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", cache.input.shape()),
            got: format!("{:?}", d_out.shape()),
        });
    }
    let c = d_out.c();
    let m = d_out.positions();
    let mut d_input = Tensor4::zeros(d_out.n(), d_out.h(), d_out.w(), c);
    for k in 0..c {
        let inv_std = 1.0 / (cache.stats.variance[k] + state.epsilon).sqrt();
        let g = state.gamma[k];
        for p in 0..m {
            *d_input.value_at_mut(p, k) = d_out.value_at(p, k) * g * inv_std;
        }
        for source in &cache.sources {
            let s = source.count as f64;
            let mean_coef = totals.d_mean[k] * source.weight / s;
            let var_coef = totals.d_var[k] * source.weight * 2.0 / s;
            let mu_src = source.mean[k];
            for &p in &source.indices {
                *d_input.value_at_mut(p, k) +=
                    mean_coef + var_coef * (cache.input.value_at(p, k) - mu_src);
            }
        }
    }
    Ok(d_input)
}

/// Full backward pass for a single tensor.
pub fn bn_backward(
    d_out: &Tensor4,
    cache: &BnForwardCache,
    state: &BnLayerState,
) -> Result<BnGradients> {
    Ok(bn_backward_with_stats(d_out, cache, state)?.0)
}

/// Backward pass that also reports every reduction's operand length.
pub fn bn_backward_with_stats(
    d_out: &Tensor4,
    cache: &BnForwardCache,
    state: &BnLayerState,
) -> Result<(BnGradients, BnBackwardStats)> {
    let (partials, stats) = bn_backward_reduce(d_out, cache, state)?;
    let d_input = bn_backward_apply(d_out, cache, state, &partials)?;
    Ok((
        BnGradients {
            d_input,
            d_gamma: partials.d_gamma,
            d_beta: partials.d_beta,
        },
        stats,
    ))
}
