//! Simulated multi-node normalization with tiny per-node statistic batches.
//!
//! A gradient batch is split into K equal contiguous shards ("nodes").
//! Normalization statistics come from one of four policies: each node's own
//! shard, an exact synchronization across all nodes, a synchronization over
//! a per-epoch random subset of nodes, or per-node virtual samples.
//!
//! Synchronized statistics are pooled with shard-aligned pairwise partial
//! reductions: for a power-of-two node count the pooled numbers are
//! bit-identical to a single-tensor computation over the whole batch.

use crate::error::{Error, Result};
use crate::net::{train_engine, ExecMode, LayerSpec, TrainConfig, TrainReport};
use crate::net::data::SyntheticDataset;
use crate::tensor::{channel_moments, full_index_set, pairwise_sum, ChannelStats, Tensor4};
use crate::vdn::virtual_stats;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MicroBnPolicy {
    /// Each node normalizes with its own shard statistics.
    Local,
    /// All nodes share exactly pooled statistics over every shard.
    SyncFull,
    /// All nodes share statistics pooled over `k_nodes` nodes chosen
    /// uniformly once per epoch.
    SyncBs { k_nodes: usize },
    /// Each node prepends its own virtual rows; statistics come from the
    /// virtual slice alone or mixed with the node's real rows.
    LocalVdn { n_v: usize, mixed: bool, mix: f64 },
}

impl MicroBnPolicy {
    /// Whether every node normalizes with the same statistics.
    pub fn shares_statistics(&self) -> bool {
        matches!(self, MicroBnPolicy::SyncFull | MicroBnPolicy::SyncBs { .. })
    }

    pub fn label(&self) -> String {
        match self {
            MicroBnPolicy::Local => "local".into(),
            MicroBnPolicy::SyncFull => "sync_full".into(),
            MicroBnPolicy::SyncBs { k_nodes } => format!("sync_bs{k_nodes}"),
            MicroBnPolicy::LocalVdn { n_v, mixed, .. } => {
                if *mixed {
                    format!("local_vdn{n_v}_mixed")
                } else {
                    format!("local_vdn{n_v}")
                }
            }
        }
    }
}

/// (gradient batch, statistic batch) pair plus the normalization policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroBnConfig {
    pub gradient_batch: usize,
    pub statistic_batch: usize,
    pub policy: MicroBnPolicy,
}

impl MicroBnConfig {
    pub fn nodes(&self) -> usize {
        self.gradient_batch / self.statistic_batch
    }

    pub fn validate(&self) -> Result<()> {
        if self.statistic_batch == 0 || self.gradient_batch % self.statistic_batch != 0 {
            return Err(Error::invalid(
                "statistic_batch",
                format!("must divide gradient_batch {}", self.gradient_batch),
            ));
        }
        let k = self.nodes();
        match self.policy {
            MicroBnPolicy::SyncBs { k_nodes } => {
                if k_nodes == 0 || k_nodes > k {
                    return Err(Error::invalid(
                        "k_nodes",
                        format!("must be in [1, {k}], got {k_nodes}"),
                    ));
                }
            }
            MicroBnPolicy::LocalVdn { n_v, mix, .. } => {
                if n_v == 0 {
                    return Err(Error::invalid("n_v", "must be >= 1"));
                }
                if !(0.0..=1.0).contains(&mix) {
                    return Err(Error::invalid("mix", format!("must be in [0, 1], got {mix}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "{}-({}, {})",
            self.policy.label(),
            self.gradient_batch,
            self.statistic_batch
        )
    }
}

/// Split along N into K equal contiguous shards, order preserving.
pub fn shard_batch(x: &Tensor4, k: usize) -> Result<Vec<Tensor4>> {
    if k == 0 || x.n() % k != 0 {
        return Err(Error::invalid(
            "nodes",
            format!("{k} does not divide batch {}", x.n()),
        ));
    }
    let per = x.n() / k;
    (0..k).map(|i| x.slice_samples(i * per, per)).collect()
}

/// Exactly pooled per-channel statistics over the listed shards: partial
/// pairwise sums per shard, combined pairwise across shards, two passes.
pub fn pooled_moments(shards: &[Tensor4], nodes: &[usize]) -> Result<ChannelStats> {
    if nodes.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let c = shards[nodes[0]].c();
    let total: usize = nodes.iter().map(|&i| shards[i].positions()).sum();
    let mut mean = Vec::with_capacity(c);
    let mut variance = Vec::with_capacity(c);
    let mut scratch = Vec::new();
    let mut partials = vec![0.0; nodes.len()];
    for k in 0..c {
        for (slot, &i) in nodes.iter().enumerate() {
            let shard = &shards[i];
            scratch.clear();
            scratch.extend((0..shard.positions()).map(|p| shard.value_at(p, k)));
            partials[slot] = pairwise_sum(&scratch)?;
        }
        let mu = pairwise_sum(&partials)? / total as f64;
        for (slot, &i) in nodes.iter().enumerate() {
            let shard = &shards[i];
            scratch.clear();
            scratch.extend((0..shard.positions()).map(|p| {
                let d = shard.value_at(p, k) - mu;
                d * d
            }));
            partials[slot] = pairwise_sum(&scratch)?;
        }
        let var = pairwise_sum(&partials)? / total as f64;
        mean.push(mu);
        variance.push(var.max(0.0));
    }
    let stats = ChannelStats::new(mean, variance, total)?;
    debug_assert!({
        let check = pool_moments(
            &nodes
                .iter()
                .map(|&i| moment_triple(&shards[i]))
                .collect::<Vec<_>>(),
        )?;
        stats
            .mean
            .iter()
            .zip(&check.mean)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
            && stats
                .variance
                .iter()
                .zip(&check.variance)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
    });
    Ok(stats)
}

/// (count, per-channel sum, per-channel sum of squares) of one shard.
pub fn moment_triple(shard: &Tensor4) -> (usize, Vec<f64>, Vec<f64>) {
    let c = shard.c();
    let m = shard.positions();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    for p in 0..m {
        for k in 0..c {
            let v = shard.value_at(p, k);
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    (m, sum, sum_sq)
}

/// Two-moment pooling from per-node (count, sum, sum of squares).
pub fn pool_moments(parts: &[(usize, Vec<f64>, Vec<f64>)]) -> Result<ChannelStats> {
    if parts.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let c = parts[0].1.len();
    let total: usize = parts.iter().map(|(m, _, _)| m).sum();
    let tf = total as f64;
    let mut mean = Vec::with_capacity(c);
    let mut variance = Vec::with_capacity(c);
    for k in 0..c {
        let sum: f64 = parts.iter().map(|(_, s, _)| s[k]).sum();
        let sum_sq: f64 = parts.iter().map(|(_, _, q)| q[k]).sum();
        let mu = sum / tf;
        mean.push(mu);
        variance.push((sum_sq / tf - mu * mu).max(0.0));
    }
    ChannelStats::new(mean, variance, total)
}

/// Per-node statistics under one policy, plus the chosen node subset for
/// the synchronized-sampling policy.
#[derive(Debug, Clone)]
pub struct NodeStats {
    pub per_node: Vec<ChannelStats>,
    pub chosen: Option<Vec<usize>>,
}

/// Statistics each node will normalize with.
///
/// The generator seeds the node choice for the sampled synchronization;
/// callers that refresh per epoch pass the epoch-keyed substream.
pub fn node_statistics(
    shards: &[Tensor4],
    policy: &MicroBnPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<NodeStats> {
    if shards.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let k = shards.len();
    match policy {
        MicroBnPolicy::Local => {
            let per_node = shards
                .iter()
                .map(|s| channel_moments(s, &full_index_set(s)))
                .collect::<Result<Vec<_>>>()?;
            Ok(NodeStats {
                per_node,
                chosen: None,
            })
        }
        MicroBnPolicy::SyncFull => {
            let all: Vec<usize> = (0..k).collect();
            let pooled = pooled_moments(shards, &all)?;
            Ok(NodeStats {
                per_node: vec![pooled; k],
                chosen: Some(all),
            })
        }
        MicroBnPolicy::SyncBs { k_nodes } => {
            if *k_nodes == 0 || *k_nodes > k {
                return Err(Error::invalid(
                    "k_nodes",
                    format!("must be in [1, {k}], got {k_nodes}"),
                ));
            }
            let mut chosen = rand::seq::index::sample(rng, k, *k_nodes).into_vec();
            chosen.sort_unstable();
            let pooled = pooled_moments(shards, &chosen)?;
            Ok(NodeStats {
                per_node: vec![pooled; k],
                chosen: Some(chosen),
            })
        }
        MicroBnPolicy::LocalVdn { n_v, mixed, mix } => {
            let per_node = shards
                .iter()
                .map(|s| {
                    let v_stats = virtual_stats(s, *n_v)?;
                    if *mixed {
                        let real: Vec<usize> = (n_v * s.h() * s.w()..s.positions()).collect();
                        let real_stats = channel_moments(s, &real)?;
                        crate::batchnorm::mix_stats(&v_stats, &real_stats, *mix)
                    } else {
                        Ok(v_stats)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NodeStats {
                per_node,
                chosen: None,
            })
        }
    }
}

/// Train with the batch sharded across simulated nodes: gradients
/// accumulate across all shards into one optimizer step per batch,
/// normalization follows the policy.
pub fn run_microbn(
    specs: &[LayerSpec],
    dataset: &SyntheticDataset,
    mbn: &MicroBnConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_engine(specs, dataset, cfg, ExecMode::Sharded(*mbn))
}
