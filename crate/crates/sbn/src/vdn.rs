//! Virtual dataset normalization: offline per-channel dataset statistics,
//! per-iteration Gaussian virtual samples, input concatenation, and
//! statistics over the virtual slice.

use crate::error::{Error, Result};
use crate::tensor::{channel_moments, gather_rows, ChannelStats, Tensor4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Offline dataset statistics plus the virtual-sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSampler {
    pub dataset_mean: Vec<f64>,
    pub dataset_std: Vec<f64>,
    pub n_v: usize,
    /// (h, w, c) of the network inputs the sampler generates.
    pub input_dims: (usize, usize, usize),
}

impl VirtualSampler {
    /// Persist to a small JSON sidecar so fitting runs once.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sampler serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid("sampler sidecar", e.to_string()))
    }
}

/// Per-channel mean and standard deviation over every pixel of every sample,
/// in one streaming pass with per-batch pairwise partial sums.
pub fn fit_dataset_stats(batches: &[Tensor4], n_v: usize) -> Result<VirtualSampler> {
    if batches.is_empty() {
        return Err(Error::EmptyReduction);
    }
    if n_v == 0 {
        return Err(Error::invalid("n_v", "must be >= 1"));
    }
    let (_, h, w, c) = batches[0].shape();
    let mut total = 0usize;
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    let mut scratch = Vec::new();
    for batch in batches {
        let (_, bh, bw, bc) = batch.shape();
        if (bh, bw, bc) != (h, w, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("(_, {h}, {w}, {c})"),
                got: format!("(_, {bh}, {bw}, {bc})"),
            });
        }
        let m = batch.positions();
        total += m;
        for k in 0..c {
            scratch.clear();
            scratch.extend((0..m).map(|p| batch.value_at(p, k)));
            sum[k] += crate::tensor::pairwise_sum(&scratch)?;
            for v in scratch.iter_mut() {
                *v *= *v;
            }
            sum_sq[k] += crate::tensor::pairwise_sum(&scratch)?;
        }
    }
    let count = total as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| (sq / count - mu * mu).max(0.0).sqrt())
        .collect();
    Ok(VirtualSampler {
        dataset_mean: mean,
        dataset_std: std,
        n_v,
        input_dims: (h, w, c),
    })
}

/// Fresh (n_v, h, w, c) tensor of independent Gaussians matching the
/// dataset's per-channel moments. Zero std collapses to the mean exactly.
pub fn sample_virtual(vs: &VirtualSampler, rng: &mut ChaCha8Rng) -> Tensor4 {
    let (h, w, c) = vs.input_dims;
    Tensor4::from_fn(vs.n_v, h, w, c, |_, _, _, ci| {
        let z: f64 = StandardNormal.sample(rng);
        vs.dataset_mean[ci] + vs.dataset_std[ci] * z
    })
}

/// Concatenate along N with the virtual rows first.
pub fn prepend_virtual(real: &Tensor4, virtual_rows: &Tensor4) -> Result<Tensor4> {
    virtual_rows.concat_samples(real)
}

/// Statistics over the leading n_v samples' full feature maps.
pub fn virtual_stats(x_with_virtual: &Tensor4, n_v: usize) -> Result<ChannelStats> {
    if n_v == 0 || n_v > x_with_virtual.n() {
        return Err(Error::Oversampling {
            requested: n_v,
            available: x_with_virtual.n(),
        });
    }
    channel_moments(x_with_virtual, &gather_rows(x_with_virtual, 0, n_v)?)
}
