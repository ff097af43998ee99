//! Wall-clock benchmark of the statistics kernel: full index set versus a
//! sampled one, medians over repetitions, with in-run correctness
//! cross-checks so timings never cover wrong results.

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamPurpose};
use crate::sampling::{make_plan, plan_indices, SamplingStrategy};
use crate::tensor::{channel_moments, full_index_set, ChannelStats, Tensor4};
use rand::Rng;
use serde::Serialize;
use std::time::Instant;

/// Median and interquartile timings of one full/sampled kernel pair.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Points per channel (n * h * w).
    pub m: usize,
    pub strategy: String,
    pub nominal_ratio: f64,
    pub realized_ratio: f64,
    pub t_full_us: f64,
    pub t_sampled_us: f64,
    pub speedup: f64,
    pub iqr_full_us: f64,
    pub iqr_sampled_us: f64,
    pub repetitions: usize,
}

/// One cell of a benchmark grid.
#[derive(Debug, Clone, Copy)]
pub struct BenchCell {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub strategy: SamplingStrategy,
}

fn median_and_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let len = samples.len();
    let median = if len % 2 == 1 {
        samples[len / 2]
    } else {
        0.5 * (samples[len / 2 - 1] + samples[len / 2])
    };
    let q1 = samples[len / 4];
    let q3 = samples[(3 * len) / 4];
    (median, q3 - q1)
}

/// Independent streaming two-pass moments, the in-run correctness oracle.
pub fn naive_moments(t: &Tensor4, indices: &[usize]) -> Result<ChannelStats> {
    if indices.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let c = t.c();
    let s = indices.len() as f64;
    let mut mean = vec![0.0; c];
    for &p in indices {
        for k in 0..c {
            mean[k] += t.value_at(p, k);
        }
    }
    for m in mean.iter_mut() {
        *m /= s;
    }
    let mut variance = vec![0.0; c];
    for &p in indices {
        for k in 0..c {
            let d = t.value_at(p, k) - mean[k];
            variance[k] += d * d;
        }
    }
    for v in variance.iter_mut() {
        *v /= s;
    }
    ChannelStats::new(mean, variance, indices.len())
}

fn stats_close(a: &ChannelStats, b: &ChannelStats) -> bool {
    a.mean
        .iter()
        .zip(&b.mean)
        .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
        && a.variance
            .iter()
            .zip(&b.variance)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
}

/// Time the statistics kernel on identical data with the full index set and
/// with the strategy's sampled set. Two warm-up runs per variant are
/// discarded; medians over `repetitions` are reported.
pub fn time_stats_kernel(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    strategy: SamplingStrategy,
    repetitions: usize,
    seed: u64,
) -> Result<BenchResult> {
    if repetitions < 5 {
        return Err(Error::invalid("repetitions", "must be >= 5"));
    }
    let stream = RngStream::new(seed);
    let mut rng = stream.substream(0, 0, StreamPurpose::BenchInput);
    let mut t = Tensor4::zeros(n, h, w, c);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }

    let full = full_index_set(&t);
    let plan = make_plan(strategy, &[(n, h, w, c)], 0, &stream)?;
    let sampled = plan_indices(&plan, 0)?;
    let realized_ratio = sampled.len() as f64 / full.len() as f64;

    // cross-check both kernels against the independent oracle before timing
    let full_stats = channel_moments(&t, &full)?;
    if !stats_close(&full_stats, &naive_moments(&t, &full)?) {
        return Err(Error::invalid("kernel", "full-kernel statistics mismatch"));
    }
    let sampled_stats = channel_moments(&t, &sampled)?;
    if !stats_close(&sampled_stats, &naive_moments(&t, &sampled)?) {
        return Err(Error::invalid("kernel", "sampled-kernel statistics mismatch"));
    }

    let time_variant = |indices: &[usize]| -> Result<Vec<f64>> {
        for _ in 0..2 {
            std::hint::black_box(channel_moments(&t, indices)?);
        }
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            std::hint::black_box(channel_moments(&t, indices)?);
            times.push(start.elapsed().as_secs_f64() * 1e6);
        }
        Ok(times)
    };
    let mut full_times = time_variant(&full)?;
    let mut sampled_times = time_variant(&sampled)?;
    let (t_full_us, iqr_full_us) = median_and_iqr(&mut full_times);
    let (t_sampled_us, iqr_sampled_us) = median_and_iqr(&mut sampled_times);

    Ok(BenchResult {
        n,
        h,
        w,
        c,
        m: n * h * w,
        strategy: strategy.kind.label().to_string(),
        nominal_ratio: strategy.ratio,
        realized_ratio,
        t_full_us,
        t_sampled_us,
        speedup: t_full_us / t_sampled_us,
        iqr_full_us,
        iqr_sampled_us,
        repetitions,
    })
}

/// One result row per grid cell; input data is regenerated per cell from
/// the cell index, so reruns see identical inputs.
pub fn bench_sweep(cells: &[BenchCell], repetitions: usize, seed: u64) -> Result<Vec<BenchResult>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            time_stats_kernel(
                cell.n,
                cell.h,
                cell.w,
                cell.c,
                cell.strategy,
                repetitions,
                seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

pub fn bench_csv_header() -> &'static str {
    "n,h,w,c,m,strategy,nominal_ratio,realized_ratio,t_full_us,t_sampled_us,speedup,iqr_full,iqr_sampled"
}

pub fn bench_csv_row(r: &BenchResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{:.3},{:.3},{:.4},{:.3},{:.3}",
        r.n,
        r.h,
        r.w,
        r.c,
        r.m,
        r.strategy,
        r.nominal_ratio,
        r.realized_ratio,
        r.t_full_us,
        r.t_sampled_us,
        r.speedup,
        r.iqr_full_us,
        r.iqr_sampled_us
    )
}
