//! Dense 4-D activation tensors in (N, H, W, C) layout plus the deterministic
//! reduction and indexing primitives everything else builds on.
//!
//! All statistics reductions go through [`pairwise_sum`], a balanced adder
//! tree with a fixed association order. The parallel build evaluates the same
//! tree with `rayon::join`, so results are bit-identical to the sequential
//! path regardless of thread count.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense 4-D tensor, row-major (N, H, W, C), 64-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch {
                expected: "all dimensions >= 1".into(),
                got: format!("({n}, {h}, {w}, {c})"),
            });
        }
        if data.len() != n * h * w * c {
            return Err(Error::ShapeMismatch {
                expected: format!("data length {}", n * h * w * c),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        assert!(n >= 1 && h >= 1 && w >= 1 && c >= 1, "dimensions must be >= 1");
        Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_fn(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor4::zeros(n, h, w, c);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        *t.at_mut(ni, hi, wi, ci) = f(ni, hi, wi, ci);
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn c(&self) -> usize {
        self.c
    }

    /// Number of (N, H, W) positions each channel sees.
    pub fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[((n * self.h + h) * self.w + w) * self.c + c]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, h: usize, w: usize, c: usize) -> &mut f64 {
        &mut self.data[((n * self.h + h) * self.w + w) * self.c + c]
    }

    /// Value at a flat (N, H, W) position index for one channel.
    #[inline]
    pub fn value_at(&self, position: usize, channel: usize) -> f64 {
        self.data[position * self.c + channel]
    }

    #[inline]
    pub fn value_at_mut(&mut self, position: usize, channel: usize) -> &mut f64 {
        &mut self.data[position * self.c + channel]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along N. Feature-map shape and channels must match.
    pub fn concat_samples(&self, other: &Tensor4) -> Result<Tensor4> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            return Err(Error::ShapeMismatch {
                expected: format!("(_, {}, {}, {})", self.h, self.w, self.c),
                got: format!("(_, {}, {}, {})", other.h, other.w, other.c),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor4::new(self.n + other.n, self.h, self.w, self.c, data)
    }

    /// Copy out samples [begin, begin + count) along N.
    pub fn slice_samples(&self, begin: usize, count: usize) -> Result<Tensor4> {
        if count == 0 || begin + count > self.n {
            return Err(Error::IndexOutOfRange {
                index: begin + count,
                limit: self.n,
            });
        }
        let stride = self.h * self.w * self.c;
        let data = self.data[begin * stride..(begin + count) * stride].to_vec();
        Tensor4::new(count, self.h, self.w, self.c, data)
    }
}

/// Per-channel mean/variance pair with the sample count that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} variance entries", mean.len()),
                got: format!("{}", variance.len()),
            });
        }
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        if variance.iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite {
                context: "negative variance",
            });
        }
        Ok(ChannelStats {
            mean,
            variance,
            count,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.variance.iter().all(|v| v.is_finite())
    }
}

/// Below this length the adder tree is evaluated on the current thread.
#[cfg(feature = "parallel")]
const PARALLEL_GRAIN: usize = 1 << 15;

/// Balanced adder tree over `v`, splitting at ceil(len / 2).
///
/// The small arms are unrolled forms of the same tree, not shortcuts.
pub(crate) fn sum_tree(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        3 => (v[0] + v[1]) + v[2],
        4 => (v[0] + v[1]) + (v[2] + v[3]),
        len => {
            let mid = len.div_ceil(2);
            sum_tree(&v[..mid]) + sum_tree(&v[mid..])
        }
    }
}

#[cfg(feature = "parallel")]
fn sum_tree_par(v: &[f64]) -> f64 {
    if v.len() <= PARALLEL_GRAIN {
        return sum_tree(v);
    }
    let mid = v.len().div_ceil(2);
    let (a, b) = rayon::join(|| sum_tree_par(&v[..mid]), || sum_tree_par(&v[mid..]));
    a + b
}

/// Sum by recursive halving: a fixed association order of depth
/// ceil(log2(len)), independent of execution parallelism.
pub fn pairwise_sum(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    #[cfg(feature = "parallel")]
    {
        Ok(sum_tree_par(values))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(sum_tree(values))
    }
}

/// Always-sequential evaluation of the same tree. Bit-identical to
/// [`pairwise_sum`]; exists so benchmarks can compare the two schedules.
pub fn pairwise_sum_seq(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(sum_tree(values))
}

fn check_indices(t: &Tensor4, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let limit = t.positions();
    for &p in indices {
        if p >= limit {
            return Err(Error::IndexOutOfRange { index: p, limit });
        }
    }
    Ok(())
}

fn moments_one_channel(
    t: &Tensor4,
    indices: &[usize],
    channel: usize,
    scratch: &mut Vec<f64>,
) -> (f64, f64) {
    let s = indices.len() as f64;
    scratch.clear();
    scratch.extend(indices.iter().map(|&p| t.value_at(p, channel)));
    let mean = sum_tree(scratch) / s;
    for v in scratch.iter_mut() {
        let d = *v - mean;
        *v = d * d;
    }
    let variance = sum_tree(scratch) / s;
    (mean, variance)
}

#[cfg(feature = "parallel")]
fn moments_one_channel_par(t: &Tensor4, indices: &[usize], channel: usize) -> (f64, f64) {
    let s = indices.len() as f64;
    let mut scratch: Vec<f64> = indices.iter().map(|&p| t.value_at(p, channel)).collect();
    let mean = sum_tree_par(&scratch) / s;
    scratch.iter_mut().for_each(|v| {
        let d = *v - mean;
        *v = d * d;
    });
    let variance = sum_tree_par(&scratch) / s;
    (mean, variance)
}

/// Per-channel mean and population variance over the selected positions.
///
/// The index set is shared across channels; divisor is the selected count.
pub fn channel_moments(t: &Tensor4, indices: &[usize]) -> Result<ChannelStats> {
    check_indices(t, indices)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pairs: Vec<(f64, f64)> = (0..t.c())
            .into_par_iter()
            .map(|k| moments_one_channel_par(t, indices, k))
            .collect();
        let (mean, variance) = pairs.into_iter().unzip();
        ChannelStats::new(mean, variance, indices.len())
    }
    #[cfg(not(feature = "parallel"))]
    {
        channel_moments_seq(t, indices)
    }
}

/// Sequential evaluation of [`channel_moments`]; same bits, one thread.
pub fn channel_moments_seq(t: &Tensor4, indices: &[usize]) -> Result<ChannelStats> {
    check_indices(t, indices)?;
    let mut scratch = Vec::with_capacity(indices.len());
    let mut mean = Vec::with_capacity(t.c());
    let mut variance = Vec::with_capacity(t.c());
    for k in 0..t.c() {
        let (m, v) = moments_one_channel(t, indices, k, &mut scratch);
        mean.push(m);
        variance.push(v);
    }
    ChannelStats::new(mean, variance, indices.len())
}

/// Every (N, H, W) position of the tensor, in layout order.
pub fn full_index_set(t: &Tensor4) -> Vec<usize> {
    (0..t.positions()).collect()
}

pub(crate) fn rows_index_set(
    n: usize,
    h: usize,
    w: usize,
    begin_n: usize,
    ns: usize,
) -> Result<Vec<usize>> {
    if ns == 0 || begin_n + ns > n {
        return Err(Error::IndexOutOfRange {
            index: begin_n + ns,
            limit: n,
        });
    }
    let fm = h * w;
    let mut out = Vec::with_capacity(ns * fm);
    for sample in begin_n..begin_n + ns {
        let base = sample * fm;
        out.extend(base..base + fm);
    }
    Ok(out)
}

pub(crate) fn patch_index_set(
    n: usize,
    h: usize,
    w: usize,
    begin_h: usize,
    begin_w: usize,
    hs: usize,
    ws: usize,
) -> Result<Vec<usize>> {
    if hs == 0 || ws == 0 || begin_h + hs > h || begin_w + ws > w {
        return Err(Error::IndexOutOfRange {
            index: (begin_h + hs).max(begin_w + ws),
            limit: h.max(w),
        });
    }
    let mut out = Vec::with_capacity(n * hs * ws);
    for sample in 0..n {
        for row in begin_h..begin_h + hs {
            let base = (sample * h + row) * w;
            out.extend(base + begin_w..base + begin_w + ws);
        }
    }
    Ok(out)
}

/// Positions of all feature-map points of samples [begin_n, begin_n + ns).
pub fn gather_rows(t: &Tensor4, begin_n: usize, ns: usize) -> Result<Vec<usize>> {
    rows_index_set(t.n(), t.h(), t.w(), begin_n, ns)
}

/// Positions of an hs-by-ws rectangle at (begin_h, begin_w), across all samples.
pub fn gather_patch(
    t: &Tensor4,
    begin_h: usize,
    begin_w: usize,
    hs: usize,
    ws: usize,
) -> Result<Vec<usize>> {
    patch_index_set(t.n(), t.h(), t.w(), begin_h, begin_w, hs, ws)
}
