//! Quantitative checks of the estimator theory: estimation-error traces,
//! inter-layer error correlation, predicted variance of a correlated-sample
//! mean, the moving-average variance ratio, and the adder-tree speedup model.

use crate::error::{Error, Result};
use crate::tensor::{ChannelStats, Tensor4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// One recorded estimation error: L2 norms of the per-channel mean and
/// standard-deviation error vectors for one layer at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub layer: usize,
    pub iter: usize,
    pub e_mu: f64,
    pub e_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTrace {
    pub num_layers: usize,
    pub rows: Vec<ErrorRow>,
}

impl ErrorTrace {
    pub fn new(num_layers: usize) -> Self {
        ErrorTrace {
            num_layers,
            rows: Vec::new(),
        }
    }

    /// One layer's e_mu or e_sigma series in iteration order.
    pub fn layer_series(&self, layer: usize, sigma: bool) -> Vec<f64> {
        let mut rows: Vec<&ErrorRow> = self.rows.iter().filter(|r| r.layer == layer).collect();
        rows.sort_by_key(|r| r.iter);
        rows.iter()
            .map(|r| if sigma { r.e_sigma } else { r.e_mu })
            .collect()
    }
}

/// Accumulates estimation errors during a training run.
#[derive(Debug)]
pub struct StatsRecorder {
    trace: ErrorTrace,
}

impl StatsRecorder {
    pub fn new(num_layers: usize) -> Self {
        StatsRecorder {
            trace: ErrorTrace::new(num_layers),
        }
    }

    /// Append ||mu_s - mu||_2 and ||sigma_s - sigma||_2 for one layer.
    /// Sigma is the standard deviation, the square root of the variance.
    pub fn record(
        &mut self,
        layer: usize,
        iter: usize,
        sampled: &ChannelStats,
        full: &ChannelStats,
    ) -> Result<()> {
        let (e_mu, e_sigma) = estimation_errors(sampled, full)?;
        self.trace.rows.push(ErrorRow {
            layer,
            iter,
            e_mu,
            e_sigma,
        });
        Ok(())
    }

    pub fn trace(&self) -> &ErrorTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ErrorTrace {
        self.trace
    }
}

/// (||mu_s - mu||_2, ||sigma_s - sigma||_2) over the channel vectors.
pub fn estimation_errors(sampled: &ChannelStats, full: &ChannelStats) -> Result<(f64, f64)> {
    if sampled.channels() != full.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", full.channels()),
            got: format!("{}", sampled.channels()),
        });
    }
    let mut mu_sq = 0.0;
    let mut sigma_sq = 0.0;
    for k in 0..full.channels() {
        mu_sq += (sampled.mean[k] - full.mean[k]).powi(2);
        sigma_sq += (sampled.variance[k].sqrt() - full.variance[k].sqrt()).powi(2);
    }
    Ok((mu_sq.sqrt(), sigma_sq.sqrt()))
}

/// Pearson correlation matrix between per-layer error series.
///
/// Entries for constant series are NaN sentinels rather than errors;
/// everything else lands in [-1, 1] with a unit diagonal.
pub fn pearson_matrix(trace: &ErrorTrace, sigma: bool) -> Result<Vec<Vec<f64>>> {
    let l = trace.num_layers;
    let series: Vec<Vec<f64>> = (0..l).map(|layer| trace.layer_series(layer, sigma)).collect();
    let t = series.first().map_or(0, |s| s.len());
    if t < 3 {
        return Err(Error::invalid(
            "trace",
            format!("needs at least 3 iterations, got {t}"),
        ));
    }
    if series.iter().any(|s| s.len() != t) {
        return Err(Error::invalid("trace", "ragged layer series"));
    }
    let mut matrix = vec![vec![f64::NAN; l]; l];
    for i in 0..l {
        for j in i..l {
            let r = pearson(&series[i], &series[j]);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(matrix)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let t = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / t;
    let mean_b = b.iter().sum::<f64>() / t;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return f64::NAN;
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

/// Mean |off-diagonal| of a correlation matrix, skipping NaN sentinels.
pub fn mean_offdiag_abs(matrix: &[Vec<f64>]) -> f64 {
    let l = matrix.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..l {
        for j in 0..l {
            if i != j && matrix[i][j].is_finite() {
                sum += matrix[i][j].abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Covariance structure of the s sampled values feeding one mean estimate.
#[derive(Debug, Clone)]
pub enum CovModel {
    /// Common variance, common pairwise correlation rho.
    Equicorrelated { dim: usize, variance: f64, rho: f64 },
    /// Equicorrelated inside blocks of `block` consecutive variables,
    /// independent across blocks.
    Block {
        dim: usize,
        variance: f64,
        rho: f64,
        block: usize,
    },
    /// Explicit symmetric PSD matrix.
    Explicit { matrix: Vec<Vec<f64>> },
}

impl CovModel {
    pub fn dim(&self) -> usize {
        match self {
            CovModel::Equicorrelated { dim, .. } | CovModel::Block { dim, .. } => *dim,
            CovModel::Explicit { matrix } => matrix.len(),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            CovModel::Equicorrelated { variance, rho, .. } => {
                if i == j {
                    *variance
                } else {
                    rho * variance
                }
            }
            CovModel::Block {
                variance,
                rho,
                block,
                ..
            } => {
                if i == j {
                    *variance
                } else if i / block == j / block {
                    rho * variance
                } else {
                    0.0
                }
            }
            CovModel::Explicit { matrix } => matrix[i][j],
        }
    }

    /// Symmetry and eigenvalues >= -1e-10, via Jacobi rotations.
    pub fn validate(&self) -> Result<()> {
        let s = self.dim();
        if s == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        if let CovModel::Explicit { matrix } = self {
            for row in matrix {
                if row.len() != s {
                    return Err(Error::invalid("matrix", "must be square"));
                }
            }
            for i in 0..s {
                for j in 0..s {
                    if (matrix[i][j] - matrix[j][i]).abs() > 1e-9 {
                        return Err(Error::invalid("matrix", "must be symmetric"));
                    }
                }
            }
        }
        let mut full = vec![vec![0.0; s]; s];
        for i in 0..s {
            for j in 0..s {
                full[i][j] = self.entry(i, j);
            }
        }
        let eigenvalues = jacobi_eigenvalues(&mut full);
        if eigenvalues.iter().any(|&e| e < -1e-10) {
            return Err(Error::invalid(
                "matrix",
                format!("not PSD, smallest eigenvalue {:.3e}", eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)),
            ));
        }
        Ok(())
    }
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(a: &mut [Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Variance of the mean of s correlated samples:
/// (1/s^2) (sum of variances + 2 * sum of pairwise covariances).
pub fn predict_mean_variance(cov: &CovModel) -> f64 {
    let s = cov.dim();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..s {
        diag += cov.entry(i, i);
        for j in i + 1..s {
            off += cov.entry(i, j);
        }
    }
    (diag + 2.0 * off) / (s as f64 * s as f64)
}

/// Steady-state Var[moving average] / Var[estimate] for i.i.d. estimates.
pub fn ma_variance_ratio(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("must be in (0, 1], got {alpha}")));
    }
    Ok(alpha / (2.0 - alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupModel {
    pub depth_full: f64,
    pub depth_sampled: f64,
    pub speedup: f64,
    pub mem_fraction: f64,
}

/// Adder-tree depth model: reducing s of m points shrinks the tree from
/// log(m) to log(s), a factor log(m)/log(s); memory traffic shrinks to s/m.
pub fn theoretical_speedup(m: usize, ratio: f64) -> Result<SpeedupModel> {
    let s = (ratio * m as f64).round() as usize;
    if s < 2 {
        return Err(Error::invalid(
            "ratio",
            format!("sampled count must be >= 2, got {s}"),
        ));
    }
    let depth_full = (m as f64).log2();
    let depth_sampled = (s as f64).log2();
    Ok(SpeedupModel {
        depth_full,
        depth_sampled,
        speedup: depth_full / depth_sampled,
        mem_fraction: s as f64 / m as f64,
    })
}

/// Synthetic activations with strong within-sample correlation: every
/// position of a sample shares that sample's latent offset, plus i.i.d.
/// noise. Cross-sample correlation is zero by construction.
pub fn correlated_activations(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    sample_strength: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor4 {
    let offsets: Vec<f64> = (0..n * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sample_strength * z
        })
        .collect();
    Tensor4::from_fn(n, h, w, c, |ni, _, _, ci| {
        let z: f64 = StandardNormal.sample(rng);
        offsets[ni * c + ci] + noise * z
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamPurpose};
    use rand::Rng;

    #[test]
    fn estimation_error_basics() {
        let full = ChannelStats::new(vec![1.0, 2.0], vec![4.0, 9.0], 10).unwrap();
        let same = full.clone();
        let (e_mu, e_sigma) = estimation_errors(&same, &full).unwrap();
        assert_eq!(e_mu, 0.0);
        assert_eq!(e_sigma, 0.0);

        // mean error vector (3, 4) has norm 5; sigmas equal
        let sampled = ChannelStats::new(vec![4.0, 6.0], vec![4.0, 9.0], 4).unwrap();
        let (e_mu, e_sigma) = estimation_errors(&sampled, &full).unwrap();
        assert!((e_mu - 5.0).abs() < 1e-15);
        assert_eq!(e_sigma, 0.0);

        let wrong = ChannelStats::new(vec![0.0], vec![1.0], 2).unwrap();
        assert!(estimation_errors(&wrong, &full).is_err());
    }

    fn trace_from_series(series: &[Vec<f64>]) -> ErrorTrace {
        let mut trace = ErrorTrace::new(series.len());
        for (layer, s) in series.iter().enumerate() {
            for (iter, &v) in s.iter().enumerate() {
                trace.rows.push(ErrorRow {
                    layer,
                    iter,
                    e_mu: v,
                    e_sigma: v,
                });
            }
        }
        trace
    }

    #[test]
    fn pearson_identical_and_negated_series() {
        let base = vec![1.0, 2.0, 0.5, 3.0, 2.5];
        let negated: Vec<f64> = base.iter().map(|v| 10.0 - v).collect();
        let trace = trace_from_series(&[base.clone(), base.clone(), negated]);
        let m = pearson_matrix(&trace, false).unwrap();
        assert!((m[0][1] - 1.0).abs() < 1e-12);
        assert!((m[0][2] + 1.0).abs() < 1e-12);
        assert!((m[0][0] - 1.0).abs() < 1e-12);
        for row in &m {
            for &v in row {
                assert!(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pearson_independent_series_nearly_uncorrelated() {
        let mut rng = RngStream::new(3).substream(0, 0, StreamPurpose::Probe);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = trace_from_series(&[a, b]);
        let m = pearson_matrix(&trace, false).unwrap();
        assert!(m[0][1].abs() < 0.1, "corr {}", m[0][1]);
    }

    #[test]
    fn pearson_constant_series_yields_nan_not_crash() {
        let trace = trace_from_series(&[vec![1.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let m = pearson_matrix(&trace, false).unwrap();
        assert!(m[0][1].is_nan());
        assert!(m[0][0].is_nan());
        assert!((m[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_needs_three_iterations() {
        let trace = trace_from_series(&[vec![1.0, 2.0]]);
        assert!(pearson_matrix(&trace, false).is_err());
    }

    #[test]
    fn predicted_mean_variance_closed_cases() {
        // i.i.d.: v / s
        let iid = CovModel::Equicorrelated {
            dim: 8,
            variance: 2.0,
            rho: 0.0,
        };
        assert!((predict_mean_variance(&iid) - 0.25).abs() < 1e-15);
        // perfectly correlated: v, sampling gains nothing
        let full = CovModel::Equicorrelated {
            dim: 8,
            variance: 2.0,
            rho: 1.0,
        };
        assert!((predict_mean_variance(&full) - 2.0).abs() < 1e-12);
        // rho = 0.3, v = 1, s = 8: (8 + 2 * 28 * 0.3) / 64
        let rho = CovModel::Equicorrelated {
            dim: 8,
            variance: 1.0,
            rho: 0.3,
        };
        assert!((predict_mean_variance(&rho) - 0.3875).abs() < 1e-15);
    }

    #[test]
    fn predicted_mean_variance_monte_carlo() {
        // x = A z with z standard normal has covariance A A^T
        let s = 8usize;
        let mut rng = RngStream::new(11).substream(0, 0, StreamPurpose::Probe);
        let a: Vec<Vec<f64>> = (0..s)
            .map(|_| {
                (0..s)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.5 * z
                    })
                    .collect()
            })
            .collect();
        let mut sigma = vec![vec![0.0; s]; s];
        for i in 0..s {
            for j in 0..s {
                sigma[i][j] = (0..s).map(|k| a[i][k] * a[j][k]).sum();
            }
        }
        let cov = CovModel::Explicit { matrix: sigma };
        cov.validate().unwrap();
        let predicted = predict_mean_variance(&cov);

        let trials = 200_000usize;
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        let mut z = vec![0.0; s];
        for _ in 0..trials {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let mut mean = 0.0;
            for row in &a {
                let x: f64 = row.iter().zip(&z).map(|(r, zz)| r * zz).sum();
                mean += x;
            }
            mean /= s as f64;
            acc += mean;
            acc_sq += mean * mean;
        }
        let emp_mean = acc / trials as f64;
        let emp_var = acc_sq / trials as f64 - emp_mean * emp_mean;
        let se = predicted * (2.0 / (trials as f64 - 1.0)).sqrt();
        assert!(
            (emp_var - predicted).abs() < 3.0 * se,
            "empirical {emp_var}, predicted {predicted}, se {se}"
        );
    }

    #[test]
    fn cov_model_validation_catches_bad_matrices() {
        let asym = CovModel::Explicit {
            matrix: vec![vec![1.0, 0.5], vec![-0.5, 1.0]],
        };
        assert!(asym.validate().is_err());
        let indefinite = CovModel::Explicit {
            matrix: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        assert!(indefinite.validate().is_err());
        let ok = CovModel::Block {
            dim: 6,
            variance: 1.0,
            rho: 0.5,
            block: 3,
        };
        ok.validate().unwrap();
    }

    #[test]
    fn ma_ratio_values_and_monotonicity() {
        assert_eq!(ma_variance_ratio(1.0).unwrap(), 1.0);
        assert!((ma_variance_ratio(0.7).unwrap() - 0.7 / 1.3).abs() < 1e-15);
        assert!(ma_variance_ratio(0.0).is_err());
        assert!(ma_variance_ratio(1.1).is_err());
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        for pair in grid.windows(2) {
            assert!(ma_variance_ratio(pair[0]).unwrap() < ma_variance_ratio(pair[1]).unwrap());
        }
    }

    #[test]
    fn ma_ratio_matches_simulated_moving_average() {
        for (i, alpha) in [0.3, 0.7, 0.9].into_iter().enumerate() {
            let mut rng = RngStream::new(40 + i as u64).substream(0, 0, StreamPurpose::Probe);
            let horizon = 100_000usize;
            let burn_in = 1_000usize;
            let mut ma = 0.0;
            let mut initialized = false;
            let mut xs = Vec::with_capacity(horizon);
            let mut mas = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let x: f64 = StandardNormal.sample(&mut rng);
                if !initialized {
                    ma = x;
                    initialized = true;
                } else {
                    ma = alpha * x + (1.0 - alpha) * ma;
                }
                xs.push(x);
                mas.push(ma);
            }
            let var = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
            };
            let ratio = var(&mas[burn_in..]) / var(&xs[burn_in..]);
            let predicted = ma_variance_ratio(alpha).unwrap();
            assert!(
                (ratio - predicted).abs() / predicted < 0.05,
                "alpha {alpha}: simulated {ratio}, predicted {predicted}"
            );
        }
    }

    #[test]
    fn speedup_model_cases() {
        let m = 56 * 56 * 128;
        let out = theoretical_speedup(m, 1.0 / 32.0).unwrap();
        assert!(((out.speedup - 1.0) * 100.0 - 36.7).abs() < 0.1, "{}", out.speedup);
        assert!((out.mem_fraction - 0.03125).abs() < 1e-15);

        let unit = theoretical_speedup(1024, 1.0).unwrap();
        assert_eq!(unit.speedup, 1.0);

        let quarter = theoretical_speedup(1024, 0.25).unwrap();
        assert!((quarter.speedup - 1.25).abs() < 1e-12);

        assert!(theoretical_speedup(16, 0.01).is_err());
    }

    #[test]
    fn correlated_activations_have_sample_structure() {
        let mut rng = RngStream::new(5).substream(0, 0, StreamPurpose::Probe);
        let t = correlated_activations(8, 6, 6, 1, 2.0, 0.1, &mut rng);
        // positions within a sample cluster around that sample's offset
        for ni in 0..8 {
            let vals: Vec<f64> = (0..36).map(|p| t.value_at(ni * 36 + p, 0)).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let spread = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(spread < 0.1, "within-sample spread {spread}");
        }
    }
}
