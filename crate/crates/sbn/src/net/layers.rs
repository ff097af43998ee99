//! Layer primitives: direct 3x3 convolution (stride 1, same padding),
//! dense, ReLU, and global average pooling, each with an explicit backward.
//!
//! Weight-gradient accumulation walks samples in batch order and adds into
//! the caller's buffers, so gradients accumulated shard by shard reproduce
//! the single-batch accumulation exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// 3x3 convolution, stride 1, zero padding 1. Weights are laid out
/// ((kh * 3 + kw) * in_c + ci) * out_c + co.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_c: usize,
    pub out_c: usize,
}

impl ConvLayer {
    /// Fan-in scaled Gaussian init for ReLU stacks; zero bias.
    pub fn new_he(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 9 * in_c;
        let std = (2.0 / fan_in as f64).sqrt();
        let weights = (0..9 * in_c * out_c)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        ConvLayer {
            weights,
            bias: vec![0.0; out_c],
            in_c,
            out_c,
        }
    }

    #[inline]
    fn weight(&self, kh: usize, kw: usize, ci: usize, co: usize) -> f64 {
        self.weights[((kh * 3 + kw) * self.in_c + ci) * self.out_c + co]
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, h, w, c) = x.shape();
        if c != self.in_c {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.in_c),
                got: format!("{c}"),
            });
        }
        let mut y = Tensor4::zeros(n, h, w, self.out_c);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for co in 0..self.out_c {
                        let mut acc = self.bias[co];
                        for kh in 0..3 {
                            let src_h = hi + kh;
                            if src_h < 1 || src_h > h {
                                continue;
                            }
                            for kw in 0..3 {
                                let src_w = wi + kw;
                                if src_w < 1 || src_w > w {
                                    continue;
                                }
                                for ci in 0..self.in_c {
                                    acc += x.at(ni, src_h - 1, src_w - 1, ci)
                                        * self.weight(kh, kw, ci, co);
                                }
                            }
                        }
                        *y.at_mut(ni, hi, wi, co) = acc;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Input gradient; weight/bias gradients are accumulated into the
    /// provided buffers sample by sample.
    pub fn backward(
        &self,
        x: &Tensor4,
        d_out: &Tensor4,
        d_weights: &mut [f64],
        d_bias: &mut [f64],
    ) -> Result<Tensor4> {
        let (n, h, w, _) = x.shape();
        let mut d_x = Tensor4::zeros(n, h, w, self.in_c);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    for co in 0..self.out_c {
                        let g = d_out.at(ni, hi, wi, co);
                        d_bias[co] += g;
                        for kh in 0..3 {
                            let src_h = hi + kh;
                            if src_h < 1 || src_h > h {
                                continue;
                            }
                            for kw in 0..3 {
                                let src_w = wi + kw;
                                if src_w < 1 || src_w > w {
                                    continue;
                                }
                                for ci in 0..self.in_c {
                                    let widx =
                                        ((kh * 3 + kw) * self.in_c + ci) * self.out_c + co;
                                    d_weights[widx] += x.at(ni, src_h - 1, src_w - 1, ci) * g;
                                    *d_x.at_mut(ni, src_h - 1, src_w - 1, ci) +=
                                        self.weight(kh, kw, ci, co) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(d_x)
    }
}

/// Fully connected layer over the flattened (H, W, C) of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new_he(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        DenseLayer {
            weights,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, h, w, c) = x.shape();
        let flat = h * w * c;
        if flat != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flattened inputs", self.in_dim),
                got: format!("{flat}"),
            });
        }
        let mut y = Tensor4::zeros(n, 1, 1, self.out_dim);
        for ni in 0..n {
            let base = ni * flat;
            for o in 0..self.out_dim {
                let mut acc = self.bias[o];
                for f in 0..flat {
                    acc += x.data()[base + f] * self.weights[f * self.out_dim + o];
                }
                *y.at_mut(ni, 0, 0, o) = acc;
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Tensor4,
        d_out: &Tensor4,
        d_weights: &mut [f64],
        d_bias: &mut [f64],
    ) -> Result<Tensor4> {
        let (n, h, w, c) = x.shape();
        let flat = h * w * c;
        let mut d_x = Tensor4::zeros(n, h, w, c);
        for ni in 0..n {
            let base = ni * flat;
            for o in 0..self.out_dim {
                let g = d_out.at(ni, 0, 0, o);
                d_bias[o] += g;
                for f in 0..flat {
                    d_weights[f * self.out_dim + o] += x.data()[base + f] * g;
                    d_x.data_mut()[base + f] += self.weights[f * self.out_dim + o] * g;
                }
            }
        }
        Ok(d_x)
    }
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor4, d_out: &Tensor4) -> Tensor4 {
    let mut d_x = d_out.clone();
    for (g, &v) in d_x.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    d_x
}

pub fn global_avg_pool_forward(x: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = x.shape();
    let fm = (h * w) as f64;
    let mut y = Tensor4::zeros(n, 1, 1, c);
    for ni in 0..n {
        for k in 0..c {
            let mut acc = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    acc += x.at(ni, hi, wi, k);
                }
            }
            *y.at_mut(ni, 0, 0, k) = acc / fm;
        }
    }
    y
}

pub fn global_avg_pool_backward(d_out: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let (n, _, _, c) = d_out.shape();
    let fm = (h * w) as f64;
    let mut d_x = Tensor4::zeros(n, h, w, c);
    for ni in 0..n {
        for k in 0..c {
            let g = d_out.at(ni, 0, 0, k) / fm;
            for hi in 0..h {
                for wi in 0..w {
                    *d_x.at_mut(ni, hi, wi, k) = g;
                }
            }
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamPurpose};
    use rand::Rng;

    fn rng() -> ChaCha8Rng {
        RngStream::new(77).substream(0, 0, StreamPurpose::WeightInit)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut conv = ConvLayer {
            weights: vec![0.0; 9],
            bias: vec![0.0],
            in_c: 1,
            out_c: 1,
        };
        // center tap only
        conv.weights[(1 * 3 + 1) * 1 * 1] = 1.0;
        let mut data_rng = rng();
        let x = Tensor4::from_fn(2, 4, 4, 1, |_, _, _, _| data_rng.random_range(-1.0..1.0));
        let y = conv.forward(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_matches_scalar_oracle_with_padding() {
        let mut init = rng();
        let conv = ConvLayer::new_he(2, 3, &mut init);
        let mut data_rng = rng();
        let x = Tensor4::from_fn(2, 3, 3, 2, |_, _, _, _| data_rng.random_range(-1.0..1.0));
        let y = conv.forward(&x).unwrap();
        for ni in 0..2 {
            for hi in 0..3i64 {
                for wi in 0..3i64 {
                    for co in 0..3 {
                        let mut acc = conv.bias[co];
                        for kh in 0..3i64 {
                            for kw in 0..3i64 {
                                let sh = hi + kh - 1;
                                let sw = wi + kw - 1;
                                if sh < 0 || sh >= 3 || sw < 0 || sw >= 3 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    acc += x.at(ni, sh as usize, sw as usize, ci)
                                        * conv.weight(kh as usize, kw as usize, ci, co);
                                }
                            }
                        }
                        let got = y.at(ni, hi as usize, wi as usize, co);
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_finite_difference_gradients() {
        let mut init = rng();
        let conv = ConvLayer::new_he(1, 2, &mut init);
        let mut data_rng = rng();
        let x = Tensor4::from_fn(2, 3, 3, 1, |_, _, _, _| data_rng.random_range(-1.0..1.0));
        let loss = |layer: &ConvLayer, input: &Tensor4| -> f64 {
            let y = layer.forward(input).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let y = conv.forward(&x).unwrap();
        let mut d_w = vec![0.0; conv.weights.len()];
        let mut d_b = vec![0.0; conv.bias.len()];
        let d_x = conv.backward(&x, &y, &mut d_w, &mut d_b).unwrap();

        let h = 1e-6;
        for i in 0..conv.weights.len() {
            let mut plus = conv.clone();
            plus.weights[i] += h;
            let mut minus = conv.clone();
            minus.weights[i] -= h;
            let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!((numeric - d_w[i]).abs() < 1e-6, "w[{i}]: {numeric} vs {}", d_w[i]);
        }
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * h);
            assert!((numeric - d_x.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_finite_difference_gradients() {
        let mut init = rng();
        let dense = DenseLayer::new_he(4, 3, &mut init);
        let mut data_rng = rng();
        let x = Tensor4::from_fn(2, 1, 1, 4, |_, _, _, _| data_rng.random_range(-1.0..1.0));
        let loss = |layer: &DenseLayer, input: &Tensor4| -> f64 {
            let y = layer.forward(input).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let y = dense.forward(&x).unwrap();
        let mut d_w = vec![0.0; dense.weights.len()];
        let mut d_b = vec![0.0; dense.bias.len()];
        let d_x = dense.backward(&x, &y, &mut d_w, &mut d_b).unwrap();
        let h = 1e-6;
        for i in 0..dense.weights.len() {
            let mut plus = dense.clone();
            plus.weights[i] += h;
            let mut minus = dense.clone();
            minus.weights[i] -= h;
            let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!((numeric - d_w[i]).abs() < 1e-6);
        }
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (loss(&dense, &plus) - loss(&dense, &minus)) / (2.0 * h);
            assert!((numeric - d_x.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_and_pool_behave() {
        let x = Tensor4::new(1, 2, 2, 1, vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0, 4.0]);
        let d = Tensor4::from_fn(1, 2, 2, 1, |_, _, _, _| 1.0);
        let dx = relu_backward(&x, &d);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 1.0]);

        let pooled = global_avg_pool_forward(&x);
        assert_eq!(pooled.at(0, 0, 0, 0), 0.5);
        let d_pool = Tensor4::new(1, 1, 1, 1, vec![4.0]).unwrap();
        let back = global_avg_pool_backward(&d_pool, 2, 2);
        assert!(back.data().iter().all(|&v| v == 1.0));
    }
}
