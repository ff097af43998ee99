//! Synthetic image-classification data: class-conditional Gaussian blobs.

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamPurpose};
use crate::tensor::Tensor4;
use rand_distr::{Distribution, StandardNormal};

/// Single-channel blob images with one split per role.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Tensor4,
    pub train_labels: Vec<usize>,
    pub val: Tensor4,
    pub val_labels: Vec<usize>,
    pub classes: usize,
}

/// Blob images: one elongated Gaussian bump per sample whose orientation
/// encodes the class, anchored on a small class circle. Distances wrap
/// around the image borders, and each sample's bump center wanders by a
/// noise-scaled offset wide enough to make the image ensemble effectively
/// translation invariant at working noise levels. Each sample also adds a
/// shared brightness offset and i.i.d. pixel noise — the brightness makes
/// points inside one sample strongly correlated, which is the structure
/// batch statistics have to cope with. All per-sample randomness scales
/// with the noise knob, so zero noise gives identical images within a
/// class. Deterministic given the seed; splits are balanced and
/// interleaved by class; the validation split holds max(per_class / 4, 1)
/// images per class.
pub fn make_blob_dataset(
    classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", "must be >= 2"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class", "must be >= 1"));
    }
    if h < 3 || w < 3 {
        return Err(Error::invalid("dims", "blob images need h, w >= 3"));
    }
    if noise < 0.0 {
        return Err(Error::invalid("noise", "must be >= 0"));
    }
    let stream = RngStream::new(seed);
    let mut center_rng = stream.substream(0, 0, StreamPurpose::DataGen);
    let phase: f64 = {
        let z: f64 = StandardNormal.sample(&mut center_rng);
        z
    };
    let scale = h.min(w) as f64;
    let radius = scale / 8.0;
    let sigma_long = scale / 3.0;
    let sigma_short = scale / 8.0;
    let amplitude = 2.5;
    let brightness_scale = 1.0;
    let wander_scale = 20.0;
    let anchors: Vec<(f64, f64)> = (0..classes)
        .map(|cls| {
            let angle = phase + std::f64::consts::TAU * cls as f64 / classes as f64;
            (
                h as f64 / 2.0 + radius * angle.sin(),
                w as f64 / 2.0 + radius * angle.cos(),
            )
        })
        .collect();
    let orientations: Vec<f64> = (0..classes)
        .map(|cls| phase + std::f64::consts::PI * cls as f64 / classes as f64)
        .collect();

    // toroidal distances keep the image ensemble translation invariant
    let wrap = |delta: f64, len: f64| -> f64 {
        let mut d = delta % len;
        if d < -len / 2.0 {
            d += len;
        } else if d >= len / 2.0 {
            d -= len;
        }
        d
    };
    let blob = |cls: usize, hi: usize, wi: usize, jh: f64, jw: f64| -> f64 {
        let (ch, cw) = anchors[cls];
        let dh = wrap(hi as f64 + 0.5 - ch - jh, h as f64);
        let dw = wrap(wi as f64 + 0.5 - cw - jw, w as f64);
        let (sin, cos) = orientations[cls].sin_cos();
        let along = dh * cos + dw * sin;
        let across = -dh * sin + dw * cos;
        (-0.5 * ((along / sigma_long).powi(2) + (across / sigma_short).powi(2))).exp()
    };

    let val_per_class = (per_class / 4).max(1);
    let build = |count_per_class: usize, purpose_index: u64| -> (Tensor4, Vec<usize>) {
        let total = classes * count_per_class;
        let mut noise_rng = stream.substream(0, purpose_index, StreamPurpose::DataGen);
        let mut images = Tensor4::zeros(total, h, w, 1);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let cls = i % classes;
            labels.push(cls);
            let brightness: f64 = {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                brightness_scale * noise * z
            };
            let jh: f64 = {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                wander_scale * noise * z
            };
            let jw: f64 = {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                wander_scale * noise * z
            };
            for hi in 0..h {
                for wi in 0..w {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    *images.at_mut(i, hi, wi, 0) =
                        amplitude * blob(cls, hi, wi, jh, jw) + brightness + noise * z;
                }
            }
        }
        (images, labels)
    };
    let (train, train_labels) = build(per_class, 1);
    let (val, val_labels) = build(val_per_class, 2);
    Ok(SyntheticDataset {
        train,
        train_labels,
        val,
        val_labels,
        classes,
    })
}
