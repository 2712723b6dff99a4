use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance from each class mean to the decision boundary, in units of the
/// per-coordinate noise deviation.
pub const TWO_GAUSSIAN_MARGIN: f64 = 3.0;
/// Raw coordinates are mapped into `[0, 1]` as `0.5 + z·SQUASH`, then clipped.
const SQUASH: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Two isotropic Gaussians whose means differ along the first coordinate.
    TwoGaussians,
    /// Four blobs in the first two coordinates labelled by the XOR of their signs.
    XorBlobs,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::TwoGaussians => "two_gaussians",
            SynthKind::XorBlobs => "xor_blobs",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(SynthKind::TwoGaussians),
            "xor_blobs" => Ok(SynthKind::XorBlobs),
            _ => Err(Error::Config(format!(
                "unknown synthetic dataset `{s}` (expected two_gaussians or xor_blobs)"
            ))),
        }
    }
}

/// Deterministic two-class point clouds of dimension `dim`, laid out as
/// `[n, 1, 1, dim]`. Labels alternate, so the classes are balanced.
pub fn synth_dataset(kind: SynthKind, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Input(format!(
            "synthetic dataset needs n >= 2, got {n}"
        )));
    }
    let min_dim = match kind {
        SynthKind::TwoGaussians => 1,
        SynthKind::XorBlobs => 2,
    };
    if dim < min_dim {
        return Err(Error::Input(format!(
            "{kind} needs dim >= {min_dim}, got {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut mean = vec![0.0f64; dim];
        let noise = match kind {
            SynthKind::TwoGaussians => {
                mean[0] = if label == 1 {
                    TWO_GAUSSIAN_MARGIN
                } else {
                    -TWO_GAUSSIAN_MARGIN
                };
                1.0
            }
            SynthKind::XorBlobs => {
                let a = if (i / 2) % 2 == 0 { 1.5 } else { -1.5 };
                let b = if label == 1 { -a } else { a };
                mean[0] = a;
                mean[1] = b;
                0.5
            }
        };
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((0.5 + (m + noise * z) * SQUASH).clamp(0.0, 1.0) as f32);
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 1, 1, dim], data)?;
    Dataset::new(images, labels, 2, kind.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(SynthKind::XorBlobs, 101, 4, 3).unwrap();
        let b = synth_dataset(SynthKind::XorBlobs, 101, 4, 3).unwrap();
        assert_eq!(a, b);
        let ones = a.labels.iter().filter(|&&l| l == 1).count() as i64;
        assert!((ones - (101 - ones)).abs() <= 1);
        assert!(synth_dataset(SynthKind::TwoGaussians, 1, 4, 0).is_err());
    }

    #[test]
    fn two_gaussians_linearly_separable() {
        let d = synth_dataset(SynthKind::TwoGaussians, 4000, 8, 11).unwrap();
        let correct = d
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| ((d.images.data()[i * 8] > 0.5) as usize) == l)
            .count();
        assert!(correct as f64 / 4000.0 >= 0.995);
    }
}
