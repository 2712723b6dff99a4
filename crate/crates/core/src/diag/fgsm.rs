use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{count_correct, evaluate};
use crate::nn::{AnyPrecisionModel, Mode};
use crate::precision::Precision;
use crate::tensor::{Tape, Tensor};

/// One signed-gradient step of size `epsilon` on the cross-entropy at
/// `bits` (straight-through surrogates in the backward), clipped to
/// `[0, 1]`. Every coordinate moves by at most `epsilon` in `f32`.
pub fn fgsm_attack(
    model: &mut AnyPrecisionModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    bits: Precision,
) -> Result<Tensor> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::Input(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("attack inputs must lie in [0, 1]".into()));
    }
    let saved = (model.active_bits(), model.bound_bn());
    model.select_bitwidth(bits)?;
    let grad = input_gradient(model, x, labels);
    model.select_bitwidth_with_bn(saved.0, saved.1)?;
    let grad = grad?;
    let data = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| perturb(v, g, epsilon))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn input_gradient(model: &AnyPrecisionModel, x: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.detached(), true);
    let pass = model.forward_on_tape(&mut tape, xv, Mode::Eval, false)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(grads
        .get(xv)
        .map_or_else(|| vec![0.0; x.len()], <[f32]>::to_vec))
}

fn perturb(v: f32, g: f32, eps: f32) -> f32 {
    let step = if g > 0.0 {
        eps
    } else if g < 0.0 {
        -eps
    } else {
        0.0
    };
    let mut out = (v + step).clamp(0.0, 1.0);
    // `v + eps` can round past the ball; step back one ulp at a time.
    while (out - v).abs() > eps {
        out = if out > v {
            f32_prev(out)
        } else {
            f32_next(out)
        };
    }
    out
}

fn f32_next(x: f32) -> f32 {
    if x == 0.0 {
        return f32::from_bits(1);
    }
    if x > 0.0 {
        f32::from_bits(x.to_bits() + 1)
    } else {
        f32::from_bits(x.to_bits() - 1)
    }
}

fn f32_prev(x: f32) -> f32 {
    -f32_next(-x)
}

/// Accuracy of adversarial examples crafted at each attack width (rows) and
/// evaluated at each defense width (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub epsilon: f32,
    pub bits: Vec<Precision>,
    /// Clean accuracy at each width.
    pub clean: Vec<f64>,
    /// `accuracy[attack][defend]`
    pub accuracy: Vec<Vec<f64>>,
    /// Largest `|x_adv − x|` over all generated examples.
    pub max_perturbation: f32,
    pub samples: usize,
}

impl RobustnessMatrix {
    /// Fraction of off-diagonal cells whose accuracy exceeds the diagonal
    /// cell of their row.
    pub fn off_diagonal_above_row_diagonal(&self) -> f64 {
        let k = self.bits.len();
        if k < 2 {
            return 0.0;
        }
        let mut above = 0;
        for i in 0..k {
            for j in 0..k {
                if i != j && self.accuracy[i][j] > self.accuracy[i][i] {
                    above += 1;
                }
            }
        }
        above as f64 / (k * (k - 1)) as f64
    }
}

pub fn cross_bit_robustness(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    epsilon: f32,
    bits: &[Precision],
    batch_size: usize,
) -> Result<RobustnessMatrix> {
    if data.is_empty() {
        return Err(Error::Input("robustness evaluation needs data".into()));
    }
    let mut clean = Vec::with_capacity(bits.len());
    for &b in bits {
        clean.push(evaluate(model, data, b, batch_size.max(1))?.1);
    }
    let saved = (model.active_bits(), model.bound_bn());
    let mut accuracy = Vec::with_capacity(bits.len());
    let mut max_perturbation = 0.0f32;
    for &attack in bits {
        let mut correct = vec![0usize; bits.len()];
        for idx in data.ordered_batches(batch_size) {
            let (x, y) = data.batch(&idx);
            let adv = fgsm_attack(model, &x, &y, epsilon, attack)?;
            for (a, b) in adv.data().iter().zip(x.data()) {
                max_perturbation = max_perturbation.max((a - b).abs());
            }
            for (k, &defend) in bits.iter().enumerate() {
                model.select_bitwidth(defend)?;
                correct[k] += count_correct(&model.logits(&adv)?, &y);
            }
        }
        accuracy.push(
            correct
                .iter()
                .map(|&c| c as f64 / data.len() as f64)
                .collect(),
        );
    }
    model.select_bitwidth_with_bn(saved.0, saved.1)?;
    Ok(RobustnessMatrix {
        epsilon,
        bits: bits.to_vec(),
        clean,
        accuracy,
        max_perturbation,
        samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturb_examples() {
        let up = perturb(0.5, 1.0, 0.007);
        assert!(up - 0.5 <= 0.007 && (up - 0.507).abs() < 1e-6);
        assert_eq!(perturb(0.5, 1.0, 0.0), 0.5);
        assert_eq!(perturb(0.999, 1.0, 0.007), 1.0);
        assert_eq!(perturb(0.3, 0.0, 0.007), 0.3);
        for i in 0..1000 {
            let v = i as f32 / 999.0;
            for g in [-1.0f32, 1.0] {
                assert!((perturb(v, g, 0.007) - v).abs() <= 0.007);
            }
        }
    }
}
