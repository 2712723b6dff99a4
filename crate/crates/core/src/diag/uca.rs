use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, ParamId};
use crate::precision::Precision;
use crate::train::{
    lr_schedule, shuffle_rng, train_step_observed, KdMode, OptimizerState, TrainConfig,
};

/// Flattened weight gradients of every conv/linear layer at each recorded
/// step, for one bit-width: `steps[n][l]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientTrace {
    pub bits: Option<Precision>,
    /// Layer indices, in order.
    pub layers: Vec<usize>,
    pub steps: Vec<Vec<Vec<f32>>>,
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine similarity over aligned (layer, step) pairs. Pairs where
/// either gradient has zero norm are skipped.
pub fn uca(a: &GradientTrace, b: &GradientTrace) -> Result<f64> {
    if a.layers != b.layers || a.steps.len() != b.steps.len() {
        return Err(Error::Input(format!(
            "traces are not aligned: {} vs {} steps, layers {:?} vs {:?}",
            a.steps.len(),
            b.steps.len(),
            a.layers,
            b.layers
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        if sa.len() != sb.len() {
            return Err(Error::Input("traces record different layer counts".into()));
        }
        for (ga, gb) in sa.iter().zip(sb) {
            if ga.len() != gb.len() {
                return Err(Error::Dimension(
                    "gradient lengths differ between traces".into(),
                ));
            }
            if let Some(c) = cosine(ga, gb) {
                sum += c;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedStatistic(
            "no (layer, step) pair has two non-zero gradients".into(),
        ));
    }
    Ok(sum / count as f64)
}

type StepGradients = BTreeMap<Precision, Vec<Vec<f32>>>;

/// Runs `steps` joint training steps from `model` (which is updated) on
/// seeded batches of `data`, handing each bit's weight gradients to
/// `on_step` before the optimizer update. Every bit-width is trained on the
/// ground-truth loss here, whatever `config.kd_mode` says: distillation
/// terms would compare each width against a near-copy of itself.
fn run_recorded(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    config: &TrainConfig,
    steps: usize,
    mut on_step: impl FnMut(StepGradients),
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Usage(
            "gradient recording needs at least one step".into(),
        ));
    }
    config.validate()?;
    let config = &TrainConfig {
        kd_mode: KdMode::Off,
        ..config.clone()
    };
    let layers = model.parametric_layers();
    let mut rng = shuffle_rng(config.seed);
    let mut opt = OptimizerState::from_config(config);
    let mut step = 0usize;
    let mut epoch = 0usize;
    while step < steps {
        let batches = data.shuffled_batches(config.batch_size, &mut rng);
        if batches.is_empty() {
            return Err(Error::Input("dataset too small for one batch".into()));
        }
        let lr = lr_schedule(epoch, config);
        for idx in batches {
            if step == steps {
                break;
            }
            let (x, y) = data.batch(&idx);
            let mut current = StepGradients::new();
            train_step_observed(
                model,
                &x,
                &y,
                config,
                &mut opt,
                lr,
                step as u64,
                |bits, tape, pass, grads| {
                    let mut per_layer = Vec::with_capacity(layers.len());
                    for &l in &layers {
                        let var = pass
                            .params
                            .iter()
                            .find(|(id, _)| *id == ParamId::Weight(l))
                            .map(|(_, v)| *v)
                            .expect("every parametric layer has a weight leaf");
                        let g = grads
                            .get(var)
                            .map_or_else(|| vec![0.0; tape.value(var).len()], <[f32]>::to_vec);
                        per_layer.push(g);
                    }
                    current.insert(bits, per_layer);
                },
            )?;
            on_step(current);
            step += 1;
        }
        epoch += 1;
    }
    Ok(())
}

/// Records full gradient traces. Memory grows with `steps × parameters ×
/// bit-widths`; [`record_uca`] keeps only running sums.
pub fn record_gradient_traces(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    config: &TrainConfig,
    steps: usize,
) -> Result<BTreeMap<Precision, GradientTrace>> {
    let layers = model.parametric_layers();
    let mut traces: BTreeMap<Precision, GradientTrace> = config
        .candidate_bits
        .iter()
        .map(|&b| {
            (
                b,
                GradientTrace {
                    bits: Some(b),
                    layers: layers.clone(),
                    steps: Vec::new(),
                },
            )
        })
        .collect();
    run_recorded(model, data, config, steps, |current| {
        for (bits, g) in current {
            traces.get_mut(&bits).expect("trace per bit").steps.push(g);
        }
    })?;
    Ok(traces)
}

/// Trains for `steps` steps like [`record_gradient_traces`] and returns the
/// pairwise UCA matrix among the candidate bit-widths.
pub fn record_uca(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    config: &TrainConfig,
    steps: usize,
) -> Result<UcaMatrix> {
    let mut acc = UcaAccumulator::new(config.candidate_bits.clone());
    let mut failure = None;
    run_recorded(model, data, config, steps, |current| {
        if failure.is_none() {
            failure = acc.push_step(&current).err();
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => acc.finish(),
    }
}

/// Running sums of per-(layer, step) cosines for every pair of bit-widths.
#[derive(Clone, Debug)]
pub struct UcaAccumulator {
    bits: Vec<Precision>,
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
    steps: usize,
}

impl UcaAccumulator {
    pub fn new(bits: Vec<Precision>) -> Self {
        let k = bits.len();
        UcaAccumulator {
            bits,
            sums: vec![vec![0.0; k]; k],
            counts: vec![vec![0; k]; k],
            steps: 0,
        }
    }

    /// Adds one step: per bit-width, the flattened gradient of each layer.
    pub fn push_step(&mut self, step: &StepGradients) -> Result<()> {
        let grads: Vec<&Vec<Vec<f32>>> = self
            .bits
            .iter()
            .map(|b| {
                step.get(b)
                    .ok_or_else(|| Error::Input(format!("step has no gradients for {b} bits")))
            })
            .collect::<Result<_>>()?;
        for i in 0..grads.len() {
            for j in i..grads.len() {
                if grads[i].len() != grads[j].len() {
                    return Err(Error::Input(
                        "bit-widths record different layer counts".into(),
                    ));
                }
                for (ga, gb) in grads[i].iter().zip(grads[j]) {
                    if ga.len() != gb.len() {
                        return Err(Error::Dimension(
                            "gradient lengths differ between bit-widths".into(),
                        ));
                    }
                    if let Some(c) = cosine(ga, gb) {
                        self.sums[i][j] += c;
                        self.counts[i][j] += 1;
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    pub fn finish(&self) -> Result<UcaMatrix> {
        let k = self.bits.len();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                if self.counts[i][j] == 0 {
                    return Err(Error::UndefinedStatistic(format!(
                        "no (layer, step) pair has non-zero gradients at both {} and {} bits",
                        self.bits[i], self.bits[j]
                    )));
                }
                let v = self.sums[i][j] / self.counts[i][j] as f64;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(UcaMatrix {
            bits: self.bits.clone(),
            values,
            steps: self.steps,
        })
    }
}

/// Pairwise UCA among bit-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcaMatrix {
    pub bits: Vec<Precision>,
    /// Symmetric; `values[i][j]` pairs `bits[i]` with `bits[j]`.
    pub values: Vec<Vec<f64>>,
    pub steps: usize,
}

pub fn uca_matrix(traces: &BTreeMap<Precision, GradientTrace>) -> Result<UcaMatrix> {
    let bits: Vec<Precision> = traces.keys().copied().collect();
    let mut values = vec![vec![0.0; bits.len()]; bits.len()];
    for i in 0..bits.len() {
        for j in i..bits.len() {
            let v = uca(&traces[&bits[i]], &traces[&bits[j]])?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let steps = traces.values().next().map_or(0, |t| t.steps.len());
    Ok(UcaMatrix {
        bits,
        values,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(steps: Vec<Vec<Vec<f32>>>) -> GradientTrace {
        GradientTrace {
            bits: None,
            layers: (0..steps[0].len()).collect(),
            steps,
        }
    }

    #[test]
    fn uca_examples() {
        let a = trace(vec![vec![vec![1.0, 2.0], vec![0.5, -1.0]]]);
        let neg = trace(vec![vec![vec![-1.0, -2.0], vec![-0.5, 1.0]]]);
        assert!((uca(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((uca(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let x = trace(vec![vec![vec![1.0, 0.0]]]);
        let y = trace(vec![vec![vec![0.0, 1.0]]]);
        assert_eq!(uca(&x, &y).unwrap(), 0.0);
        let z = trace(vec![vec![vec![0.0, 0.0]]]);
        assert!(matches!(uca(&x, &z), Err(Error::UndefinedStatistic(_))));
    }
}
