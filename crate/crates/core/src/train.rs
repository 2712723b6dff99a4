//! Joint any-precision training: one forward/backward per candidate
//! bit-width on the same batch, gradients summed on the shared master
//! weights, one optimizer update per step.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{count_correct, evaluate, History, MetricRow, Split};
use crate::nn::{AnyPrecisionModel, ForwardPass, Mode, ParamId};
use crate::precision::Precision;
use crate::tensor::softmax_rows;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// Cross-entropy against labels at every bit-width.
    Off,
    /// Cross-entropy at the top bit-width; every other bit-width matches the
    /// softened output of the next wider one.
    Recursive,
}

fn default_temperature() -> f32 {
    1.0
}

fn default_decay_factor() -> f32 {
    0.1
}

fn default_momentum() -> f32 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub candidate_bits: Vec<Precision>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f32,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f32,
    pub kd_mode: KdMode,
    #[serde(default = "default_temperature")]
    pub kd_temperature: f32,
    /// Only used by `sgd_momentum`.
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam at 1e-3 with recursive distillation.
    pub fn new(
        candidate_bits: Vec<Precision>,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        TrainConfig {
            candidate_bits,
            epochs,
            batch_size,
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: default_decay_factor(),
            kd_mode: KdMode::Recursive,
            kd_temperature: default_temperature(),
            momentum: default_momentum(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::nn::arch::validate_bits(&self.candidate_bits)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "lr_decay_epochs must be strictly increasing".into(),
            ));
        }
        if self.kd_temperature.is_nan() || self.kd_temperature <= 0.0 {
            return Err(Error::Config("kd_temperature must be positive".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::Config(
                "base_lr must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (0-based): one decay per boundary `≤ epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f32 {
    let passed = config
        .lr_decay_epochs
        .iter()
        .filter(|&&e| e <= epoch)
        .count();
    config.base_lr * config.lr_decay_factor.powi(passed as i32)
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    /// Adam first moment, or the SGD velocity.
    pub m: Vec<f32>,
    /// Adam second moment (empty for SGD).
    pub v: Vec<f32>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub momentum: f32,
    pub buffers: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            momentum: default_momentum(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        OptimizerState {
            momentum: config.momentum,
            ..Self::new(config.optimizer)
        }
    }

    /// Updates every parameter that holds a gradient and clears the
    /// gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, model: &mut AnyPrecisionModel, lr: f32) {
        for id in model.param_ids() {
            let param = model.param_mut(id).expect("listed parameter exists");
            let Some(grad) = param.take_grad() else {
                continue;
            };
            let buf = self.buffers.entry(id).or_default();
            match self.kind {
                OptimizerKind::Adam => adam_update(param.data_mut(), &grad, buf, lr),
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_update(param.data_mut(), &grad, buf, lr, self.momentum)
                }
            }
        }
    }
}

/// One Adam step (no weight decay) with bias correction.
pub fn adam_update(param: &mut [f32], grad: &[f32], state: &mut Moments, lr: f32) {
    assert_eq!(
        param.len(),
        grad.len(),
        "parameter/gradient length mismatch"
    );
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_momentum_update(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    lr: f32,
    momentum: f32,
) {
    assert_eq!(
        param.len(),
        grad.len(),
        "parameter/gradient length mismatch"
    );
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
    }
    state.steps += 1;
    for i in 0..param.len() {
        state.m[i] = momentum * state.m[i] + grad[i];
        param[i] -= lr * state.m[i];
    }
}

/// Loss values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    /// Per-bit losses in the order the branches ran (widest first).
    pub per_bit: Vec<(Precision, f32)>,
    pub total: f32,
}

/// Row-major `[B, C]` probabilities of `logits / T`.
pub fn soft_targets(logits: &Tensor, temperature: f32) -> Vec<f32> {
    let classes = logits.shape().get(1).copied().unwrap_or(1);
    softmax_rows(logits.data(), classes, 1.0 / temperature)
}

/// Records the distillation-aware losses for logits already on one tape:
/// the widest bit-width gets cross-entropy, each other bit-width gets KL
/// against the detached soft targets of the next wider one.
pub fn recursive_kd_losses(
    tape: &mut Tape,
    per_bit_logits: &BTreeMap<Precision, Var>,
    candidate_bits: &[Precision],
    labels: &[usize],
    temperature: f32,
) -> Result<BTreeMap<Precision, Var>> {
    if let Some(missing) = candidate_bits
        .iter()
        .find(|b| !per_bit_logits.contains_key(b))
    {
        return Err(Error::Usage(format!(
            "no logits supplied for {missing}-bit"
        )));
    }
    let mut bits = candidate_bits.to_vec();
    bits.sort();
    let mut out = BTreeMap::new();
    let mut teacher: Option<Vec<f32>> = None;
    for &b in bits.iter().rev() {
        let logits = per_bit_logits[&b];
        let loss = match &teacher {
            None => tape.softmax_cross_entropy(logits, labels)?,
            Some(t) => tape.kl_divergence(logits, t, temperature)?,
        };
        teacher = Some(soft_targets(tape.value(logits), temperature));
        out.insert(b, loss);
    }
    Ok(out)
}

/// One joint step over all candidate bit-widths (widest first) followed by
/// a single optimizer update. `observe` sees each branch's forward pass and
/// gradients before they are summed into the model.
#[allow(clippy::too_many_arguments)]
pub fn train_step_observed(
    model: &mut AnyPrecisionModel,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f32,
    step: u64,
    mut observe: impl FnMut(Precision, &Tape, &ForwardPass, &Gradients),
) -> Result<LossRecord> {
    if model.candidate_bits() != config.candidate_bits.as_slice() {
        return Err(Error::Usage(format!(
            "model trains at {} but the config lists {}",
            crate::precision::format_bit_list(model.candidate_bits()),
            crate::precision::format_bit_list(&config.candidate_bits)
        )));
    }
    model.zero_grads();
    let mut per_bit = Vec::with_capacity(config.candidate_bits.len());
    let mut teacher: Option<Vec<f32>> = None;
    for &bits in config.candidate_bits.iter().rev() {
        model.select_bitwidth(bits)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.detached());
        let pass = model.forward(&mut tape, xv, Mode::Train, true)?;
        let loss = match (&teacher, config.kd_mode) {
            (Some(t), KdMode::Recursive) => {
                tape.kl_divergence(pass.logits, t, config.kd_temperature)?
            }
            _ => tape.softmax_cross_entropy(pass.logits, labels)?,
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            model.zero_grads();
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        observe(bits, &tape, &pass, &grads);
        model.accumulate_gradients(&grads, &pass);
        if config.kd_mode == KdMode::Recursive {
            teacher = Some(soft_targets(tape.value(pass.logits), config.kd_temperature));
        }
        per_bit.push((bits, value));
    }
    opt.step(model, lr);
    let total = per_bit.iter().map(|(_, l)| l).sum();
    Ok(LossRecord {
        step,
        per_bit,
        total,
    })
}

pub fn train_step(
    model: &mut AnyPrecisionModel,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f32,
    step: u64,
) -> Result<LossRecord> {
    train_step_observed(model, x, labels, config, opt, lr, step, |_, _, _, _| {})
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: AnyPrecisionModel,
    /// Snapshot with the highest mean accuracy over bit-widths on the
    /// evaluation split (the training split when none is given).
    pub best_model: AnyPrecisionModel,
    pub best_epoch: Option<usize>,
    pub history: History,
    pub steps: u64,
}

/// Seeded shuffling stream, independent of the initialization stream.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Runs `config.epochs` epochs of shuffled mini-batches. The training split
/// rows of the history hold running averages of the per-branch training
/// losses and accuracies; the test split rows come from eval-mode passes
/// over `eval_set`.
///
/// On divergence `model` is restored to its state at the start of the
/// failing epoch and the error is returned.
pub fn train(
    model: &mut AnyPrecisionModel,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, eval_set, config, |_| {})
}

pub fn train_with_progress(
    model: &mut AnyPrecisionModel,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    mut progress: impl FnMut(&[MetricRow]),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = shuffle_rng(config.seed);
    let mut opt = OptimizerState::from_config(config);
    let mut history = History::default();
    let mut best: Option<(f64, usize, AnyPrecisionModel)> = None;
    let mut step = 0u64;
    let nbits = config.candidate_bits.len();
    for epoch in 0..config.epochs {
        let snapshot = model.clone();
        let lr = lr_schedule(epoch, config);
        let mut loss_sum = vec![0.0f64; nbits];
        let mut correct = vec![0usize; nbits];
        let mut seen = 0usize;
        for idx in train_set.shuffled_batches(config.batch_size, &mut rng) {
            let (x, y) = train_set.batch(&idx);
            let mut k = 0;
            let record = train_step_observed(
                model,
                &x,
                &y,
                config,
                &mut opt,
                lr,
                step,
                |_, tape, pass, _| {
                    correct[k] += count_correct(tape.value(pass.logits), &y);
                    k += 1;
                },
            );
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    *model = snapshot;
                    return Err(e);
                }
            };
            for (k, (_, l)) in record.per_bit.iter().enumerate() {
                loss_sum[k] += *l as f64 * y.len() as f64;
            }
            seen += y.len();
            step += 1;
        }
        let mut rows = Vec::new();
        for (k, &bits) in config.candidate_bits.iter().rev().enumerate() {
            rows.push(MetricRow {
                epoch,
                bits,
                split: Split::Train,
                loss: loss_sum[k] / seen.max(1) as f64,
                accuracy: correct[k] as f64 / seen.max(1) as f64,
            });
        }
        let score_set = eval_set.unwrap_or(train_set);
        let mut mean_acc = 0.0;
        for &bits in &config.candidate_bits {
            let (loss, acc) = evaluate(model, score_set, bits, 256)?;
            mean_acc += acc / nbits as f64;
            if eval_set.is_some() {
                rows.push(MetricRow {
                    epoch,
                    bits,
                    split: Split::Test,
                    loss,
                    accuracy: acc,
                });
            }
        }
        if best.as_ref().is_none_or(|(b, _, _)| mean_acc > *b) {
            best = Some((mean_acc, epoch, model.clone()));
        }
        progress(&rows);
        history.rows.extend(rows);
    }
    let top = *config.candidate_bits.last().expect("validated");
    model.select_bitwidth(top)?;
    let (best_epoch, best_model) = match best {
        Some((_, e, mut m)) => {
            m.select_bitwidth(top)?;
            (Some(e), m)
        }
        None => (None, model.clone()),
    };
    Ok(TrainOutcome {
        final_model: model.clone(),
        best_model,
        best_epoch,
        history,
        steps: step,
    })
}
