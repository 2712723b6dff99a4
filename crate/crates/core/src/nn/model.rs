use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::bn::BatchNormBank;
use crate::error::{Error, Result};
use crate::precision::{format_bit_list, Precision};
use crate::quant::{self, code_of_value, quantize_activations_on_tape, quantize_weights_on_tape};
use crate::tensor::conv::{im2col, ConvGeometry};
use crate::tensor::gemm::matmul_nn;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Kernel `[O, C, k, k]`.
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
        full_precision: bool,
    },
    /// Weight `[in, out]`.
    Linear {
        weight: Tensor,
        bias: Tensor,
        full_precision: bool,
    },
    BatchNorm(BatchNormBank),
    Activation,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv { bias, .. } | Layer::Linear { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn is_full_precision(&self) -> bool {
        matches!(
            self,
            Layer::Conv {
                full_precision: true,
                ..
            } | Layer::Linear {
                full_precision: true,
                ..
            }
        )
    }

    pub fn bank(&self) -> Option<&BatchNormBank> {
        match self {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        }
    }
}

/// Identifies one trainable tensor of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma(usize, Precision),
    Beta(usize, Precision),
}

/// How BatchNorm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics of the bound copy are updated.
    Train,
    /// Stored running statistics; nothing is updated.
    Eval,
    /// Same statistics handling as `Train`, without parameter gradients.
    Calibrate,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Tape leaves for every parameter that took part.
    pub params: Vec<(ParamId, Var)>,
    /// Output of each layer, indexed like the layer list.
    pub sites: Vec<Var>,
    bn_updates: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

/// Float master weights, per-bit BatchNorm banks and the selected precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnyPrecisionModel {
    arch: Architecture,
    layers: Vec<Layer>,
    active: Precision,
    /// BatchNorm copy bound at the moment; equal to `active` unless rebound
    /// with [`AnyPrecisionModel::select_bitwidth_with_bn`].
    bn_key: Precision,
}

/// Builds a model with He-normal weights (`σ² = 2 / fan_in`), zero biases
/// and fresh BatchNorm copies for every candidate bit-width.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<AnyPrecisionModel> {
    let plan = arch.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = plan.parametric[0];
    let last = *plan.parametric.last().expect("plan has parametric layers");
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut in_shape: Vec<usize> = arch.input_shape.to_vec();
    for (i, spec) in arch.layers.iter().enumerate() {
        let full_precision = i == first || i == last;
        let layer = match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let fan_in = in_shape[0] * kernel * kernel;
                let shape = [out_channels, in_shape[0], kernel, kernel];
                Layer::Conv {
                    weight: he_normal(&shape, fan_in, &mut rng),
                    bias: Tensor::zeros(&[out_channels]),
                    stride,
                    pad,
                    full_precision,
                }
            }
            LayerSpec::Linear { out_features } => {
                let fan_in = in_shape[0];
                Layer::Linear {
                    weight: he_normal(&[fan_in, out_features], fan_in, &mut rng),
                    bias: Tensor::zeros(&[out_features]),
                    full_precision,
                }
            }
            LayerSpec::BatchNorm => {
                Layer::BatchNorm(BatchNormBank::new(in_shape[0], &arch.candidate_bits))
            }
            LayerSpec::Activation => Layer::Activation,
            LayerSpec::MaxPool { size } => Layer::MaxPool { size },
            LayerSpec::Flatten => Layer::Flatten,
        };
        layers.push(layer);
        in_shape = plan.output_shapes[i].clone();
    }
    let top = *arch.candidate_bits.last().expect("validated non-empty");
    Ok(AnyPrecisionModel {
        arch: arch.clone(),
        layers,
        active: top,
        bn_key: top,
    })
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Whether an integer dot product of `len` terms bounded by `max_w·max_a`
/// stays within the range where `f32` represents every integer.
pub(crate) fn f32_exact(max_w: u32, max_a: u32, len: usize) -> bool {
    (max_w as u64) * (max_a as u64) * (len as u64) < (1u64 << 24)
}

/// `a[m×k] · b[k×n]` for integer-valued operands, exact when `exact32`
/// holds and otherwise accumulated in `f64`.
pub(crate) fn exact_product(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    exact32: bool,
) -> Vec<f32> {
    if exact32 {
        let mut c = vec![0.0f32; m * n];
        matmul_nn(m, k, n, a, b, &mut c);
        c
    } else {
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let mut c = vec![0.0f64; m * n];
        matmul_nn(m, k, n, &a, &b, &mut c);
        c.into_iter().map(|v| v as f32).collect()
    }
}

impl AnyPrecisionModel {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn candidate_bits(&self) -> &[Precision] {
        &self.arch.candidate_bits
    }

    pub fn active_bits(&self) -> Precision {
        self.active
    }

    pub fn bound_bn(&self) -> Precision {
        self.bn_key
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Linear { bias, .. }) => bias.len(),
            _ => unreachable!("validated architecture ends in linear"),
        }
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    /// Bit-widths available in every BatchNorm bank (all widths if the model
    /// has no BatchNorm layer).
    pub fn available_bits(&self) -> Vec<Precision> {
        let mut banks = self.layers.iter().filter_map(Layer::bank);
        let Some(first) = banks.next() else {
            let mut all: Vec<Precision> = (1..=8).map(Precision::Int).collect();
            all.push(Precision::Full);
            return all;
        };
        let mut keys = first.keys();
        for b in banks {
            keys.retain(|k| b.contains(*k));
        }
        keys
    }

    fn check_bn_available(&self, bits: Precision) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bank) = layer {
                if !bank.contains(bits) {
                    return Err(Error::PrecisionUnavailable {
                        bits,
                        layer: i,
                        available: bank.available(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Sets the quantizers to `bits` and binds every BatchNorm layer to `Φ_bits`.
    pub fn select_bitwidth(&mut self, bits: Precision) -> Result<()> {
        self.check_bn_available(bits)?;
        self.active = bits;
        self.bn_key = bits;
        Ok(())
    }

    /// Runs the quantizers at `bits` while binding BatchNorm to `Φ_bn`.
    /// Used to evaluate a model at a width it has no statistics for.
    pub fn select_bitwidth_with_bn(&mut self, bits: Precision, bn: Precision) -> Result<()> {
        self.check_bn_available(bn)?;
        self.active = bits;
        self.bn_key = bn;
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Weight(i) => self.layers.get(i)?.weight(),
            ParamId::Bias(i) => self.layers.get(i)?.bias(),
            ParamId::Gamma(i, b) => Some(&self.layers.get(i)?.bank()?.get(b)?.gamma),
            ParamId::Beta(i, b) => Some(&self.layers.get(i)?.bank()?.get(b)?.beta),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let layer = self.layers.get_mut(id_layer(id))?;
        match (id, layer) {
            (ParamId::Weight(_), Layer::Conv { weight, .. } | Layer::Linear { weight, .. }) => {
                Some(weight)
            }
            (ParamId::Bias(_), Layer::Conv { bias, .. } | Layer::Linear { bias, .. }) => Some(bias),
            (ParamId::Gamma(_, b), Layer::BatchNorm(bank)) => Some(&mut bank.get_mut(b)?.gamma),
            (ParamId::Beta(_, b), Layer::BatchNorm(bank)) => Some(&mut bank.get_mut(b)?.beta),
            _ => None,
        }
    }

    /// Every trainable tensor: weights, biases and all BatchNorm copies.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { .. } | Layer::Linear { .. } => {
                    ids.push(ParamId::Weight(i));
                    ids.push(ParamId::Bias(i));
                }
                Layer::BatchNorm(bank) => {
                    for b in bank.keys() {
                        ids.push(ParamId::Gamma(i, b));
                        ids.push(ParamId::Beta(i, b));
                    }
                }
                _ => {}
            }
        }
        ids
    }

    /// Indices of conv and linear layers.
    pub fn parametric_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.bank().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bank(&self, layer: usize) -> Option<&BatchNormBank> {
        self.layers.get(layer)?.bank()
    }

    pub fn bank_mut(&mut self, layer: usize) -> Option<&mut BatchNormBank> {
        match self.layers.get_mut(layer)? {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for id in self.param_ids() {
            if let Some(t) = self.param_mut(id) {
                t.zero_grad();
            }
        }
    }

    /// Adds a backward pass's parameter gradients into the model's buffers.
    pub fn accumulate_gradients(&mut self, grads: &Gradients, pass: &ForwardPass) {
        for &(id, var) in &pass.params {
            if let Some(t) = self.param_mut(id) {
                grads.accumulate_into(var, t);
            }
        }
    }

    /// Number of scalar parameters in conv/linear layers (weights and biases).
    pub fn shared_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| Some(l.weight()?.len() + l.bias()?.len()))
            .sum()
    }

    /// Learnable BatchNorm parameters (`γ`, `β`) of a single copy per layer.
    pub fn bn_parameters_per_copy(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::bank)
            .map(|b| 2 * b.channels())
            .sum()
    }

    /// All learnable parameters including every BatchNorm copy.
    pub fn parameter_count(&self) -> usize {
        let bn: usize = self
            .layers
            .iter()
            .filter_map(Layer::bank)
            .map(|b| 2 * b.channels() * b.len())
            .sum();
        self.shared_parameter_count() + bn
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input_shape {
            return Err(Error::Dimension(format!(
                "model expects [B, {}, {}, {}] input, got {s:?}",
                self.arch.input_shape[0], self.arch.input_shape[1], self.arch.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` without touching model state.
    /// Batch statistics gathered in `Train`/`Calibrate` mode are returned in
    /// the pass and applied by [`AnyPrecisionModel::forward`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        param_grads: bool,
    ) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        let p = self.active;
        let track = param_grads && mode != Mode::Calibrate;
        let mut params = Vec::new();
        let mut sites = Vec::with_capacity(self.layers.len());
        let mut bn_updates = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                    full_precision,
                } => {
                    let w = tape.leaf(weight.clone(), track);
                    let b = tape.leaf(bias.clone(), track);
                    params.push((ParamId::Weight(i), w));
                    params.push((ParamId::Bias(i), b));
                    let y = if *full_precision || p.is_full() {
                        tape.conv2d(h, w, *stride, *pad)?
                    } else {
                        self.quantized_conv(tape, h, w, *stride, *pad, p)?
                    };
                    tape.add_bias(y, b)?
                }
                Layer::Linear {
                    weight,
                    bias,
                    full_precision,
                } => {
                    let w = tape.leaf(weight.clone(), track);
                    let b = tape.leaf(bias.clone(), track);
                    params.push((ParamId::Weight(i), w));
                    params.push((ParamId::Bias(i), b));
                    let y = if *full_precision || p.is_full() {
                        tape.matmul(h, w)?
                    } else {
                        quantized_linear(tape, h, w, p)?
                    };
                    tape.add_bias(y, b)?
                }
                Layer::BatchNorm(bank) => {
                    let state =
                        bank.get(self.bn_key)
                            .ok_or_else(|| Error::PrecisionUnavailable {
                                bits: self.bn_key,
                                layer: i,
                                available: bank.available(),
                            })?;
                    let g = tape.leaf(state.gamma.clone(), track);
                    let b = tape.leaf(state.beta.clone(), track);
                    params.push((ParamId::Gamma(i, self.bn_key), g));
                    params.push((ParamId::Beta(i, self.bn_key), b));
                    match mode {
                        Mode::Train | Mode::Calibrate => {
                            let (y, mean, var) = tape.batch_norm_train(h, g, b, state.eps)?;
                            bn_updates.push((i, mean, var));
                            y
                        }
                        Mode::Eval => tape.batch_norm_eval(
                            h,
                            g,
                            b,
                            &state.running_mean,
                            &state.running_var,
                            state.eps,
                        )?,
                    }
                }
                Layer::Activation => {
                    if p.is_full() {
                        tape.relu(h)
                    } else {
                        quantize_activations_on_tape(tape, h, p)
                    }
                }
                Layer::MaxPool { size } => tape.max_pool2d(h, *size)?,
                Layer::Flatten => {
                    let s = tape.value(h).shape();
                    let batch = s[0];
                    let rest = s[1..].iter().product();
                    tape.reshape(h, vec![batch, rest])?
                }
            };
            sites.push(h);
        }
        Ok(ForwardPass {
            logits: h,
            params,
            sites,
            bn_updates,
        })
    }

    /// Forward pass that also folds batch statistics into the bound
    /// BatchNorm copies when `mode` is `Train` or `Calibrate`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        param_grads: bool,
    ) -> Result<ForwardPass> {
        let pass = self.forward_on_tape(tape, x, mode, param_grads)?;
        let key = self.bn_key;
        for (i, mean, var) in &pass.bn_updates {
            let state = self
                .bank_mut(*i)
                .and_then(|b| b.get_mut(key))
                .expect("bound state checked during forward");
            state.update_running(mean, var);
        }
        Ok(pass)
    }

    /// Eval-mode logits for a batch `[B, C, H, W]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.detached());
        let pass = self.forward_on_tape(&mut tape, xv, Mode::Eval, false)?;
        Ok(tape.value(pass.logits).detached())
    }

    /// Logits with the given BatchNorm mode; `Train` updates running statistics.
    pub fn model_forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        if !training {
            return self.logits(x);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.detached());
        let pass = self.forward(&mut tape, xv, Mode::Train, false)?;
        Ok(tape.value(pass.logits).detached())
    }

    fn quantized_conv(
        &self,
        tape: &mut Tape,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        p: Precision,
    ) -> Result<Var> {
        let max_a = p.max_level().expect("quantized precision");
        let (wq, q) = quantize_weights_on_tape(tape, w, p)?;
        let xs = tape.value(x).shape().to_vec();
        let ws = tape.value(w).shape().to_vec();
        if xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d shape mismatch: input {xs:?}, kernel {ws:?}"
            )));
        }
        let g = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        let (batch, oc, kl, pos) = (xs[0], ws[0], g.patch_len(), g.positions());
        let exact32 = f32_exact(q.max_level(), max_a, kl);
        let factor = quant::output_factor(q.scale, max_a);
        let codes: Vec<f32> = tape
            .value(x)
            .data()
            .iter()
            .map(|&v| code_of_value(v, max_a))
            .collect();
        let signed: Vec<f32> = q.signed.iter().map(|&v| v as f32).collect();
        let mut cols = vec![0.0f32; kl * pos];
        let mut out = Vec::with_capacity(batch * oc * pos);
        for b in 0..batch {
            im2col(
                &g,
                &codes[b * g.image_len()..(b + 1) * g.image_len()],
                &mut cols,
            );
            let dot = exact_product(oc, kl, pos, &signed, &cols, exact32);
            out.extend(dot.into_iter().map(|d| d * factor));
        }
        let value = Tensor::new(vec![batch, oc, g.out_h, g.out_w], out)?;
        tape.conv2d_with_value(x, wq, stride, pad, value)
    }

    /// Bit-widths listed in BatchNorm banks beyond the candidate list.
    pub fn calibrated_bits(&self) -> Vec<Precision> {
        self.available_bits()
            .into_iter()
            .filter(|b| !self.arch.candidate_bits.contains(b))
            .collect()
    }

    pub fn describe_bits(&self) -> String {
        format_bit_list(&self.available_bits())
    }
}

fn id_layer(id: ParamId) -> usize {
    match id {
        ParamId::Weight(i) | ParamId::Bias(i) | ParamId::Gamma(i, _) | ParamId::Beta(i, _) => i,
    }
}

fn quantized_linear(tape: &mut Tape, x: Var, w: Var, p: Precision) -> Result<Var> {
    let max_a = p.max_level().expect("quantized precision");
    let (wq, q) = quantize_weights_on_tape(tape, w, p)?;
    let (xs, ws) = (
        tape.value(x).shape().to_vec(),
        tape.value(w).shape().to_vec(),
    );
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::Dimension(format!(
            "matmul shape mismatch: {xs:?} x {ws:?}"
        )));
    }
    let (m, k, n) = (xs[0], xs[1], ws[1]);
    let codes: Vec<f32> = tape
        .value(x)
        .data()
        .iter()
        .map(|&v| code_of_value(v, max_a))
        .collect();
    let exact32 = f32_exact(q.max_level(), max_a, k);
    let factor = quant::output_factor(q.scale, max_a);
    let signed: Vec<f32> = q.signed.iter().map(|&v| v as f32).collect();
    let dot = exact_product(m, k, n, &codes, &signed, exact32);
    let value = Tensor::new(vec![m, n], dot.into_iter().map(|d| d * factor).collect())?;
    tape.matmul_with_value(x, wq, value)
}
