//! Integer execution of a packed model at a chosen bit-width.

use std::path::Path;

use super::bitplane::{pack_bitplanes, popcount_dot, BitPlaneMatrix};
use super::packed::{PackedModel, PackedWeights, STORAGE_BITS};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::precision::Precision;
use crate::quant::{activation_code, activation_value, bitshift_truncate, output_factor};
use crate::tensor::conv::{im2col, max_pool2d, ConvGeometry};
use crate::tensor::gemm::matmul_nn;
use crate::tensor::tape::{bn_eval_apply, bn_eval_scale};
use crate::tensor::Tensor;

/// A quantized conv/linear layer ready for popcount evaluation.
#[derive(Clone, Debug)]
pub struct IntegerLayer {
    /// Unsigned weight codes, one row per output unit.
    pub planes: BitPlaneMatrix,
    pub weight_bits: u8,
    /// `mean|w| / (2^n − 1)`.
    pub scale: f32,
    pub bias: Vec<f32>,
}

impl IntegerLayer {
    /// Builds the layer from codes laid out `[outputs × inputs]`.
    pub fn new(
        codes: &[u8],
        outputs: usize,
        inputs: usize,
        weight_bits: u8,
        mean_abs: f32,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let max = (1u32 << weight_bits) - 1;
        Ok(IntegerLayer {
            planes: pack_bitplanes(codes, outputs, inputs, weight_bits)?,
            weight_bits,
            scale: mean_abs / max as f32,
            bias,
        })
    }

    pub fn outputs(&self) -> usize {
        self.planes.rows()
    }

    pub fn inputs(&self) -> usize {
        self.planes.cols()
    }
}

/// Pre-activations `y′ = s·(w_Q · x)/MAX_a + b` for `rows` input vectors of
/// activation codes. The signed dot uses
/// `w_Q · x = 2·(w_Q′ · x) − MAX_w·Σx`. Output is `[rows × outputs]`.
pub fn integer_layer_forward(
    x_codes: &[u8],
    rows: usize,
    layer: &IntegerLayer,
    act_bits: u8,
) -> Result<Vec<f32>> {
    if act_bits == 0 || act_bits > STORAGE_BITS {
        return Err(Error::Usage(format!(
            "activation width must be 1..=8, got {act_bits}"
        )));
    }
    let x = pack_bitplanes(x_codes, rows, layer.inputs(), act_bits)?;
    let dots = signed_dots(layer, &x)?;
    let factor = output_factor(layer.scale, (1u32 << act_bits) - 1);
    let n = layer.outputs();
    Ok(dots
        .iter()
        .enumerate()
        .map(|(i, &d)| d as f32 * factor + layer.bias[i % n])
        .collect())
}

/// Exact `Σ_i w_Q[o][i]·x[r][i]`, `[x.rows × outputs]`.
pub fn signed_dots(layer: &IntegerLayer, x: &BitPlaneMatrix) -> Result<Vec<i64>> {
    let unsigned = popcount_dot(&layer.planes, x)?;
    let sums = x.row_sums();
    let max_w = ((1u32 << layer.weight_bits) - 1) as i64;
    let n = layer.outputs();
    Ok(unsigned
        .iter()
        .enumerate()
        .map(|(i, &u)| 2 * u as i64 - max_w * sums[i / n] as i64)
        .collect())
}

#[derive(Clone, Debug)]
enum Stage {
    FloatConv {
        weight: Vec<f32>,
        bias: Vec<f32>,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    FloatLinear {
        /// `[in × out]`
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    IntConv {
        layer: IntegerLayer,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    IntLinear(IntegerLayer),
    BatchNorm {
        scale: Vec<f32>,
        mean: Vec<f32>,
        beta: Vec<f32>,
    },
    Activation,
    MaxPool(usize),
    Flatten,
}

/// Values flowing between stages: floats, or activation codes.
enum Flow {
    Float(Vec<f32>),
    Codes(Vec<u8>),
}

/// A packed model bound to one precision. Immutable and shareable.
#[derive(Clone, Debug)]
pub struct RuntimeModel {
    input_shape: [usize; 3],
    bits: u8,
    bn_bits: Precision,
    stages: Vec<Stage>,
    /// Per-sample output shape of each stage.
    shapes: Vec<Vec<usize>>,
}

impl PackedModel {
    /// Binds the model to `bits`: weight codes are the stored 8-bit codes
    /// shifted right by `8 − bits`, BatchNorm uses the `bits` copy.
    pub fn runtime(&self, bits: Precision) -> Result<RuntimeModel> {
        self.runtime_with_bn(bits, bits)
    }

    /// As [`PackedModel::runtime`] but with BatchNorm bound to `bn`.
    pub fn runtime_with_bn(&self, bits: Precision, bn: Precision) -> Result<RuntimeModel> {
        let Precision::Int(n) = bits else {
            return Err(Error::Usage(
                "a packed model stores 8-bit codes and runs at 1..=8 bits; evaluate the float checkpoint for full precision"
                    .into(),
            ));
        };
        let plan = self.arch.plan()?;
        let mut stages = Vec::with_capacity(self.arch.layers.len());
        let mut params = self.layers.iter();
        let mut banks = self.banks.iter();
        let mut in_shape: Vec<usize> = self.arch.input_shape.to_vec();
        for (i, spec) in self.arch.layers.iter().enumerate() {
            let stage = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let p = params
                        .next()
                        .expect("one packed layer per parametric layer");
                    match &p.weights {
                        PackedWeights::Float(w) => Stage::FloatConv {
                            weight: w.clone(),
                            bias: p.bias.clone(),
                            out_channels,
                            kernel,
                            stride,
                            pad,
                        },
                        PackedWeights::Codes8 { codes, mean_abs } => {
                            let codes = bitshift_truncate(codes, STORAGE_BITS, n)?;
                            let inputs = in_shape[0] * kernel * kernel;
                            Stage::IntConv {
                                layer: IntegerLayer::new(
                                    &codes,
                                    out_channels,
                                    inputs,
                                    n,
                                    *mean_abs,
                                    p.bias.clone(),
                                )?,
                                kernel,
                                stride,
                                pad,
                            }
                        }
                    }
                }
                LayerSpec::Linear { out_features } => {
                    let p = params
                        .next()
                        .expect("one packed layer per parametric layer");
                    match &p.weights {
                        PackedWeights::Float(w) => Stage::FloatLinear {
                            weight: w.clone(),
                            bias: p.bias.clone(),
                        },
                        PackedWeights::Codes8 { codes, mean_abs } => {
                            let codes = bitshift_truncate(codes, STORAGE_BITS, n)?;
                            let inputs = in_shape[0];
                            let mut t = vec![0u8; codes.len()];
                            for r in 0..inputs {
                                for c in 0..out_features {
                                    t[c * inputs + r] = codes[r * out_features + c];
                                }
                            }
                            Stage::IntLinear(IntegerLayer::new(
                                &t,
                                out_features,
                                inputs,
                                n,
                                *mean_abs,
                                p.bias.clone(),
                            )?)
                        }
                    }
                }
                LayerSpec::BatchNorm => {
                    let (_, bank) = banks.next().expect("one bank per BatchNorm layer");
                    let s = bank.get(bn).ok_or_else(|| Error::PrecisionUnavailable {
                        bits: bn,
                        layer: i,
                        available: crate::precision::format_bit_list(&bank.keys()),
                    })?;
                    Stage::BatchNorm {
                        scale: bn_eval_scale(s.gamma.data(), &s.running_var, s.eps),
                        mean: s.running_mean.clone(),
                        beta: s.beta.data().to_vec(),
                    }
                }
                LayerSpec::Activation => Stage::Activation,
                LayerSpec::MaxPool { size } => Stage::MaxPool(size),
                LayerSpec::Flatten => Stage::Flatten,
            };
            stages.push(stage);
            in_shape = plan.output_shapes[i].clone();
        }
        Ok(RuntimeModel {
            input_shape: self.arch.input_shape,
            bits: n,
            bn_bits: bn,
            stages,
            shapes: plan.output_shapes,
        })
    }
}

/// Reads a packed model and binds it to `bits`.
pub fn load_model(path: impl AsRef<Path>, bits: Precision) -> Result<RuntimeModel> {
    PackedModel::read(path)?.runtime(bits)
}

/// Integer-path logits of `x` at `bits`.
pub fn infer(model: &PackedModel, x: &Tensor, bits: Precision) -> Result<Tensor> {
    model.runtime(bits)?.infer(x)
}

impl RuntimeModel {
    pub fn bits(&self) -> Precision {
        Precision::Int(self.bits)
    }

    pub fn bn_bits(&self) -> Precision {
        self.bn_bits
    }

    /// Raw logits `[B, classes]` for inputs `[B, C, H, W]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "model expects [B, {}, {}, {}] input, got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let batch = s[0];
        let max_a = (1u32 << self.bits) - 1;
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut flow = Flow::Float(x.data().to_vec());
        for (stage, out_shape) in self.stages.iter().zip(&self.shapes) {
            flow = match (stage, flow) {
                (
                    Stage::FloatConv {
                        weight,
                        bias,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    flow,
                ) => {
                    let v = to_float(flow, max_a);
                    let g = ConvGeometry::new(
                        shape[0], shape[1], shape[2], *kernel, *kernel, *stride, *pad,
                    )?;
                    Flow::Float(float_conv(&v, batch, &g, weight, bias, *out_channels))
                }
                (Stage::FloatLinear { weight, bias }, flow) => {
                    let v = to_float(flow, max_a);
                    let (k, n) = (shape[0], bias.len());
                    let mut out = vec![0.0f32; batch * n];
                    matmul_nn(batch, k, n, &v, weight, &mut out);
                    add_bias(&mut out, bias, n, 1);
                    Flow::Float(out)
                }
                (
                    Stage::IntConv {
                        layer,
                        kernel,
                        stride,
                        pad,
                    },
                    Flow::Codes(c),
                ) => {
                    let g = ConvGeometry::new(
                        shape[0], shape[1], shape[2], *kernel, *kernel, *stride, *pad,
                    )?;
                    Flow::Float(int_conv(&c, batch, &g, layer, self.bits)?)
                }
                (Stage::IntLinear(layer), Flow::Codes(c)) => {
                    Flow::Float(integer_layer_forward(&c, batch, layer, self.bits)?)
                }
                (Stage::IntConv { .. } | Stage::IntLinear(_), Flow::Float(_)) => {
                    return Err(Error::Usage(
                        "quantized layer is not fed by an activation layer".into(),
                    ));
                }
                (Stage::BatchNorm { scale, mean, beta }, flow) => {
                    let mut v = to_float(flow, max_a);
                    let spatial: usize = shape[1..].iter().product();
                    bn_eval_apply(&mut v, shape[0], spatial, scale, mean, beta);
                    Flow::Float(v)
                }
                (Stage::Activation, flow) => match flow {
                    Flow::Float(v) => {
                        Flow::Codes(v.iter().map(|&y| activation_code(y, max_a)).collect())
                    }
                    codes => codes,
                },
                (Stage::MaxPool(size), flow) => {
                    let full = [batch, shape[0], shape[1], shape[2]];
                    match flow {
                        Flow::Float(v) => Flow::Float(max_pool2d(&v, &full, *size).0),
                        Flow::Codes(c) => Flow::Codes(max_pool2d(&c, &full, *size).0),
                    }
                }
                (Stage::Flatten, flow) => flow,
            };
            shape = out_shape.clone();
        }
        let v = to_float(flow, max_a);
        Tensor::new(vec![batch, shape[0]], v)
    }
}

fn to_float(flow: Flow, max_a: u32) -> Vec<f32> {
    match flow {
        Flow::Float(v) => v,
        Flow::Codes(c) => c.iter().map(|&c| activation_value(c, max_a)).collect(),
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], channels: usize, spatial: usize) {
    for (j, chunk) in out.chunks_mut(spatial).enumerate() {
        let b = bias[j % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn float_conv(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    w: &[f32],
    bias: &[f32],
    oc: usize,
) -> Vec<f32> {
    let (kl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0f32; kl * p];
    let mut out = vec![0.0f32; batch * oc * p];
    for b in 0..batch {
        im2col(g, &x[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
        matmul_nn(oc, kl, p, w, &cols, &mut out[b * oc * p..(b + 1) * oc * p]);
    }
    add_bias(&mut out, bias, oc, p);
    out
}

fn int_conv(
    codes: &[u8],
    batch: usize,
    g: &ConvGeometry,
    layer: &IntegerLayer,
    act_bits: u8,
) -> Result<Vec<f32>> {
    let (kl, p, oc) = (g.patch_len(), g.positions(), layer.outputs());
    let factor = output_factor(layer.scale, (1u32 << act_bits) - 1);
    let mut cols = vec![0u8; kl * p];
    let mut rows = vec![0u8; kl * p];
    let mut out = vec![0.0f32; batch * oc * p];
    for b in 0..batch {
        im2col(
            g,
            &codes[b * g.image_len()..(b + 1) * g.image_len()],
            &mut cols,
        );
        // One packed row per output position.
        for r in 0..kl {
            for c in 0..p {
                rows[c * kl + r] = cols[r * p + c];
            }
        }
        let x = pack_bitplanes(&rows, p, kl, act_bits)?;
        let dots = signed_dots(layer, &x)?;
        let dst = &mut out[b * oc * p..(b + 1) * oc * p];
        for pos in 0..p {
            for o in 0..oc {
                dst[o * p + pos] = dots[pos * oc + o] as f32 * factor;
            }
        }
    }
    add_bias(&mut out, &layer.bias, oc, p);
    Ok(out)
}
