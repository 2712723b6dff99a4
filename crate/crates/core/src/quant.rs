//! Weight and activation quantizers with straight-through backward rules,
//! and bit-shift truncation of stored codes.
//!
//! Weights: `w′ = tanh(w) / (2·max|tanh w|) + 0.5`, codes `round(w′·MAX_N)`,
//! signed values `2·code − MAX_N`, per-layer scale `mean|w| / MAX_N`. The
//! dequantized weight `scale·signed` lies in `[−mean|w|, mean|w|]`.
//!
//! Activations: `code = round(clip(y, 0, 1)·MAX_N)`, value `code / MAX_N`.
//!
//! Rounding is half-away-from-zero. Normalization and rounding are evaluated
//! in `f64` so that codes do not depend on `f32` rounding at tie boundaries.

use crate::error::{Error, Result};
use crate::precision::{Precision, MAX_INT_BITS};
use crate::tensor::{CustomVjp, Tape, Tensor, Var};

/// Below this, `max|tanh(w)|` is treated as zero and every weight maps to 0.5.
const DEGENERATE_MAX: f64 = 1e-12;

/// One layer's weights quantized at one bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub bits: u8,
    /// Unsigned codes `w_Q′ ∈ [0, MAX_N]`.
    pub codes: Vec<u8>,
    /// Signed remap `w_Q = 2·w_Q′ − MAX_N`.
    pub signed: Vec<i16>,
    /// `mean|w|` over the layer's float weights.
    pub mean_abs: f32,
    /// `mean|w| / MAX_N`.
    pub scale: f32,
}

impl QuantizedWeights {
    pub fn max_level(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// `scale · w_Q` per weight.
    pub fn dequantize(&self) -> Vec<f32> {
        self.signed.iter().map(|&s| self.scale * s as f32).collect()
    }
}

fn max_abs_tanh(w: &[f32]) -> f64 {
    w.iter()
        .map(|&v| (v as f64).tanh().abs())
        .fold(0.0, f64::max)
}

fn normalized(w: &[f32]) -> Vec<f64> {
    normalized_from_tanh(w.iter().map(|&v| (v as f64).tanh()).collect()).0
}

/// Normalizes precomputed `tanh(w)` values in place; also returns `max|tanh w|`.
fn normalized_from_tanh(mut t: Vec<f64>) -> (Vec<f64>, f64) {
    let m = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m < DEGENERATE_MAX {
        t.iter_mut().for_each(|v| *v = 0.5);
    } else {
        t.iter_mut().for_each(|v| *v = *v / (2.0 * m) + 0.5);
    }
    (t, m)
}

fn mean_abs(w: &[f32]) -> f32 {
    (w.iter().map(|&v| (v as f64).abs()).sum::<f64>() / w.len() as f64) as f32
}

/// Maps a layer's float weights into `[0, 1]` through `tanh` and the
/// layer-wide maximum.
pub fn normalize_weights(w: &Tensor) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::Input(
            "cannot normalize an empty weight tensor".into(),
        ));
    }
    let data = normalized(w.data()).into_iter().map(|v| v as f32).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Quantizes a layer's weights at `precision` (which must be an integer width).
pub fn quantize_weights(w: &Tensor, precision: Precision) -> Result<QuantizedWeights> {
    let Some(max_level) = precision.max_level() else {
        return Err(Error::Usage(
            "quantize_weights needs an integer bit-width, not full precision".into(),
        ));
    };
    if w.is_empty() {
        return Err(Error::Input(
            "cannot quantize an empty weight tensor".into(),
        ));
    }
    Ok(codes_from_normalized(
        &normalized(w.data()),
        max_level,
        mean_abs(w.data()),
        precision,
    ))
}

fn codes_from_normalized(
    norm: &[f64],
    max_level: u32,
    mean_abs: f32,
    precision: Precision,
) -> QuantizedWeights {
    let max = max_level as f64;
    // Normalized values are non-negative, so `+0.5` then truncation rounds
    // half away from zero.
    let codes: Vec<u8> = norm.iter().map(|&v| (v * max + 0.5) as u8).collect();
    let signed = codes
        .iter()
        .map(|&c| 2 * c as i16 - max_level as i16)
        .collect();
    QuantizedWeights {
        bits: precision.bits(),
        codes,
        signed,
        mean_abs,
        scale: mean_abs / max_level as f32,
    }
}

/// Context saved by the weight quantizer for its straight-through backward:
/// `∂w_deq/∂w = mean|w|·(1 − tanh²w) / max|tanh w|`, with the mean and the
/// maximum held constant and `round` passed through.
pub struct WeightQuantizerContext {
    /// `tanh(w)` per weight.
    pub tanh: Vec<f32>,
    pub mean_abs: f32,
    pub max_abs_tanh: f32,
}

impl WeightQuantizerContext {
    pub fn new(weights: &[f32]) -> Self {
        WeightQuantizerContext {
            tanh: weights.iter().map(|&v| (v as f64).tanh() as f32).collect(),
            mean_abs: mean_abs(weights),
            max_abs_tanh: max_abs_tanh(weights) as f32,
        }
    }
}

/// Gradient with respect to the float master weights given the gradient with
/// respect to the dequantized weights.
pub fn weight_quantizer_vjp(upstream: &[f32], ctx: &WeightQuantizerContext) -> Vec<f32> {
    if (ctx.max_abs_tanh as f64) < DEGENERATE_MAX {
        return vec![0.0; upstream.len()];
    }
    let k = ctx.mean_abs / ctx.max_abs_tanh;
    upstream
        .iter()
        .zip(&ctx.tanh)
        .map(|(&u, &t)| u * k * (1.0 - t * t))
        .collect()
}

/// Activation codes and their `[0, 1]` values.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations {
    pub codes: Vec<u8>,
    pub value: Tensor,
}

/// One activation code: `round(clip(y, 0, 1)·max_level)`.
pub fn activation_code(y: f32, max_level: u32) -> u8 {
    // NaN clamps to 0 through the cast.
    let c = (y as f64).clamp(0.0, 1.0);
    (c * max_level as f64 + 0.5) as u8
}

pub fn activation_value(code: u8, max_level: u32) -> f32 {
    code as f32 / max_level as f32
}

/// Recovers the code of a value produced by [`activation_value`].
pub(crate) fn code_of_value(v: f32, max_level: u32) -> f32 {
    (v as f64 * max_level as f64 + 0.5) as u32 as f32
}

/// Clips to `[0, 1]` and quantizes. Full precision returns `y` unchanged with
/// no codes.
pub fn quantize_activations(y: &Tensor, precision: Precision) -> QuantizedActivations {
    let Some(max_level) = precision.max_level() else {
        return QuantizedActivations {
            codes: Vec::new(),
            value: y.detached(),
        };
    };
    let codes: Vec<u8> = y
        .data()
        .iter()
        .map(|&v| activation_code(v, max_level))
        .collect();
    let data = codes
        .iter()
        .map(|&c| activation_value(c, max_level))
        .collect();
    QuantizedActivations {
        codes,
        value: Tensor::new(y.shape().to_vec(), data).expect("same shape"),
    }
}

/// Multiplier from an integer dot product `Σ w_Q·code` to the layer output:
/// `scale / MAX_a`.
pub fn output_factor(scale: f32, act_max_level: u32) -> f32 {
    scale / act_max_level as f32
}

/// Passes `upstream` where the pre-clip value lies in the closed interval
/// `[0, 1]`, zero elsewhere.
pub fn activation_quantizer_vjp(upstream: &[f32], pre_clip: &[f32]) -> Vec<f32> {
    upstream
        .iter()
        .zip(pre_clip)
        .map(|(&u, &y)| if (0.0..=1.0).contains(&y) { u } else { 0.0 })
        .collect()
}

/// Drops the `n_src − n_dst` least-significant bits of each code.
pub fn bitshift_truncate(codes: &[u8], n_src: u8, n_dst: u8) -> Result<Vec<u8>> {
    if n_dst == 0 || n_src > MAX_INT_BITS {
        return Err(Error::Usage(format!(
            "bit-shift widths must satisfy 1 <= dst <= src <= 8, got src={n_src} dst={n_dst}"
        )));
    }
    if n_dst > n_src {
        return Err(Error::Usage(format!(
            "cannot widen {n_src}-bit codes to {n_dst} bits by shifting"
        )));
    }
    let shift = n_src - n_dst;
    let limit = if n_src == 8 {
        u8::MAX
    } else {
        (1u8 << n_src) - 1
    };
    if let Some(&bad) = codes.iter().find(|&&c| c > limit) {
        return Err(Error::Input(format!(
            "code {bad} does not fit in {n_src} bits"
        )));
    }
    Ok(codes.iter().map(|&c| c >> shift).collect())
}

struct WeightSte(WeightQuantizerContext);

impl CustomVjp for WeightSte {
    fn vjp(&self, upstream: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(weight_quantizer_vjp(upstream, &self.0))]
    }
}

struct ActivationSte {
    pre_clip: Vec<f32>,
}

impl CustomVjp for ActivationSte {
    fn vjp(&self, upstream: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(activation_quantizer_vjp(upstream, &self.pre_clip))]
    }
}

/// Records the weight quantizer on `tape`: the node's value is the
/// dequantized weight tensor and its backward is the straight-through rule.
pub fn quantize_weights_on_tape(
    tape: &mut Tape,
    w: Var,
    precision: Precision,
) -> Result<(Var, QuantizedWeights)> {
    let Some(max_level) = precision.max_level() else {
        return Err(Error::Usage(
            "weight quantizer needs an integer bit-width".into(),
        ));
    };
    let wt = tape.value(w);
    if wt.is_empty() {
        return Err(Error::Input(
            "cannot quantize an empty weight tensor".into(),
        ));
    }
    let tanh: Vec<f64> = wt.data().iter().map(|&v| (v as f64).tanh()).collect();
    let tanh32: Vec<f32> = tanh.iter().map(|&t| t as f32).collect();
    let (norm, max_t) = normalized_from_tanh(tanh);
    let m = mean_abs(wt.data());
    let q = codes_from_normalized(&norm, max_level, m, precision);
    let value = Tensor::new(wt.shape().to_vec(), q.dequantize())?;
    let ctx = WeightQuantizerContext {
        tanh: tanh32,
        mean_abs: m,
        max_abs_tanh: max_t as f32,
    };
    let v = tape.custom(&[w], value, Box::new(WeightSte(ctx)));
    Ok((v, q))
}

/// Records the activation quantizer on `tape`.
pub fn quantize_activations_on_tape(tape: &mut Tape, y: Var, precision: Precision) -> Var {
    let q = quantize_activations(tape.value(y), precision);
    let pre_clip = if tape.requires_grad(y) {
        tape.value(y).data().to_vec()
    } else {
        Vec::new()
    };
    tape.custom(&[y], q.value, Box::new(ActivationSte { pre_clip }))
}
