//! The deployment file: 8-bit weight codes plus `mean|w|` for quantized
//! layers, float weights for the first and last layers, and every
//! BatchNorm copy. Layout is documented in `docs/packed-format.md`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, Architecture, BatchNormBank, BatchNormState, Layer};
use crate::precision::Precision;
use crate::quant::quantize_weights;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"APDNN1\0";
pub const FORMAT_VERSION: u16 = 1;
pub const STORAGE_BITS: u8 = 8;

const TAG_HEAD: &[u8; 4] = b"HEAD";
const TAG_ARCH: &[u8; 4] = b"ARCH";
const TAG_LAYR: &[u8; 4] = b"LAYR";
const TAG_BNRM: &[u8; 4] = b"BNRM";

const KIND_FLOAT: u8 = 0;
const KIND_CODES8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum PackedWeights {
    /// Float weights of a full-precision layer.
    Float(Vec<f32>),
    /// 8-bit codes `w_Q′` and the layer's `mean|w|`.
    Codes8 { codes: Vec<u8>, mean_abs: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedLayer {
    /// Index into the architecture's layer list.
    pub index: usize,
    pub weights: PackedWeights,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub arch: Architecture,
    /// Conv/linear layers in order.
    pub layers: Vec<PackedLayer>,
    /// BatchNorm banks keyed by layer index, in order.
    pub banks: Vec<(usize, BatchNormBank)>,
}

impl PackedModel {
    /// Quantizes the master weights of interior layers to 8-bit codes.
    pub fn from_model(model: &AnyPrecisionModel) -> Result<Self> {
        let mut layers = Vec::new();
        let mut banks = Vec::new();
        for (index, layer) in model.layers().iter().enumerate() {
            match layer {
                Layer::Conv {
                    weight,
                    bias,
                    full_precision,
                    ..
                }
                | Layer::Linear {
                    weight,
                    bias,
                    full_precision,
                } => {
                    let weights = if *full_precision {
                        PackedWeights::Float(weight.data().to_vec())
                    } else {
                        let q = quantize_weights(weight, Precision::Int(STORAGE_BITS))?;
                        PackedWeights::Codes8 {
                            codes: q.codes,
                            mean_abs: q.mean_abs,
                        }
                    };
                    layers.push(PackedLayer {
                        index,
                        weights,
                        bias: bias.data().to_vec(),
                    });
                }
                Layer::BatchNorm(bank) => banks.push((index, bank.clone())),
                _ => {}
            }
        }
        Ok(PackedModel {
            arch: model.architecture().clone(),
            layers,
            banks,
        })
    }

    /// Bit-widths with a BatchNorm copy in every bank.
    pub fn available_bits(&self) -> Vec<Precision> {
        let Some((_, first)) = self.banks.first() else {
            return (1..=STORAGE_BITS).map(Precision::Int).collect();
        };
        let mut keys = first.keys();
        for (_, b) in &self.banks[1..] {
            keys.retain(|k| b.contains(*k));
        }
        keys
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        section(&mut out, TAG_HEAD, &self.head_bytes());
        let arch = toml::to_string(&self.arch).expect("architecture serializes");
        section(&mut out, TAG_ARCH, arch.as_bytes());
        section(&mut out, TAG_LAYR, &self.layer_bytes());
        section(&mut out, TAG_BNRM, &self.bn_bytes());
        out
    }

    fn head_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        put_u32(&mut w, self.arch.layers.len() as u32);
        put_u32(&mut w, self.layers.len() as u32);
        put_u32(&mut w, self.banks.len() as u32);
        put_bits(&mut w, &self.arch.candidate_bits);
        put_bits(&mut w, &self.available_bits());
        w
    }

    fn layer_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        for l in &self.layers {
            put_u32(&mut w, l.index as u32);
            match &l.weights {
                PackedWeights::Float(v) => {
                    w.push(KIND_FLOAT);
                    put_u32(&mut w, v.len() as u32);
                    put_f32s(&mut w, v);
                }
                PackedWeights::Codes8 { codes, mean_abs } => {
                    w.push(KIND_CODES8);
                    put_u32(&mut w, codes.len() as u32);
                    put_f32(&mut w, *mean_abs);
                    w.extend_from_slice(codes);
                }
            }
            put_u32(&mut w, l.bias.len() as u32);
            put_f32s(&mut w, &l.bias);
        }
        w
    }

    fn bn_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        for (index, bank) in &self.banks {
            put_u32(&mut w, *index as u32);
            put_u32(&mut w, bank.channels() as u32);
            put_u32(&mut w, bank.len() as u32);
            for s in bank.states() {
                w.push(s.bits.bits());
                put_f32(&mut w, s.decay);
                put_f32(&mut w, s.eps);
                put_f32s(&mut w, s.gamma.data());
                put_f32s(&mut w, s.beta.data());
                put_f32s(&mut w, &s.running_mean);
                put_f32s(&mut w, &s.running_var);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(0, "not a packed model (bad magic)"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                7,
                format!("unsupported format version {version}"),
            ));
        }
        let mut head = r.section(TAG_HEAD)?;
        let arch_bytes = r.section(TAG_ARCH)?;
        let mut lay = r.section(TAG_LAYR)?;
        let mut bn = r.section(TAG_BNRM)?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                "trailing bytes after last section",
            ));
        }

        let n_arch = head.u32()? as usize;
        let n_param = head.u32()? as usize;
        let n_bank = head.u32()? as usize;
        let candidate = head.bits()?;
        let available = head.bits()?;
        head.finish("HEAD")?;

        let text = std::str::from_utf8(arch_bytes.bytes)
            .map_err(|_| Error::format(arch_bytes.base as u64, "architecture is not UTF-8"))?;
        let arch: Architecture = toml::from_str(text)
            .map_err(|e| Error::format(arch_bytes.base as u64, format!("architecture: {e}")))?;
        let plan = arch.plan()?;
        if arch.layers.len() != n_arch
            || plan.parametric.len() != n_param
            || arch.candidate_bits != candidate
        {
            return Err(Error::format(
                head.base as u64,
                "header disagrees with architecture",
            ));
        }

        let mut layers = Vec::with_capacity(n_param);
        for &expect in &plan.parametric {
            let at = lay.abs();
            let index = lay.u32()? as usize;
            if index != expect {
                return Err(Error::format(
                    at as u64,
                    format!("expected layer {expect}, found {index}"),
                ));
            }
            let kind = lay.u8()?;
            let n = lay.u32()? as usize;
            let weights = match kind {
                KIND_FLOAT => PackedWeights::Float(lay.f32s(n)?),
                KIND_CODES8 => {
                    let mean_abs = lay.f32()?;
                    PackedWeights::Codes8 {
                        codes: lay.take(n)?.to_vec(),
                        mean_abs,
                    }
                }
                k => {
                    return Err(Error::format(
                        at as u64 + 4,
                        format!("unknown weight kind {k}"),
                    ))
                }
            };
            let nb = lay.u32()? as usize;
            let bias = lay.f32s(nb)?;
            let want = weight_len(&arch, &plan.output_shapes, index);
            if n != want || nb != plan.output_shapes[index][0] {
                return Err(Error::format(
                    at as u64,
                    format!("layer {index} has wrong parameter counts"),
                ));
            }
            layers.push(PackedLayer {
                index,
                weights,
                bias,
            });
        }
        lay.finish("LAYR")?;

        let mut banks = Vec::with_capacity(n_bank);
        for _ in 0..n_bank {
            let at = bn.abs();
            let index = bn.u32()? as usize;
            let channels = bn.u32()? as usize;
            let count = bn.u32()? as usize;
            if arch.layers.get(index) != Some(&crate::nn::LayerSpec::BatchNorm)
                || plan.output_shapes[index][0] != channels
            {
                return Err(Error::format(
                    at as u64,
                    format!("no {channels}-channel BatchNorm at layer {index}"),
                ));
            }
            let mut bank = BatchNormBank::new(channels, &[]);
            for _ in 0..count {
                let at = bn.abs();
                let bits = Precision::from_bits(bn.u8()?)
                    .map_err(|e| Error::format(at as u64, e.to_string()))?;
                let decay = bn.f32()?;
                let eps = bn.f32()?;
                let state = BatchNormState {
                    bits,
                    gamma: Tensor::vector(bn.f32s(channels)?),
                    beta: Tensor::vector(bn.f32s(channels)?),
                    running_mean: bn.f32s(channels)?,
                    running_var: bn.f32s(channels)?,
                    decay,
                    eps,
                };
                bank.insert(state)
                    .map_err(|e| Error::format(at as u64, e.to_string()))?;
            }
            banks.push((index, bank));
        }
        bn.finish("BNRM")?;
        let bn_layers: Vec<usize> = arch
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == crate::nn::LayerSpec::BatchNorm)
            .map(|(i, _)| i)
            .collect();
        if banks.iter().map(|(i, _)| *i).collect::<Vec<_>>() != bn_layers {
            return Err(Error::format(
                bn.base as u64,
                "BatchNorm sections do not match the architecture",
            ));
        }
        let model = PackedModel {
            arch,
            layers,
            banks,
        };
        if model.available_bits() != available {
            return Err(Error::format(
                head.base as u64,
                "header bit list disagrees with BatchNorm banks",
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}

/// Whether `bytes` start with the packed-model magic.
pub fn is_packed(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

/// Writes the packed form of `model` to `path`.
pub fn save_model(model: &AnyPrecisionModel, path: impl AsRef<Path>) -> Result<PackedModel> {
    let packed = PackedModel::from_model(model)?;
    packed.save(path)?;
    Ok(packed)
}

fn weight_len(arch: &Architecture, shapes: &[Vec<usize>], index: usize) -> usize {
    let input: Vec<usize> = if index == 0 {
        arch.input_shape.to_vec()
    } else {
        shapes[index - 1].clone()
    };
    match arch.layers[index] {
        crate::nn::LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => out_channels * input[0] * kernel * kernel,
        crate::nn::LayerSpec::Linear { out_features } => input[0] * out_features,
        _ => 0,
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        put_f32(w, x);
    }
}

fn put_bits(w: &mut Vec<u8>, bits: &[Precision]) {
    w.push(bits.len() as u8);
    w.extend(bits.iter().map(|b| b.bits()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(self.pos as u64, format!("truncated: need {n} more bytes"))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Section<'a>> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::format(
                at as u64,
                format!(
                    "expected section {}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        let b = self.take(8)?;
        let len = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let len =
            usize::try_from(len).map_err(|_| Error::format(at as u64 + 4, "section too large"))?;
        let base = self.pos;
        Ok(Section {
            bytes: self.take(len)?,
            base,
            pos: 0,
        })
    }
}

/// Cursor over one section's payload; offsets in errors are file offsets.
struct Section<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
}

impl<'a> Section<'a> {
    fn abs(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.abs() as u64,
                format!("section truncated: need {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.abs() as u64, "length overflow"))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn bits(&mut self) -> Result<Vec<Precision>> {
        let n = self.u8()? as usize;
        let at = self.abs();
        self.take(n)?
            .iter()
            .map(|&b| Precision::from_bits(b).map_err(|e| Error::format(at as u64, e.to_string())))
            .collect()
    }

    fn finish(&self, name: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.abs() as u64,
                format!("{name} section has trailing bytes"),
            ));
        }
        Ok(())
    }
}
