use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::Precision;
use crate::tensor::conv::ConvGeometry;

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// One entry of a layer stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_zero")]
        pad: usize,
    },
    Linear {
        out_features: usize,
    },
    /// A bank of per-bit-width BatchNorm copies.
    BatchNorm,
    /// Activation quantizer (clip to `[0, 1]` and round); ReLU at full precision.
    Activation,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }
}

/// Network topology plus the candidate bit-widths it trains at.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    /// Candidate bit-widths, ascending. `32` denotes full precision.
    pub candidate_bits: Vec<Precision>,
    pub layers: Vec<LayerSpec>,
}

/// Shape facts derived from an [`Architecture`] by shape propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    /// Per-sample output shape of each layer.
    pub output_shapes: Vec<Vec<usize>>,
    /// Indices of conv/linear layers, in order.
    pub parametric: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Propagates shapes and checks structural rules:
    /// conv needs `[C, H, W]` input, linear needs a flat vector, the last
    /// layer is linear, and every quantized (interior) parametric layer reads
    /// the output of an activation quantizer through pooling/flatten only.
    pub fn plan(&self) -> Result<LayerPlan> {
        validate_bits(&self.candidate_bits)?;
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut output_shapes = Vec::with_capacity(self.layers.len());
        let mut parametric = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 {
                        return Err(err(format!("conv needs [C, H, W] input, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(err("zero channels or kernel".into()));
                    }
                    let g = ConvGeometry::new(
                        shape[0], shape[1], shape[2], kernel, kernel, stride, pad,
                    )
                    .map_err(|e| err(e.to_string()))?;
                    vec![out_channels, g.out_h, g.out_w]
                }
                LayerSpec::Linear { out_features } => {
                    if shape.len() != 1 {
                        return Err(err(format!(
                            "linear needs flat input, got {shape:?}; add a flatten layer"
                        )));
                    }
                    if out_features == 0 {
                        return Err(err("zero output features".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::BatchNorm | LayerSpec::Activation => shape,
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(err(format!("cannot pool {shape:?} by {size}")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            if layer.is_parametric() {
                parametric.push(i);
            }
            output_shapes.push(shape.clone());
        }
        let (Some(&first), Some(&last)) = (parametric.first(), parametric.last()) else {
            return Err(Error::Config(
                "architecture has no conv or linear layer".into(),
            ));
        };
        if last != self.layers.len() - 1 || !matches!(self.layers[last], LayerSpec::Linear { .. }) {
            return Err(Error::Config(
                "the final layer must be linear (logits)".into(),
            ));
        }
        for &p in &parametric {
            if p == first || p == last {
                continue;
            }
            let feeder = self.layers[..p]
                .iter()
                .rev()
                .find(|l| !matches!(l, LayerSpec::MaxPool { .. } | LayerSpec::Flatten));
            if feeder != Some(&LayerSpec::Activation) {
                return Err(Error::Config(format!(
                    "layer {p} is quantized, so its input must come from an activation layer"
                )));
            }
        }
        Ok(LayerPlan {
            num_classes: shape[0],
            output_shapes,
            parametric,
        })
    }
}

pub(crate) fn validate_bits(bits: &[Precision]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::Config("candidate bit list is empty".into()));
    }
    if bits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "candidate bits must be ascending and distinct: {}",
            crate::precision::format_bit_list(bits)
        )));
    }
    Ok(())
}

/// The reference MNIST network: two conv blocks and two fully connected
/// layers, trained at `{1, 2, 4, 8, 32}`.
pub fn mnist_cnn() -> Architecture {
    Architecture {
        input_shape: [1, 28, 28],
        candidate_bits: default_bits(),
        layers: vec![
            LayerSpec::Conv {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { out_features: 128 },
            LayerSpec::BatchNorm,
            LayerSpec::Activation,
            LayerSpec::Linear { out_features: 10 },
        ],
    }
}

/// A perceptron with two hidden layers over `[1, 1, dim]` inputs; the middle
/// layer is the only weight-quantized one.
pub fn mlp(dim: usize, hidden: usize, classes: usize, bits: Vec<Precision>) -> Architecture {
    Architecture {
        input_shape: [1, 1, dim],
        candidate_bits: bits,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear {
                out_features: hidden,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation,
            LayerSpec::Linear {
                out_features: hidden,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation,
            LayerSpec::Linear {
                out_features: classes,
            },
        ],
    }
}

pub fn default_bits() -> Vec<Precision> {
    vec![
        Precision::Int(1),
        Precision::Int(2),
        Precision::Int(4),
        Precision::Int(8),
        Precision::Full,
    ]
}
