//! Deployment: the packed model file, bit-plane kernels and integer inference.

mod bitplane;
mod infer;
mod packed;

pub use bitplane::{pack_bitplanes, popcount_dot, BitPlaneMatrix};
pub use infer::{
    infer, integer_layer_forward, load_model, signed_dots, IntegerLayer, RuntimeModel,
};
pub use packed::{
    is_packed, save_model, PackedLayer, PackedModel, PackedWeights, FORMAT_VERSION, MAGIC,
    STORAGE_BITS,
};
