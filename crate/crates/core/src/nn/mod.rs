//! Layers, architectures and the any-precision model.

pub mod arch;
pub mod bn;
pub mod model;

pub use arch::{default_bits, mlp, mnist_cnn, Architecture, LayerPlan, LayerSpec};
pub use bn::{BatchNormBank, BatchNormState};
pub use model::{init_model, AnyPrecisionModel, ForwardPass, Layer, Mode, ParamId};
