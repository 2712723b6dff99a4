//! Analysis tools: gradient agreement across bit-widths, BatchNorm
//! calibration for untrained widths, activation histograms and FGSM.

mod calib;
mod fgsm;
mod hist;
mod uca;

pub use calib::{bn_calibrate, DEFAULT_CALIBRATION_BATCHES};
pub use fgsm::{cross_bit_robustness, fgsm_attack, RobustnessMatrix};
pub use hist::{activation_histogram, HistogramEntry, HistogramReport, HISTOGRAM_BINS};
pub use uca::{
    record_gradient_traces, record_uca, uca, uca_matrix, GradientTrace, UcaAccumulator, UcaMatrix,
};
