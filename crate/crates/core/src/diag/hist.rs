use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, Layer, Mode};
use crate::precision::Precision;
use crate::tensor::Tape;

pub const HISTOGRAM_BINS: usize = 64;

/// Activation distribution at one layer output for one bit-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    /// Layer index whose output is observed.
    pub site: usize,
    pub layer_kind: String,
    pub bits: Precision,
    /// `HISTOGRAM_BINS + 1` increasing edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub entries: Vec<HistogramEntry>,
}

impl HistogramReport {
    pub fn get(&self, site: usize, bits: Precision) -> Option<&HistogramEntry> {
        self.entries
            .iter()
            .find(|e| e.site == site && e.bits == bits)
    }

    /// `site,bit,bin_lo,bin_hi,count`, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("site,bit,bin_lo,bin_hi,count\n");
        for e in &self.entries {
            for (i, c) in e.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{}",
                    e.site,
                    e.bits,
                    e.edges[i],
                    e.edges[i + 1],
                    c
                );
            }
        }
        s
    }
}

fn kind(layer: &Layer) -> &'static str {
    match layer {
        Layer::Conv { .. } => "conv",
        Layer::Linear { .. } => "linear",
        Layer::BatchNorm(_) => "batch_norm",
        Layer::Activation => "activation",
        Layer::MaxPool { .. } => "max_pool",
        Layer::Flatten => "flatten",
    }
}

/// Eval-mode activations at each layer in `sites`, for each width in
/// `bits`, binned into [`HISTOGRAM_BINS`] uniform bins over the observed
/// range. A constant site gets the range `value ± 0.5`.
pub fn activation_histogram(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    bits: &[Precision],
    sites: &[usize],
    batch_size: usize,
) -> Result<HistogramReport> {
    let n_layers = model.layers().len();
    if let Some(&bad) = sites.iter().find(|&&s| s >= n_layers) {
        return Err(Error::Usage(format!(
            "probe site {bad} does not exist; the model has layers 0..{}",
            n_layers - 1
        )));
    }
    if sites.is_empty() || bits.is_empty() {
        return Err(Error::Usage(
            "histogram needs at least one site and one bit-width".into(),
        ));
    }
    let saved = (model.active_bits(), model.bound_bn());
    let mut report = HistogramReport::default();
    for &b in bits {
        model.select_bitwidth(b)?;
        let mut values: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
        for idx in data.ordered_batches(batch_size) {
            let (x, _) = data.batch(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pass = model.forward_on_tape(&mut tape, xv, Mode::Eval, false)?;
            for (k, &s) in sites.iter().enumerate() {
                values[k].extend_from_slice(tape.value(pass.sites[s]).data());
            }
        }
        for (k, &s) in sites.iter().enumerate() {
            report
                .entries
                .push(bin(s, kind(&model.layers()[s]), b, &values[k]));
        }
    }
    model.select_bitwidth_with_bn(saved.0, saved.1)?;
    Ok(report)
}

fn bin(site: usize, layer_kind: &str, bits: Precision, v: &[f32]) -> HistogramEntry {
    let count = v.len() as u64;
    let (mut lo, mut hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(x as f64), h.max(x as f64))
        });
    if v.is_empty() {
        (lo, hi) = (0.0, 0.0);
    }
    if hi - lo <= 0.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| {
            if i == HISTOGRAM_BINS {
                hi
            } else {
                lo + width * i as f64
            }
        })
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let (mut sum, mut sq) = (0.0f64, 0.0f64);
    for &x in v {
        let x = x as f64;
        let i = (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[i] += 1;
        sum += x;
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    for &x in v {
        sq += (x as f64 - mean).powi(2);
    }
    HistogramEntry {
        site,
        layer_kind: layer_kind.to_string(),
        bits,
        edges,
        counts,
        mean,
        variance: if count > 0 { sq / count as f64 } else { 0.0 },
        count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_fill_one_bin() {
        let e = bin(0, "x", Precision::Int(2), &[0.25; 10]);
        assert_eq!(e.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(e.counts.iter().sum::<u64>(), 10);
        assert!(e.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn extremes_land_in_end_bins() {
        let e = bin(0, "x", Precision::Full, &[-1.0, 0.0, 3.0]);
        assert_eq!(e.counts[0], 1);
        assert_eq!(e.counts[HISTOGRAM_BINS - 1], 1);
        assert_eq!(e.edges[HISTOGRAM_BINS], 3.0);
    }
}
