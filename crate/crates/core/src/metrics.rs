//! Accuracy evaluation and metrics files.
//!
//! `metrics.csv` has the header `epoch,bit,split,loss,accuracy`, one row per
//! (epoch, bit-width, split) in training order. `metrics.json` holds the
//! per-bit best and final accuracy, the seed and an echo of the config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, Mode};
use crate::precision::Precision;
use crate::tensor::{Tape, Tensor};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CSV_HEADER: &str = "epoch,bit,split,loss,accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub bits: Precision,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<MetricRow>,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    /// The split used for model selection: test if recorded, else train.
    pub fn score_split(&self) -> Split {
        if self.rows.iter().any(|r| r.split == Split::Test) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn accuracy(&self, epoch: usize, bits: Precision, split: Split) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.bits == bits && r.split == split)
            .map(|r| r.accuracy)
    }

    pub fn bits(&self) -> Vec<Precision> {
        let mut b: Vec<Precision> = self.rows.iter().map(|r| r.bits).collect();
        b.sort();
        b.dedup();
        b
    }
}

/// Number of rows of `[B, C]` logits whose argmax (first on ties) is the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode mean cross-entropy and accuracy at `bits`. The model's
/// selection is restored afterwards.
pub fn evaluate(
    model: &mut AnyPrecisionModel,
    data: &Dataset,
    bits: Precision,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let saved = (model.active_bits(), model.bound_bn());
    model.select_bitwidth(bits)?;
    let result = evaluate_selected(model, data, batch_size);
    model.select_bitwidth_with_bn(saved.0, saved.1)?;
    result
}

/// [`evaluate`] at whatever precision and BatchNorm copy are selected.
pub fn evaluate_selected(
    model: &AnyPrecisionModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for idx in data.ordered_batches(batch_size) {
        let (x, y) = data.batch(&idx);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = model.forward_on_tape(&mut tape, xv, Mode::Eval, false)?;
        let l = tape.softmax_cross_entropy(pass.logits, &y)?;
        loss += tape.value(l).item()? as f64 * y.len() as f64;
        correct += count_correct(tape.value(pass.logits), &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn format_float(v: f64) -> String {
    format!("{v:.6}")
}

pub fn history_csv(history: &History) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &history.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.bits,
            r.split.as_str(),
            format_float(r.loss),
            format_float(r.accuracy)
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitSummary {
    pub bits: Precision,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub seed: u64,
    pub epochs: usize,
    pub split: Split,
    pub per_bit: Vec<BitSummary>,
    pub config: serde_json::Value,
}

pub fn summarize(
    history: &History,
    seed: u64,
    config: serde_json::Value,
) -> Result<MetricsSummary> {
    if history.rows.is_empty() {
        return Err(Error::Usage(
            "cannot summarize an empty metrics history".into(),
        ));
    }
    let split = history.score_split();
    let last = history.epochs() - 1;
    let mut per_bit = Vec::new();
    for bits in history.bits() {
        let rows: Vec<&MetricRow> = history
            .rows
            .iter()
            .filter(|r| r.bits == bits && r.split == split)
            .collect();
        let best = rows
            .iter()
            .fold(None::<&MetricRow>, |b, r| match b {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
            .expect("every bit has rows");
        per_bit.push(BitSummary {
            bits,
            best_accuracy: best.accuracy,
            best_epoch: best.epoch,
            final_accuracy: history.accuracy(last, bits, split).unwrap_or(f64::NAN),
        });
    }
    Ok(MetricsSummary {
        seed,
        epochs: history.epochs(),
        split,
        per_bit,
        config,
    })
}

/// Writes `metrics.csv` and `metrics.json` into `dir` and returns their paths.
pub fn write_metrics(
    history: &History,
    seed: u64,
    config: serde_json::Value,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let summary = summarize(history, seed, config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(METRICS_CSV);
    let json = dir.join(METRICS_JSON);
    std::fs::write(&csv, history_csv(history)).map_err(|e| Error::io(&csv, e))?;
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok((csv, json))
}
