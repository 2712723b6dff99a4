//! Experiment configuration files (TOML) and float checkpoints.
//!
//! Relative dataset paths are resolved against the directory holding the
//! config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, Architecture};
use crate::precision::Precision;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// One seeded draw of `n_train + n_test` points, split in that order.
    Synthetic {
        kind: SynthKind,
        n_train: usize,
        n_test: usize,
        dim: usize,
        /// Defaults to the training seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("apdnn-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Widths reported by evaluation; defaults to the candidate list.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_bits: Vec<Precision>,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub data: DataSource,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, validates and resolves relative paths; every referenced
    /// dataset file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut cfg.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "{}: dataset file {} does not exist",
                        path.display(),
                        p.display()
                    )));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.plan()?;
        self.train.validate()?;
        if self.train.candidate_bits != self.architecture.candidate_bits {
            return Err(Error::Config(format!(
                "train.candidate_bits ({}) must equal architecture.candidate_bits ({})",
                crate::precision::format_bit_list(&self.train.candidate_bits),
                crate::precision::format_bit_list(&self.architecture.candidate_bits)
            )));
        }
        if let DataSource::Synthetic {
            n_train,
            n_test,
            dim,
            ..
        } = self.data
        {
            if n_train < 2 || n_test == 0 {
                return Err(Error::Config(
                    "synthetic data needs n_train >= 2 and n_test >= 1".into(),
                ));
            }
            if self.architecture.input_shape != [1, 1, dim] {
                return Err(Error::Config(format!(
                    "synthetic data has shape [1, 1, {dim}] but the architecture expects {:?}",
                    self.architecture.input_shape
                )));
            }
        }
        Ok(())
    }

    pub fn eval_bits(&self) -> Vec<Precision> {
        if self.eval_bits.is_empty() {
            self.architecture.candidate_bits.clone()
        } else {
            self.eval_bits.clone()
        }
    }

    /// Replaces the training seed (and with it the synthetic data seed when
    /// that is not pinned).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    /// `(train, test)` splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                train.split = "train".into();
                test.split = "test".into();
                Ok((train, test))
            }
            &DataSource::Synthetic {
                kind,
                n_train,
                n_test,
                dim,
                seed,
            } => {
                let all =
                    synth_dataset(kind, n_train + n_test, dim, seed.unwrap_or(self.train.seed))?;
                Ok((
                    all.slice(0, n_train, "train"),
                    all.slice(n_train, n_train + n_test, "test"),
                ))
            }
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "apdnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

/// Writes the float master weights and every BatchNorm copy as JSON.
pub fn save_checkpoint(model: &AnyPrecisionModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model,
    };
    let text = serde_json::to_string(&ck).expect("model serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyPrecisionModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<AnyPrecisionModel> {
    let ck: Checkpoint<AnyPrecisionModel> = serde_json::from_slice(bytes)
        .map_err(|e| Error::Config(format!("not a checkpoint: {e}")))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    ck.model.architecture().plan()?;
    Ok(ck.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
output_dir = "out"

[architecture]
input_shape = [1, 1, 4]
candidate_bits = [1, 32]
layers = [
  { kind = "flatten" },
  { kind = "linear", out_features = 8 },
  { kind = "batch_norm" },
  { kind = "activation" },
  { kind = "linear", out_features = 2 },
]

[train]
candidate_bits = [1, 32]
epochs = 1
batch_size = 16
optimizer = "adam"
base_lr = 0.001
kd_mode = "recursive"
seed = 3

[data]
source = "synthetic"
kind = "two_gaussians"
n_train = 20
n_test = 10
dim = 4
"#;

    #[test]
    fn round_trip_fixpoint() {
        let a = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        let text = a.to_toml_string();
        let b = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_toml_string());
    }

    #[test]
    fn rejects_mismatched_bits_and_unknown_keys() {
        let bad = SYNTH.replacen(
            "candidate_bits = [1, 32]\nepochs",
            "candidate_bits = [2, 32]\nepochs",
            1,
        );
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad),
            Err(Error::Config(_))
        ));
        let extra = SYNTH.replace("seed = 3", "seed = 3\nwarmup = 2");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&extra),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_splits() {
        let cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        let (tr, te) = cfg.datasets().unwrap();
        assert_eq!((tr.len(), te.len()), (20, 10));
        assert_eq!(tr.sample_shape(), [1, 1, 4]);
    }
}
