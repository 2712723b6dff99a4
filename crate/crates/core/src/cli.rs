//! The `apdnn` command-line driver.
//!
//! Output locations: `--output-dir`, else `$APDNN_OUTPUT_DIR`, else the
//! config's `output_dir` (train, uca), else the current directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{save_checkpoint, ExperimentConfig};
use crate::data::{load_idx, synth_dataset, Dataset, SynthKind};
use crate::diag::{
    activation_histogram, bn_calibrate, cross_bit_robustness, record_uca,
    DEFAULT_CALIBRATION_BATCHES,
};
use crate::engine::{is_packed, PackedModel};
use crate::error::{Error, Result};
use crate::metrics::{count_correct, evaluate, format_float, write_metrics};
use crate::nn::{init_model, AnyPrecisionModel, Layer};
use crate::precision::{parse_bit_list, Precision};
use crate::tensor::Tape;
use crate::train::train_with_progress;

pub const OUTPUT_DIR_ENV: &str = "APDNN_OUTPUT_DIR";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PACKED_FILE: &str = "model.apdnn";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_HEADER: &str = "bit,accuracy,loss";
pub const QUANTIZE_JSON: &str = "quantize.json";
pub const CALIBRATED_FILE: &str = "checkpoint-calibrated.json";
pub const UCA_JSON: &str = "uca.json";
pub const ROBUSTNESS_JSON: &str = "robustness.json";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const HISTOGRAM_JSON: &str = "histogram.json";

#[derive(Debug, Parser)]
#[command(
    name = "apdnn",
    version,
    about = "Train and deploy any-precision neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Output {
    /// Directory for result files.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Joint training from a config; writes a checkpoint, a packed model and metrics.
    Train {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// Accuracy and loss per bit-width of a checkpoint or packed model.
    Eval {
        model: PathBuf,
        /// Comma-separated widths; defaults to every available one.
        #[arg(long, value_parser = bit_list)]
        bits: Option<BitList>,
        #[arg(long, value_name = "SPEC")]
        data: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Packs a checkpoint into 8-bit codes and reports the `n`-bit deployment.
    Quantize {
        checkpoint: PathBuf,
        #[arg(long, value_parser = one_bit)]
        bits: Precision,
        /// Packed file to write; defaults to `model.apdnn` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Estimates BatchNorm statistics for a width the model was not trained at.
    Calibrate {
        model: PathBuf,
        #[arg(long, value_parser = one_bit)]
        bits: Precision,
        #[arg(long, value_name = "SPEC")]
        data: String,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_BATCHES)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Gradient agreement between bit-widths over the first training steps.
    Uca {
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// FGSM attack at each width, evaluated at every width.
    Attack {
        model: PathBuf,
        #[arg(long, default_value_t = 0.007)]
        eps: f32,
        #[arg(long, value_parser = bit_list)]
        bits: Option<BitList>,
        #[arg(long, value_name = "SPEC")]
        data: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Activation histograms at chosen layer outputs.
    Histogram {
        model: PathBuf,
        /// Comma-separated layer indices; defaults to the input and output of every BatchNorm layer.
        #[arg(long, value_delimiter = ',')]
        sites: Option<Vec<usize>>,
        #[arg(long, value_parser = bit_list)]
        bits: Option<BitList>,
        #[arg(long, value_name = "SPEC")]
        data: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[command(flatten)]
        out: Output,
    },
}

/// Comma-separated bit-widths such as `1,2,4,8,32`.
#[derive(Clone, Debug)]
struct BitList(Vec<Precision>);

fn bit_list(s: &str) -> std::result::Result<BitList, String> {
    let bits = parse_bit_list(s).map_err(|e| e.to_string())?;
    if bits.is_empty() {
        return Err("empty bit list".into());
    }
    Ok(BitList(bits))
}

fn one_bit(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = hint(&e) {
                eprintln!("hint: {hint}");
            }
            exit_code(&e)
        }
    }
}

/// 2 usage/config, 3 precision unavailable, 4 file or format problems,
/// 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::PrecisionUnavailable { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn hint(e: &Error) -> Option<&'static str> {
    match e {
        Error::PrecisionUnavailable { .. } => {
            Some("pick a listed width, or add one with `apdnn calibrate <checkpoint> --bits N --data ...`")
        }
        Error::Io { .. } => Some("check that the path exists and is readable"),
        _ => None,
    }
}

fn output_dir(flag: &Output, config: Option<&Path>) -> PathBuf {
    if let Some(d) = &flag.output_dir {
        return d.clone();
    }
    if let Some(d) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    config.map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

enum LoadedModel {
    Checkpoint(AnyPrecisionModel),
    Packed(PackedModel),
}

fn load_model_file(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_packed(&bytes) {
        PackedModel::from_bytes(&bytes).map(LoadedModel::Packed)
    } else {
        crate::config::checkpoint_from_bytes(&bytes)
            .map(LoadedModel::Checkpoint)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                e => e,
            })
    }
}

fn require_checkpoint(path: &Path, what: &str) -> Result<AnyPrecisionModel> {
    match load_model_file(path)? {
        LoadedModel::Checkpoint(m) => Ok(m),
        LoadedModel::Packed(_) => Err(Error::Usage(format!(
            "{what} needs float master weights; pass a checkpoint instead of the packed model {}",
            path.display()
        ))),
    }
}

/// Which split a config-file data spec contributes.
#[derive(Clone, Copy)]
enum Role {
    Train,
    Test,
}

/// `synthetic:<kind>:<n>[:<seed>]`, `idx:<images>:<labels>`, or a config
/// file (its test split; its training split for calibration).
fn load_data(spec: &str, input_shape: [usize; 3], role: Role) -> Result<Dataset> {
    let data = if let Some(rest) = spec.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::Usage(format!(
                "bad data spec {spec:?}; expected synthetic:<kind>:<n>[:<seed>]"
            )));
        }
        let kind: SynthKind = parts[0].parse()?;
        let n: usize = parts[1]
            .parse()
            .map_err(|_| Error::Usage(format!("bad sample count {:?}", parts[1])))?;
        let seed: u64 = match parts.get(2) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Usage(format!("bad seed {s:?}")))?,
            None => 0,
        };
        if input_shape[..2] != [1, 1] {
            return Err(Error::Usage(format!(
                "synthetic data is [1, 1, D] but the model expects {input_shape:?}"
            )));
        }
        synth_dataset(kind, n, input_shape[2], seed)?
    } else if let Some(rest) = spec.strip_prefix("idx:") {
        let Some((img, lbl)) = rest.split_once(':') else {
            return Err(Error::Usage(format!(
                "bad data spec {spec:?}; expected idx:<images>:<labels>"
            )));
        };
        load_idx(img, lbl)?
    } else {
        let path = Path::new(spec);
        if !path.is_file() {
            return Err(Error::Usage(format!(
                "data spec {spec:?} is neither synthetic:..., idx:... nor an existing config file"
            )));
        }
        let (train, test) = ExperimentConfig::load(path)?.datasets()?;
        match role {
            Role::Train => train,
            Role::Test => test,
        }
    };
    if data.sample_shape() != input_shape {
        return Err(Error::Dimension(format!(
            "data samples are {:?} but the model expects {input_shape:?}",
            data.sample_shape()
        )));
    }
    Ok(data)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval {
            model,
            bits,
            data,
            batch_size,
            out,
        } => cmd_eval(&model, bits.map(|b| b.0), &data, batch_size, &out),
        Command::Quantize {
            checkpoint,
            bits,
            output,
            out,
        } => cmd_quantize(&checkpoint, bits, output, &out),
        Command::Calibrate {
            model,
            bits,
            data,
            batches,
            batch_size,
            seed,
            out,
        } => cmd_calibrate(&model, bits, &data, batches, batch_size, seed, &out),
        Command::Uca {
            config,
            steps,
            seed,
            out,
        } => cmd_uca(&config, steps, seed, &out),
        Command::Attack {
            model,
            eps,
            bits,
            data,
            batch_size,
            out,
        } => cmd_attack(&model, eps, bits.map(|b| b.0), &data, batch_size, &out),
        Command::Histogram {
            model,
            sites,
            bits,
            data,
            batch_size,
            out,
        } => cmd_histogram(&model, sites, bits.map(|b| b.0), &data, batch_size, &out),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Output) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = output_dir(out, Some(&cfg.output_dir));
    create_dir(&dir)?;
    let (train_set, test_set) = cfg.datasets()?;
    let mut model = init_model(&cfg.architecture, cfg.train.seed)?;
    let outcome = train_with_progress(
        &mut model,
        &train_set,
        Some(&test_set),
        &cfg.train,
        |rows| {
            for r in rows {
                eprintln!(
                    "epoch {} {:>2}-bit {:<5} loss {} acc {}",
                    r.epoch,
                    r.bits,
                    r.split.as_str(),
                    format_float(r.loss),
                    format_float(r.accuracy)
                );
            }
        },
    )?;
    save_checkpoint(&outcome.final_model, dir.join(CHECKPOINT_FILE))?;
    PackedModel::from_model(&outcome.final_model)?.save(dir.join(PACKED_FILE))?;
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    write_metrics(&outcome.history, cfg.train.seed, echo, &dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string())?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    bits: Precision,
    accuracy: f64,
    loss: f64,
}

fn packed_eval(
    packed: &PackedModel,
    data: &Dataset,
    bits: Precision,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let rt = packed.runtime(bits)?;
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for idx in data.ordered_batches(batch_size) {
        let (x, y) = data.batch(&idx);
        let logits = rt.infer(&x)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = tape.softmax_cross_entropy(l, &y)?;
        loss += tape.value(ce).item()? as f64 * y.len() as f64;
        correct += count_correct(&logits, &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn cmd_eval(
    model: &Path,
    bits: Option<Vec<Precision>>,
    data: &str,
    batch_size: usize,
    out: &Output,
) -> Result<()> {
    let loaded = load_model_file(model)?;
    let input_shape = match &loaded {
        LoadedModel::Checkpoint(m) => m.architecture().input_shape,
        LoadedModel::Packed(p) => p.arch.input_shape,
    };
    let data = load_data(data, input_shape, Role::Test)?;
    if data.is_empty() {
        return Err(Error::Input("evaluation data is empty".into()));
    }
    let mut rows = Vec::new();
    match loaded {
        LoadedModel::Checkpoint(mut m) => {
            for b in bits.unwrap_or_else(|| m.available_bits()) {
                let (loss, accuracy) = evaluate(&mut m, &data, b, batch_size)?;
                rows.push(EvalRow {
                    bits: b,
                    accuracy,
                    loss,
                });
            }
        }
        LoadedModel::Packed(p) => {
            let default: Vec<Precision> = p
                .available_bits()
                .into_iter()
                .filter(|b| !b.is_full())
                .collect();
            for b in bits.unwrap_or(default) {
                let (loss, accuracy) = packed_eval(&p, &data, b, batch_size)?;
                rows.push(EvalRow {
                    bits: b,
                    accuracy,
                    loss,
                });
            }
        }
    }
    let mut csv = format!("{EVAL_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{}",
            r.bits,
            format_float(r.accuracy),
            format_float(r.loss)
        );
    }
    let dir = output_dir(out, None);
    create_dir(&dir)?;
    write_file(&dir.join(EVAL_CSV), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct QuantizeLayer {
    layer: usize,
    /// `true` for layers kept in float.
    full_precision: bool,
    scale: Option<f32>,
    max_code: Option<u8>,
}

#[derive(Serialize)]
struct QuantizeReport {
    bits: Precision,
    packed: PathBuf,
    bytes: u64,
    available_bits: Vec<Precision>,
    layers: Vec<QuantizeLayer>,
}

fn cmd_quantize(
    checkpoint: &Path,
    bits: Precision,
    output: Option<PathBuf>,
    out: &Output,
) -> Result<()> {
    let model = require_checkpoint(checkpoint, "quantize")?;
    let packed = PackedModel::from_model(&model)?;
    // Building the runtime checks that the width is deployable.
    packed.runtime(bits)?;
    let dir = output_dir(out, None);
    create_dir(&dir)?;
    let path = output.unwrap_or_else(|| dir.join(PACKED_FILE));
    let bytes = packed.to_bytes();
    write_file(&path, &bytes)?;
    let Precision::Int(n) = bits else {
        unreachable!("runtime rejects full precision")
    };
    let layers = packed
        .layers
        .iter()
        .map(|l| match &l.weights {
            crate::engine::PackedWeights::Float(_) => QuantizeLayer {
                layer: l.index,
                full_precision: true,
                scale: None,
                max_code: None,
            },
            crate::engine::PackedWeights::Codes8 { codes, mean_abs } => QuantizeLayer {
                layer: l.index,
                full_precision: false,
                scale: Some(mean_abs / ((1u32 << n) - 1) as f32),
                max_code: codes.iter().map(|c| c >> (8 - n)).max(),
            },
        })
        .collect();
    let report = QuantizeReport {
        bits,
        packed: path.clone(),
        bytes: bytes.len() as u64,
        available_bits: packed.available_bits(),
        layers,
    };
    write_json(&dir.join(QUANTIZE_JSON), &report)?;
    println!(
        "wrote {} ({} bytes, deployable at {bits} bits)",
        path.display(),
        bytes.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct CalibrateReport {
    bits: Precision,
    batches: usize,
    batch_size: usize,
    seed: u64,
    checkpoint: PathBuf,
    available_bits: Vec<Precision>,
}

fn cmd_calibrate(
    model: &Path,
    bits: Precision,
    data: &str,
    batches: usize,
    batch_size: usize,
    seed: u64,
    out: &Output,
) -> Result<()> {
    let mut m = require_checkpoint(model, "calibration")?;
    let data = load_data(data, m.architecture().input_shape, Role::Train)?;
    bn_calibrate(&mut m, bits, &data, batches, batch_size, seed)?;
    let dir = output_dir(out, None);
    create_dir(&dir)?;
    let path = dir.join(CALIBRATED_FILE);
    save_checkpoint(&m, &path)?;
    write_json(
        &dir.join("calibrate.json"),
        &CalibrateReport {
            bits,
            batches,
            batch_size,
            seed,
            checkpoint: path.clone(),
            available_bits: m.available_bits(),
        },
    )?;
    println!(
        "wrote {} (available bits {})",
        path.display(),
        m.describe_bits()
    );
    Ok(())
}

fn cmd_uca(config: &Path, steps: usize, seed: Option<u64>, out: &Output) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = output_dir(out, Some(&cfg.output_dir));
    create_dir(&dir)?;
    let (train_set, _) = cfg.datasets()?;
    let mut model = init_model(&cfg.architecture, cfg.train.seed)?;
    let matrix = record_uca(&mut model, &train_set, &cfg.train, steps)?;
    write_json(&dir.join(UCA_JSON), &matrix)?;
    for (b, row) in matrix.bits.iter().zip(&matrix.values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{b:>2}: {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_attack(
    model: &Path,
    eps: f32,
    bits: Option<Vec<Precision>>,
    data: &str,
    batch_size: usize,
    out: &Output,
) -> Result<()> {
    let mut m = require_checkpoint(model, "the attack")?;
    let data = load_data(data, m.architecture().input_shape, Role::Test)?;
    let bits = bits.unwrap_or_else(|| m.available_bits());
    let matrix = cross_bit_robustness(&mut m, &data, eps, &bits, batch_size)?;
    let dir = output_dir(out, None);
    create_dir(&dir)?;
    write_json(&dir.join(ROBUSTNESS_JSON), &matrix)?;
    for (b, row) in matrix.bits.iter().zip(&matrix.accuracy) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{b:>2}: {}", cells.join(" "));
    }
    Ok(())
}

/// Input and output of every BatchNorm layer.
fn bn_sites(model: &AnyPrecisionModel) -> Vec<usize> {
    let mut sites = Vec::new();
    for (i, l) in model.layers().iter().enumerate() {
        if matches!(l, Layer::BatchNorm(_)) && i > 0 {
            sites.extend([i - 1, i]);
        }
    }
    sites
}

fn cmd_histogram(
    model: &Path,
    sites: Option<Vec<usize>>,
    bits: Option<Vec<Precision>>,
    data: &str,
    batch_size: usize,
    out: &Output,
) -> Result<()> {
    let mut m = require_checkpoint(model, "histogram probing")?;
    let data = load_data(data, m.architecture().input_shape, Role::Test)?;
    let sites = sites.unwrap_or_else(|| bn_sites(&m));
    let bits = bits.unwrap_or_else(|| m.available_bits());
    let report = activation_histogram(&mut m, &data, &bits, &sites, batch_size)?;
    let dir = output_dir(out, None);
    create_dir(&dir)?;
    write_file(&dir.join(HISTOGRAM_CSV), report.to_csv())?;
    write_json(&dir.join(HISTOGRAM_JSON), &report)?;
    for e in &report.entries {
        println!(
            "site {:>2} ({}) {:>2}-bit mean {:.4} var {:.4}",
            e.site, e.layer_kind, e.bits, e.mean, e.variance
        );
    }
    Ok(())
}
