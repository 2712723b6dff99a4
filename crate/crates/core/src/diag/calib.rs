use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{AnyPrecisionModel, BatchNormState, Mode};
use crate::precision::Precision;
use crate::tensor::Tape;

pub const DEFAULT_CALIBRATION_BATCHES: usize = 100;

/// Adds a BatchNorm copy for `bits` to every bank and estimates its running
/// statistics from `num_batches` forward passes at `bits`. `γ`/`β` are seeded
/// from the nearest existing width; no other parameter changes. Batches cycle
/// through seeded permutations of `data` when it holds fewer batches.
pub fn bn_calibrate(
    model: &mut AnyPrecisionModel,
    bits: Precision,
    data: &Dataset,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if num_batches == 0 {
        return Err(Error::Usage("calibration needs at least one batch".into()));
    }
    if batch_size < 2 || data.len() < 2 {
        return Err(Error::Input(
            "calibration needs batches of at least two samples".into(),
        ));
    }
    let bn_layers = model.bn_layers();
    for &l in &bn_layers {
        if model.bank(l).is_some_and(|b| b.contains(bits)) {
            return Err(Error::Usage(format!(
                "{bits}-bit BatchNorm statistics already exist (layer {l})"
            )));
        }
    }
    let saved = (model.active_bits(), model.bound_bn());
    for &l in &bn_layers {
        let bank = model.bank_mut(l).expect("listed BatchNorm layer");
        let source = bank.nearest(bits).expect("banks are non-empty");
        let src = bank.get(source).expect("nearest key exists");
        let mut state = BatchNormState::new(bits, bank.channels());
        state.gamma = src.gamma.detached();
        state.beta = src.beta.detached();
        state.decay = src.decay;
        state.eps = src.eps;
        bank.insert(state)?;
    }
    model.select_bitwidth(bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let result = 'outer: loop {
        for idx in data.shuffled_batches(batch_size, &mut rng) {
            if done == num_batches {
                break 'outer Ok(());
            }
            let (x, _) = data.batch(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            if let Err(e) = model.forward(&mut tape, xv, Mode::Calibrate, false) {
                break 'outer Err(e);
            }
            done += 1;
        }
    };
    if let Err(e) = result {
        for &l in &bn_layers {
            model
                .bank_mut(l)
                .expect("listed BatchNorm layer")
                .remove(bits);
        }
        model.select_bitwidth_with_bn(saved.0, saved.1)?;
        return Err(e);
    }
    model.select_bitwidth_with_bn(saved.0, saved.1)?;
    Ok(())
}
