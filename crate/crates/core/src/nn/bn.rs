use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::{format_bit_list, Precision};
use crate::tensor::Tensor;

pub const DEFAULT_DECAY: f32 = 0.9;
pub const DEFAULT_EPS: f32 = 1e-5;

/// Parameters and running statistics of one BatchNorm copy `Φ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub bits: Precision,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Running-average decay `λ`: `μ ← λ·μ + (1 − λ)·μ_batch`.
    pub decay: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(bits: Precision, channels: usize) -> Self {
        BatchNormState {
            bits,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        let (l, r) = (self.decay, 1.0 - self.decay);
        for (m, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *m = l * *m + r * b;
        }
        for (v, &b) in self.running_var.iter_mut().zip(batch_var) {
            *v = l * *v + r * b;
        }
    }

    /// Resets running statistics to `μ = 0, σ² = 1`.
    pub fn reset_running(&mut self) {
        self.running_mean.iter_mut().for_each(|m| *m = 0.0);
        self.running_var.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// One BatchNorm layer's copies, one per bit-width, sorted by bit-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormBank {
    channels: usize,
    states: Vec<BatchNormState>,
}

impl BatchNormBank {
    pub fn new(channels: usize, bits: &[Precision]) -> Self {
        let mut bank = BatchNormBank {
            channels,
            states: Vec::new(),
        };
        for &b in bits {
            bank.insert(BatchNormState::new(b, channels))
                .expect("fresh bank has distinct keys");
        }
        bank
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn keys(&self) -> Vec<Precision> {
        self.states.iter().map(|s| s.bits).collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn contains(&self, bits: Precision) -> bool {
        self.states.iter().any(|s| s.bits == bits)
    }

    pub fn get(&self, bits: Precision) -> Option<&BatchNormState> {
        self.states.iter().find(|s| s.bits == bits)
    }

    pub fn get_mut(&mut self, bits: Precision) -> Option<&mut BatchNormState> {
        self.states.iter_mut().find(|s| s.bits == bits)
    }

    pub fn states(&self) -> &[BatchNormState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.states
    }

    pub fn insert(&mut self, state: BatchNormState) -> Result<()> {
        if state.channels() != self.channels
            || state.gamma.len() != self.channels
            || state.beta.len() != self.channels
            || state.running_var.len() != self.channels
        {
            return Err(Error::Dimension(format!(
                "BatchNorm state has {} channels, bank has {}",
                state.channels(),
                self.channels
            )));
        }
        if self.contains(state.bits) {
            return Err(Error::Usage(format!(
                "BatchNorm bank already holds a {}-bit state",
                state.bits
            )));
        }
        self.states.push(state);
        self.states.sort_by_key(|s| s.bits);
        Ok(())
    }

    pub fn remove(&mut self, bits: Precision) -> Option<BatchNormState> {
        let i = self.states.iter().position(|s| s.bits == bits)?;
        Some(self.states.remove(i))
    }

    /// The stored bit-width closest to `bits` (ties go to the wider one).
    pub fn nearest(&self, bits: Precision) -> Option<Precision> {
        let target = bits.bits() as i32;
        self.states
            .iter()
            .map(|s| s.bits)
            .min_by_key(|b| ((b.bits() as i32 - target).abs(), -(b.bits() as i32)))
    }

    pub(crate) fn available(&self) -> String {
        format_bit_list(&self.keys())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_average_rule() {
        let mut s = BatchNormState::new(Precision::Int(4), 2);
        s.update_running(&[1.0, -1.0], &[3.0, 1.0]);
        assert!((s.running_mean[0] - 0.1).abs() < 1e-7);
        assert!((s.running_mean[1] + 0.1).abs() < 1e-7);
        assert!((s.running_var[0] - 1.2).abs() < 1e-6);
        assert!((s.running_var[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bank_keys_distinct_and_sorted() {
        let bits = [Precision::Int(1), Precision::Full, Precision::Int(8)];
        let mut bank = BatchNormBank::new(3, &bits);
        assert_eq!(
            bank.keys(),
            vec![Precision::Int(1), Precision::Int(8), Precision::Full]
        );
        assert!(bank
            .insert(BatchNormState::new(Precision::Int(8), 3))
            .is_err());
        assert!(bank
            .insert(BatchNormState::new(Precision::Int(3), 4))
            .is_err());
        bank.insert(BatchNormState::new(Precision::Int(3), 3))
            .unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.nearest(Precision::Int(2)), Some(Precision::Int(3)));
        assert_eq!(bank.nearest(Precision::Int(6)), Some(Precision::Int(8)));
    }
}
