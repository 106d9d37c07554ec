use crate::error::{ensure, ContractViolation};

/// Per-client computation knobs: client fraction `C`, local epochs `E`,
/// minibatch size `B`, plus step size, dropout rate and run seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub client_fraction: f64,
    pub local_epochs: u32,
    pub minibatch: usize,
    pub step_size: f32,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            client_fraction: 1.0,
            local_epochs: 1,
            minibatch: 32,
            step_size: 0.06,
            dropout_rate: 0.5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        ensure!(
            self.client_fraction > 0.0 && self.client_fraction <= 1.0,
            "client fraction {} outside (0, 1]",
            self.client_fraction
        );
        ensure!(self.minibatch > 0, "minibatch size must be positive");
        ensure!(
            self.step_size.is_finite() && self.step_size >= 0.0,
            "step size {} must be finite and non-negative",
            self.step_size
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout rate {} outside [0, 1)",
            self.dropout_rate
        );
        Ok(())
    }

    /// Checks the config against a concrete shard size (`B` may not exceed it).
    pub fn validate_for_shard(&self, shard_len: usize) -> Result<(), ContractViolation> {
        self.validate()?;
        ensure!(
            self.minibatch <= shard_len,
            "minibatch {} larger than shard of {} samples",
            self.minibatch,
            shard_len
        );
        Ok(())
    }
}
