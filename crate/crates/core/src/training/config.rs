use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam, β = (0.9, 0.999), ε = 1e-8, constant learning rate.
    Adam,
    /// SGD with momentum 0.9 and a power-0.9 polynomial decay to zero.
    SgdPoly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Pause the lowest-entropy tokens.
    Entropy,
    /// Pause the same number of uniformly chosen tokens, drawn per image.
    RandomPausing,
    /// Plain training without pausing or auxiliary loss.
    NoPausing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the auxiliary loss.
    pub aux_weight: f64,
    /// Candidate pause layers (1-based).
    pub pause_layers: Vec<usize>,
    /// Pause proportions are drawn uniformly from `[lo, hi]`.
    pub tau_range: (f64, f64),
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub baseline: Baseline,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            aux_weight: 0.1,
            pause_layers: (3..=9).collect(),
            tau_range: (0.2, 0.8),
            seed: 0,
            checkpoint_every: 0,
            baseline: Baseline::Entropy,
        }
    }
}

/// The single pause applied during one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PauseEvent {
    pub layer: usize,
    pub tau: f64,
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("aux_weight must be non-negative"));
        }
        let (lo, hi) = self.tau_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("tau_range ({lo}, {hi}) must satisfy 0 <= lo <= hi < 1")));
        }
        if self.baseline != Baseline::NoPausing {
            if self.pause_layers.is_empty() {
                return Err(Error::config("pause_layers is empty"));
            }
            if let Some(&l) = self.pause_layers.iter().find(|&&l| l < 3 || l > num_layers) {
                return Err(Error::config(format!("pause layer {l} outside [3, {num_layers}]")));
            }
        }
        Ok(())
    }

    /// Keeps only the pause layers a `num_layers`-deep model has.
    pub fn clamp_layers(mut self, num_layers: usize) -> Self {
        self.pause_layers.retain(|&l| (3..=num_layers).contains(&l));
        self
    }
}

/// Draws one pause layer uniformly from the configured set and a proportion
/// uniformly from the configured range.
pub fn sample_pause_event(rng: &mut impl Rng, config: &TrainConfig) -> Result<PauseEvent> {
    if config.pause_layers.is_empty() {
        return Err(Error::config("pause_layers is empty"));
    }
    let layer = config.pause_layers[rng.random_range(0..config.pause_layers.len())];
    let (lo, hi) = config.tau_range;
    let tau = lo + (hi - lo) * rng.random::<f64>();
    Ok(PauseEvent { layer, tau })
}
