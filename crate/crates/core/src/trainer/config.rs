use crate::error::{Error, Result};
use crate::transmission::DOWNSAMPLE;

/// Hyperparameters shared by both training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub lambda_dcp: f64,
    /// Dark-channel patch size, odd.
    pub patch: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Training images (the held-out set of the classifier experiment has
    /// the same size).
    pub n_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Scaled-down defaults that train in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 60,
            dropout_rate: 0.3,
            lambda_dcp: 0.1,
            patch: 3,
            seed: 42,
            image_size: 64,
            n_images: 64,
        }
    }

    /// Full-scale settings of the original training setup: batch 16,
    /// learning rate 1e-4 for 150 epochs, dropout 0.3, 512×512 inputs.
    pub fn full() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 150,
            image_size: 512,
            ..TrainConfig::desk()
        }
    }

    /// Desk defaults for the shapes classification experiment.
    pub fn shapes_desk() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 12,
            image_size: 32,
            n_images: 600,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.lambda_dcp >= 0.0 && self.lambda_dcp.is_finite()) {
            return bad(format!("lambda_dcp must be finite and >= 0, got {}", self.lambda_dcp));
        }
        if self.patch == 0 || self.patch % 2 == 0 {
            return bad(format!("patch must be a positive odd integer, got {}", self.patch));
        }
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return bad(format!("image_size must be a positive multiple of {DOWNSAMPLE}, got {}", self.image_size));
        }
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        Ok(())
    }
}
