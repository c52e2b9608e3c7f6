//! The learned planner `p_θ(x_{t+Δ} | o_{≤t})`: a small convolutional
//! encoder-decoder over the BEV raster that outputs one spatial distribution
//! per future timestep, with its training loop, checkpoints and evaluation.
//!
//! Architecture. The binary raster is first average-pooled by `input_pool`
//! (1 keeps full resolution). Encoder stage `k` is a 3×3 convolution, bias and
//! ReLU, with 2× average pooling between stages; dropout follows the deepest
//! stage. Each decoder stage upsamples 2× (nearest), concatenates the encoder
//! output at that resolution and applies a 3×3 convolution and ReLU. A 1×1
//! head maps to `horizon_steps` logit maps. Full-resolution logits are the
//! head output broadcast over each `input_pool × input_pool` block plus a
//! learned per-cell bias map, so pooled models still resolve single cells.
//! The head and the bias map start at zero, making the initial output exactly
//! uniform.

mod checkpoint;
mod dist;
mod eval;
mod network;
mod optim;
mod samples;
pub mod tensor;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GridSpec;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, file_sha256, load_checkpoint, save_checkpoint,
    sha256_hex, Checkpoint, CHECKPOINT_EXTENSION, CHECKPOINT_VERSION,
};
pub use dist::{loss, PlanDistribution};
pub use eval::{evaluate_planner, rank_metrics, PlannerEval};
pub use network::{BatchGrad, Network, Planner, Tensor, TrainItem};
pub use optim::Adam;
pub use samples::{
    build_sample, enumerate_samples, subject_history, subject_target, Sample, SampleRef, Subject,
};
pub use train::{train, LogRow, TrainOptions, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Per-timestep spatial softmax cross-entropy.
    SoftmaxCe,
    /// Per-cell binary cross-entropy with the target cell up-weighted by
    /// `pos_weight`; outputs are renormalized per timestep.
    BinaryCePosWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub grid: GridSpec,
    pub horizon_steps: usize,
    pub step: f64,
    pub history_frames: usize,
    pub history_period: f64,
    pub in_channels: usize,
    pub dropout_rate: f64,
    pub loss_clip: Option<f64>,
    pub objective: Objective,
    pub pos_weight: f64,
    pub train_on_all_agents: bool,
    /// Non-ego subjects must move at least this far over the horizon (m).
    pub min_displacement: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub input_pool: usize,
    pub widths: Vec<usize>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            horizon_steps: 15,
            step: 0.25,
            history_frames: 5,
            history_period: 0.5,
            in_channels: 8,
            dropout_rate: 0.1,
            loss_clip: Some(100.0),
            objective: Objective::SoftmaxCe,
            pos_weight: 1.0,
            train_on_all_agents: true,
            min_displacement: 0.5,
            lr: 2e-3,
            weight_decay: 1e-5,
            batch_size: 16,
            steps: 10_000,
            seed: 0,
            input_pool: 1,
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl PlannerConfig {
    /// Single-core preset: the encoder runs on 4× pooled input with half the
    /// default widths, trained for 2000 steps.
    pub fn desk() -> Self {
        Self {
            input_pool: 4,
            widths: vec![8, 16, 32, 64],
            steps: 2000,
            ..Self::default()
        }
    }

    /// Rows and columns of the encoder input.
    pub fn base_resolution(&self) -> (usize, usize) {
        (
            self.grid.n_rows / self.input_pool,
            self.grid.n_cols / self.input_pool,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.horizon_steps == 0 {
            return Err(Error::config("horizon_steps", "must be positive"));
        }
        if !(self.step > 0.0) || !(self.history_period > 0.0) || self.history_frames == 0 {
            return Err(Error::config("step", "timing fields must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if let Some(c) = self.loss_clip {
            if !(c > 0.0) {
                return Err(Error::config("loss_clip", "must be positive"));
            }
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::config("pos_weight", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "lr",
                "learning rate must be positive and weight decay non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config(
                "widths",
                "need at least one stage of positive width",
            ));
        }
        let p = self.input_pool;
        if p == 0 || self.grid.n_rows % p != 0 || self.grid.n_cols % p != 0 {
            return Err(Error::config(
                "input_pool",
                "must divide the grid dimensions",
            ));
        }
        let div = 1usize << (self.widths.len() - 1);
        let (r, c) = self.base_resolution();
        if r % div != 0 || c % div != 0 {
            return Err(Error::config(
                "widths",
                format!(
                    "pooled grid {r}×{c} is not divisible by 2^{} for the encoder depth",
                    self.widths.len() - 1
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PlannerConfig::default().validate().unwrap();
        PlannerConfig::desk().validate().unwrap();
        let bad = PlannerConfig {
            input_pool: 3,
            ..PlannerConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "input_pool")
        );
    }

    #[test]
    fn config_json_round_trip() {
        let c = PlannerConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        let back: PlannerConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }
}
