//! Forward noising, the ε-prediction objective with condition dropout,
//! training, and guided ancestral sampling.

mod forward;
mod loss;
mod sample;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{q_chain_sample, q_sample, q_sample_with_noise, NoisySample};
pub use loss::{epsilon_mse, loss, prepare_batch, LossOutput, NoisyBatch};
pub use sample::{guide, guided_epsilon, p_sample_step, sample, sample_chains, EpsilonModel, NetworkModel};
pub use train::{init_seed, train, Adam, TrainConfig, TrainOutcome};

pub const DEFAULT_GUIDANCE_WEIGHT: f64 = 2.0;
pub const DEFAULT_P_UNCOND: f64 = 0.1;

/// Classifier-free guidance settings: `w` at sampling time, `p_uncond` for
/// condition dropout during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_GUIDANCE_WEIGHT,
            p_uncond: DEFAULT_P_UNCOND,
        }
    }
}

impl GuidanceConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.w.is_finite() && self.w >= 0.0) {
            out.push(format!(
                "guidance weight w must be finite and >= 0, got {}",
                self.w
            ));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            out.push(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}
