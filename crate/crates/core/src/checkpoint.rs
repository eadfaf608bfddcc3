//! Versioned JSON container for a trained model: parameter tensors plus
//! everything needed to sample from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, NamedTensor, Params};
use crate::diffusion::{sample, GuidanceConfig, NetworkModel};
use crate::error::{Error, Result};
use crate::motion::{Motion, NormStats};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, ScheduleDescriptor};
use crate::text::{TextEncoder, TextEncoderSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleDescriptor,
    pub norm_stats: Option<NormStats>,
    pub text_encoder: TextEncoderSpec,
    pub guidance: GuidanceConfig,
    pub fps: f64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        denoiser: DenoiserConfig,
        schedule: &NoiseSchedule,
        norm_stats: Option<NormStats>,
        text_encoder: TextEncoderSpec,
        guidance: GuidanceConfig,
        fps: f64,
        params: Params,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            denoiser,
            schedule: schedule.descriptor(),
            norm_stats,
            text_encoder,
            guidance,
            fps,
            params: params.into_tensors(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::malformed("checkpoint", e))
    }

    /// The version field is checked before anything else, so files from a
    /// different format fail with [`Error::UnsupportedVersion`].
    pub fn from_json(src: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(src).map_err(|e| Error::malformed("checkpoint", e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(header.format_version));
        }
        serde_json::from_str(src).map_err(|e| Error::malformed("checkpoint", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&src)
    }

    /// Rebuild the network and check every stored tensor and statistic
    /// against the stored configuration.
    pub fn model(&self) -> Result<Model> {
        let net = Denoiser::new(self.denoiser.clone())?;
        let params = net.params_from_tensors(self.params.clone())?;
        let schedule = NoiseSchedule::from_descriptor(&self.schedule)?;
        if self.text_encoder.dim() != self.denoiser.text_dim {
            return Err(Error::Shape(format!(
                "text encoder width {} != denoiser text width {}",
                self.text_encoder.dim(),
                self.denoiser.text_dim
            )));
        }
        if let Some(n) = &self.norm_stats {
            if n.channels() != self.denoiser.channels || n.std.len() != n.channels() {
                return Err(Error::Shape(format!(
                    "normalization statistics have {} channels, model has {}",
                    n.channels(),
                    self.denoiser.channels
                )));
            }
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        Ok(Model {
            encoder: TextEncoder::from_spec(&self.text_encoder)?,
            net,
            params,
            schedule,
            norm_stats: self.norm_stats.clone(),
            guidance: self.guidance,
            fps: self.fps,
        })
    }
}

/// A checkpoint unpacked into ready-to-run pieces.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Denoiser,
    pub params: Params,
    pub schedule: NoiseSchedule,
    pub encoder: TextEncoder,
    pub norm_stats: Option<NormStats>,
    pub guidance: GuidanceConfig,
    pub fps: f64,
}

impl Model {
    pub fn network(&self) -> NetworkModel<'_> {
        NetworkModel {
            net: &self.net,
            params: &self.params,
            steps: self.schedule.steps(),
        }
    }

    /// `count` motions for `text` in original coordinates.
    pub fn sample_motions(
        &self,
        text: &str,
        count: usize,
        w: f64,
        rng: &mut SeededRng,
    ) -> Result<Vec<Motion>> {
        let stats = self.norm_stats.as_ref().ok_or(Error::MissingNormStats)?;
        let z = self.encoder.encode(text)?;
        sample(&self.network(), &z, count, &self.schedule, w, rng)?
            .into_iter()
            .map(|x| stats.denormalize(&Motion::new(x, self.fps)?))
            .collect()
    }
}
