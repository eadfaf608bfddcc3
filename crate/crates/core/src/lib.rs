//! Text-conditioned denoising diffusion for 3D keypoint motion sequences.
//!
//! The pipeline: captions are embedded ([`text`]), clips normalized
//! ([`motion`]), an ε-prediction network ([`denoiser`]) is trained with
//! condition dropout and sampled with classifier-free guidance
//! ([`diffusion`]), and outputs are scored with pairwise-distance metrics
//! ([`metrics`]).

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod rng;
pub mod schedule;
pub mod text;

pub use error::{Error, Result};
pub use rng::SeededRng;
