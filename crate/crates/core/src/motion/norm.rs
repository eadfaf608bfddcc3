use serde::{Deserialize, Serialize};

use super::{DatasetEntry, Motion};
use crate::error::{Error, Result};

/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel statistics over every frame of every motion (Welford updates).
pub fn compute_norm_stats(dataset: &[DatasetEntry]) -> Result<NormStats> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Empty("dataset for normalization statistics".into()))?;
    let width = first.motion.channels();
    let mut mean = vec![0.0; width];
    let mut m2 = vec![0.0; width];
    let mut count = 0.0;
    for entry in dataset {
        let frames = entry.motion.frames();
        if frames.ncols() != width {
            return Err(Error::Shape(format!(
                "motion width {} differs from {width}",
                frames.ncols()
            )));
        }
        for row in frames.rows() {
            count += 1.0;
            for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row.iter()) {
                let delta = x - *m;
                *m += delta / count;
                *s += delta * (x - *m);
            }
        }
    }
    let std = m2.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, motion: &Motion) -> Result<()> {
        if motion.channels() != self.channels() || self.std.len() != self.channels() {
            return Err(Error::Shape(format!(
                "motion has {} channels, statistics have {}",
                motion.channels(),
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, motion: &Motion) -> Result<Motion> {
        self.check(motion)?;
        let mut frames = motion.frames().clone();
        for mut row in frames.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Motion::new(frames, motion.fps())
    }

    pub fn denormalize(&self, motion: &Motion) -> Result<Motion> {
        self.check(motion)?;
        let mut frames = motion.frames().clone();
        for mut row in frames.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        Motion::new(frames, motion.fps())
    }
}
