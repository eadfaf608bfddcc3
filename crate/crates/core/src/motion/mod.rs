//! Keypoint motion sequences, their normalization, dataset files and the
//! synthetic caption/trajectory generator used for desk-scale training.

mod io;
mod norm;
mod synthetic;
mod trajectory;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use io::{
    load_dataset, load_motion, motion_to_json, parse_motion, save_motion, write_dataset, MANIFEST_FILE,
};
pub use norm::{compute_norm_stats, NormStats, STD_FLOOR};
pub use synthetic::{generate_synthetic_dataset, FamilySpec, ParamRange, SyntheticSpec};
pub use trajectory::{parse_trajectory_csv, trajectory_csv, TRAJECTORY_HEADER};

/// One skeleton pose: `J` joint positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    joints: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Empty("pose has no joints".into()));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    /// Joint-major concatenation `[x0, y0, z0, x1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn unflatten(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "flattened pose length {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// An `L x C` sequence of flattened poses sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    frames: Array2<f64>,
    fps: f64,
}

impl Motion {
    pub fn new(frames: Array2<f64>, fps: f64) -> Result<Self> {
        let (len, channels) = frames.dim();
        if len == 0 {
            return Err(Error::Empty("motion has no frames".into()));
        }
        if channels == 0 || channels % 3 != 0 {
            return Err(Error::Shape(format!(
                "motion width {channels} is not a positive multiple of 3"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion frames".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn from_poses(poses: &[Pose], fps: f64) -> Result<Self> {
        let first = poses.first().ok_or_else(|| Error::Empty("no poses".into()))?;
        let width = first.joints().len() * 3;
        let mut frames = Array2::zeros((poses.len(), width));
        for (t, pose) in poses.iter().enumerate() {
            let flat = pose.flatten();
            if flat.len() != width {
                return Err(Error::Shape(format!(
                    "pose {t} has {} joints, expected {}",
                    pose.joints().len(),
                    width / 3
                )));
            }
            frames.row_mut(t).assign(&ndarray::aview1(&flat));
        }
        Self::new(frames, fps)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn joints(&self) -> usize {
        self.channels() / 3
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose::unflatten(&self.frames.row(t).to_vec()).expect("motion rows are valid poses")
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Motion> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Shape(format!(
                "crop {start}..{} outside motion of length {}",
                start + len,
                self.len()
            )));
        }
        Motion::new(self.frames.slice(s![start..start + len, ..]).to_owned(), self.fps)
    }
}

/// A caption paired with one motion clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub text: String,
    pub motion: Motion,
}

impl DatasetEntry {
    pub fn new(text: impl Into<String>, motion: Motion) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("dataset caption".into()));
        }
        Ok(Self { text, motion })
    }
}

/// Bring every clip to exactly `seq_len` frames: shorter clips are rejected,
/// longer ones are cropped at a seeded random offset.
pub fn fit_sequence_length(
    entries: &[DatasetEntry],
    seq_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<DatasetEntry>> {
    let short: Vec<String> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.motion.len() < seq_len)
        .map(|(i, e)| format!("entry {i} has {} frames, need {seq_len}", e.motion.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InvalidConfig(short));
    }
    entries
        .iter()
        .map(|e| {
            let slack = e.motion.len() - seq_len;
            let start = if slack == 0 {
                0
            } else {
                rng.int_inclusive(0, slack)
            };
            Ok(DatasetEntry {
                text: e.text.clone(),
                motion: e.motion.crop(start, seq_len)?,
            })
        })
        .collect()
}
