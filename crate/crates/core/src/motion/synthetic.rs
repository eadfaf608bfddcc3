//! Caption-labelled trajectory families. Each family owns parameter ranges;
//! every generated clip draws its own parameters, so one caption maps to many
//! distinct motions.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatasetEntry, Motion};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Closed interval `[lo, hi]`, written as a two-element JSON array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for ParamRange {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<ParamRange> for [f64; 2] {
    fn from(r: ParamRange) -> Self {
        [r.lo, r.hi]
    }
}

impl ParamRange {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn draw(&self, rng: &mut SeededRng) -> f64 {
        rng.uniform_in(self.lo, self.hi)
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

fn full_cycle() -> ParamRange {
    ParamRange {
        lo: 0.0,
        hi: 2.0 * PI,
    }
}

fn standing_height() -> ParamRange {
    ParamRange::fixed(0.9)
}

/// One caption and the ranges of its trajectory parameters.
///
/// The root joint translates along `heading` (radians) at `speed` m/s while
/// every other joint swings around it with amplitude `swing` (m) at
/// `cadence` Hz; consecutive joints alternate in phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub caption: String,
    pub speed: ParamRange,
    pub heading: ParamRange,
    pub swing: ParamRange,
    pub cadence: ParamRange,
    #[serde(default = "full_cycle")]
    pub phase: ParamRange,
    #[serde(default = "standing_height")]
    pub height: ParamRange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrajectoryParams {
    speed: f64,
    heading: f64,
    swing: f64,
    cadence: f64,
    phase: f64,
    height: f64,
}

impl TrajectoryParams {
    fn render(&self, joints: usize, frames: usize, fps: f64) -> Array2<f64> {
        let (sin_h, cos_h) = self.heading.sin_cos();
        Array2::from_shape_fn((frames, joints * 3), |(k, c)| {
            let tau = k as f64 / fps;
            let (j, axis) = (c / 3, c % 3);
            let travel = self.speed * tau;
            let angle = 2.0 * PI * self.cadence * tau + self.phase + j as f64 * PI;
            let sway = if j == 0 { 0.0 } else { self.swing * angle.sin() };
            match axis {
                0 => (travel + sway) * cos_h,
                1 if j == 0 => self.height,
                1 => self.height * (1.0 - j as f64 / joints as f64) + 0.25 * self.swing * angle.cos(),
                _ => (travel + sway) * sin_h,
            }
        })
    }
}

impl FamilySpec {
    fn draw(&self, rng: &mut SeededRng) -> TrajectoryParams {
        TrajectoryParams {
            speed: self.speed.draw(rng),
            heading: self.heading.draw(rng),
            swing: self.swing.draw(rng),
            cadence: self.cadence.draw(rng),
            phase: self.phase.draw(rng),
            height: self.height.draw(rng),
        }
    }

    fn midpoint(&self) -> TrajectoryParams {
        TrajectoryParams {
            speed: self.speed.mid(),
            heading: self.heading.mid(),
            swing: self.swing.mid(),
            cadence: self.cadence.mid(),
            phase: self.phase.mid(),
            height: self.height.mid(),
        }
    }

    fn ranges(&self) -> [(&'static str, &ParamRange); 6] {
        [
            ("speed", &self.speed),
            ("heading", &self.heading),
            ("swing", &self.swing),
            ("cadence", &self.cadence),
            ("phase", &self.phase),
            ("height", &self.height),
        ]
    }
}

/// Generator configuration: skeleton size, clip length and the families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub joints: usize,
    pub frames: usize,
    pub fps: f64,
    pub families: Vec<FamilySpec>,
}

impl SyntheticSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self =
            serde_json::from_str(&src).map_err(|e| Error::malformed(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.families.len() < 2 {
            problems.push(format!("need at least 2 families, found {}", self.families.len()));
        }
        if self.joints == 0 {
            problems.push("joints must be at least 1".into());
        }
        if self.frames == 0 {
            problems.push("frames must be at least 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            problems.push(format!("fps must be positive, got {}", self.fps));
        }
        let mut seen = BTreeSet::new();
        for fam in &self.families {
            if fam.caption.trim().is_empty() {
                problems.push("family with empty caption".into());
            }
            if !seen.insert(fam.caption.as_str()) {
                problems.push(format!("duplicate caption {:?}", fam.caption));
            }
            for (name, r) in fam.ranges() {
                if !r.is_valid() {
                    problems.push(format!(
                        "{:?}: bad {name} range [{}, {}]",
                        fam.caption, r.lo, r.hi
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.families.iter().map(|f| f.caption.as_str())
    }

    pub fn family_index(&self, caption: &str) -> Option<usize> {
        self.families.iter().position(|f| f.caption == caption)
    }

    /// The trajectory rendered at the midpoint of every parameter range.
    pub fn family_template(&self, family: usize) -> Result<Motion> {
        let fam = self
            .families
            .get(family)
            .ok_or_else(|| Error::InvalidArgument(format!("no family {family} in spec")))?;
        Motion::new(
            fam.midpoint().render(self.joints, self.frames, self.fps),
            self.fps,
        )
    }
}

/// `n` clips assigned to families round-robin; a pure function of `(spec, seed)`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<DatasetEntry>> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let fam = &spec.families[i % spec.families.len()];
            let params = fam.draw(&mut rng);
            let motion = Motion::new(params.render(spec.joints, spec.frames, spec.fps), spec.fps)?;
            DatasetEntry::new(fam.caption.clone(), motion)
        })
        .collect()
}
