use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatasetEntry, Motion};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize)]
struct MotionFileOut<'a> {
    fps: f64,
    joints: usize,
    frames: Vec<&'a [f64]>,
}

/// `null` is what a serializer emits for NaN/inf, so it is read as non-finite.
#[derive(Deserialize)]
struct MotionFileIn {
    fps: f64,
    joints: usize,
    frames: Vec<Vec<Option<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    text: String,
    motion: String,
}

/// JSON text is the only thing that can carry `NaN`/`Infinity` tokens or
/// overflowing literals; the parser rejects both, so classify them here.
fn looks_non_finite(src: &str, err: &serde_json::Error) -> bool {
    let msg = err.to_string();
    msg.contains("out of range") || ["NaN", "Infinity"].iter().any(|tok| src.contains(tok))
}

/// Parse a motion JSON document; `origin` names it in errors.
pub fn parse_motion(src: &str, origin: &str) -> Result<Motion> {
    let raw: MotionFileIn = serde_json::from_str(src).map_err(|e| {
        if looks_non_finite(src, &e) {
            Error::NonFinite(origin.to_string())
        } else {
            Error::malformed(origin, e)
        }
    })?;
    let width = raw.joints * 3;
    if raw.joints == 0 {
        return Err(Error::malformed(origin, "joints must be at least 1"));
    }
    if raw.frames.is_empty() {
        return Err(Error::malformed(origin, "no frames"));
    }
    let mut data = Vec::with_capacity(raw.frames.len() * width);
    for (row, frame) in raw.frames.iter().enumerate() {
        if frame.len() != width {
            return Err(Error::RaggedRows {
                row,
                expected: width,
                found: frame.len(),
            });
        }
        for v in frame {
            match v {
                Some(x) if x.is_finite() => data.push(*x),
                _ => return Err(Error::NonFinite(origin.to_string())),
            }
        }
    }
    if !(raw.fps.is_finite() && raw.fps > 0.0) {
        return Err(Error::malformed(
            origin,
            format!("fps must be positive, got {}", raw.fps),
        ));
    }
    let frames = Array2::from_shape_vec((raw.frames.len(), width), data).expect("row widths checked above");
    Motion::new(frames, raw.fps)
}

pub fn motion_to_json(motion: &Motion) -> String {
    let frames = motion.frames();
    let rows: Vec<&[f64]> = frames
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("motion frames are contiguous"))
        .collect();
    serde_json::to_string(&MotionFileOut {
        fps: motion.fps(),
        joints: motion.joints(),
        frames: rows,
    })
    .expect("finite motion serializes")
}

pub fn load_motion(path: impl AsRef<Path>) -> Result<Motion> {
    let path = path.as_ref();
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion(&src, &path.display().to_string())
}

pub fn save_motion(motion: &Motion, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, motion_to_json(motion)).map_err(|e| Error::io(path, e))
}

/// Write every entry as `motions/NNNNNN.json` under `dir` plus a JSON-Lines
/// manifest; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, entries: &[DatasetEntry]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let motions = dir.join("motions");
    fs::create_dir_all(&motions).map_err(|e| Error::io(&motions, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let rel = format!("motions/{i:06}.json");
        save_motion(&entry.motion, dir.join(&rel))?;
        let line = ManifestLine {
            text: entry.text.clone(),
            motion: rel,
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Read a JSON-Lines manifest; motion paths resolve against its directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let manifest = manifest.as_ref();
    let src = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let rec: ManifestLine = serde_json::from_str(line)
                .map_err(|e| Error::malformed(format!("{} line {}", manifest.display(), n + 1), e))?;
            let motion = load_motion(base.join(&rec.motion))?;
            DatasetEntry::new(rec.text, motion)
        })
        .collect()
}
