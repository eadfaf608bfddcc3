//! Long-format `frame,joint,x,y,z` dumps for external plotting.

use ndarray::Array2;

use super::Motion;
use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "frame,joint,x,y,z";

/// One row per (frame, joint). Coordinates use the shortest decimal form that
/// reads back to the same `f64`.
pub fn trajectory_csv(motion: &Motion) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for (t, frame) in motion.frames().rows().into_iter().enumerate() {
        for j in 0..motion.joints() {
            let p = &frame.as_slice().expect("contiguous frame")[j * 3..j * 3 + 3];
            out.push_str(&format!("{t},{j},{:?},{:?},{:?}\n", p[0], p[1], p[2]));
        }
    }
    out
}

/// Inverse of [`trajectory_csv`]. Rows must be in frame-major, joint-minor
/// order with every joint present in every frame.
pub fn parse_trajectory_csv(src: &str, fps: f64) -> Result<Motion> {
    let bad = |line: usize, why: String| Error::malformed(format!("trajectory csv line {line}"), why);
    let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        _ => return Err(bad(1, format!("expected header {TRAJECTORY_HEADER:?}"))),
    }
    let mut rows: Vec<(usize, usize, [f64; 3])> = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(n + 1, format!("{} fields, expected 5", fields.len())));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|e| bad(n + 1, e.to_string()));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n + 1, e.to_string()));
        rows.push((
            idx(fields[0])?,
            idx(fields[1])?,
            [num(fields[2])?, num(fields[3])?, num(fields[4])?],
        ));
    }
    let joints = rows
        .iter()
        .map(|r| r.1 + 1)
        .max()
        .ok_or_else(|| Error::Empty("trajectory csv".into()))?;
    if !rows.len().is_multiple_of(joints) {
        return Err(Error::malformed(
            "trajectory csv",
            "frames have differing joint counts",
        ));
    }
    let frames = rows.len() / joints;
    let mut data = Array2::zeros((frames, joints * 3));
    for (k, (t, j, p)) in rows.into_iter().enumerate() {
        if (t, j) != (k / joints, k % joints) {
            return Err(Error::malformed(
                "trajectory csv",
                format!(
                    "row {k} is frame {t} joint {j}, expected frame {} joint {}",
                    k / joints,
                    k % joints
                ),
            ));
        }
        for (a, v) in p.into_iter().enumerate() {
            data[[t, j * 3 + a]] = v;
        }
    }
    Motion::new(data, fps)
}
