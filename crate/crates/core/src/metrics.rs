//! Sample-set metrics: within-caption diversity, caption-agnostic variance
//! over motion features, and a nearest-template accuracy probe for synthetic
//! families.

use ndarray::{Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::error::{Error, Result};
use crate::motion::SyntheticSpec;
use crate::rng::SeededRng;

pub const DEFAULT_SUBSET_SIZE: usize = 10;
pub const DEFAULT_SAMPLES_PER_TEXT: usize = 30;

fn l2(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(l2(a.iter().zip(b).map(|(x, y)| x - y)))
}

/// Mean L2 distance between paired samples of the same caption. For each
/// group, `2s` distinct indices are drawn without replacement; the first `s`
/// are paired with the next `s` in draw order.
pub fn diversity(groups: &[Vec<Array2<f64>>], s: usize, rng: &mut SeededRng) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Empty("generated set".into()));
    }
    if s == 0 {
        return Err(Error::InvalidArgument("subset size must be at least 1".into()));
    }
    let mut total = 0.0;
    for (g, samples) in groups.iter().enumerate() {
        if samples.len() < 2 * s {
            return Err(Error::InvalidArgument(format!(
                "text {g} has {} samples, need at least {}",
                samples.len(),
                2 * s
            )));
        }
        let picks = index::sample(rng, samples.len(), 2 * s).into_vec();
        for i in 0..s {
            total += distance(&samples[picks[i]], &samples[picks[s + i]])?;
        }
    }
    Ok(total / (groups.len() * s) as f64)
}

/// Mean L2 distance over index-aligned feature pairs.
pub fn variance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} features", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("feature set".into()));
    }
    let width = a[0].len();
    let mut total = 0.0;
    for (u, v) in a.iter().zip(b) {
        if u.len() != width || v.len() != width {
            return Err(Error::Shape(format!(
                "feature widths {} and {} differ from {width}",
                u.len(),
                v.len()
            )));
        }
        total += l2(u.iter().zip(v).map(|(x, y)| x - y));
    }
    Ok(total / a.len() as f64)
}

/// Per-channel mean, per-channel population std, then the mean L2 norm of
/// frame-to-frame displacement (0 for single-frame clips). Width `2C + 1`.
pub fn motion_feature(frames: &Array2<f64>) -> Vec<f64> {
    let n = frames.nrows() as f64;
    let mean: Vec<f64> = frames
        .axis_iter(Axis(1))
        .map(|c| c.iter().sum::<f64>() / n)
        .collect();
    let std = frames
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt());
    let velocity = if frames.nrows() < 2 {
        0.0
    } else {
        let steps = frames.rows().into_iter().zip(frames.rows().into_iter().skip(1));
        steps
            .map(|(a, b)| l2(a.iter().zip(b).map(|(x, y)| y - x)))
            .sum::<f64>()
            / (n - 1.0)
    };
    let mut out = mean.clone();
    out.extend(std);
    out.push(velocity);
    out
}

/// Index of the closest template by L2 distance; ties go to the lower index.
pub fn nearest_template(frames: &Array2<f64>, templates: &[Array2<f64>]) -> Result<usize> {
    let mut best = None;
    for (i, t) in templates.iter().enumerate() {
        let d = distance(frames, t)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Empty("template set".into()))
}

/// Fraction of motions whose nearest template matches their label.
pub fn template_accuracy(labelled: &[(usize, &Array2<f64>)], templates: &[Array2<f64>]) -> Result<f64> {
    if labelled.is_empty() {
        return Err(Error::Empty("labelled motions".into()));
    }
    let mut hits = 0;
    for (label, m) in labelled {
        if nearest_template(m, templates)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labelled.len() as f64)
}

fn spec_templates(model: &Model, spec: &SyntheticSpec) -> Result<Vec<Array2<f64>>> {
    spec.validate()?;
    let cfg = model.net.config();
    let mut problems = Vec::new();
    if spec.frames != cfg.seq_len {
        problems.push(format!(
            "spec has {} frames, model has {}",
            spec.frames, cfg.seq_len
        ));
    }
    if spec.joints * 3 != cfg.channels {
        problems.push(format!(
            "spec has {} joints, model has {} channels",
            spec.joints, cfg.channels
        ));
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    (0..spec.families.len())
        .map(|i| spec.family_template(i).map(|m| m.into_frames()))
        .collect()
}

/// Generate `n_per_family` samples for each family caption and score them
/// against the family templates.
pub fn conditional_accuracy(
    model: &Model,
    spec: &SyntheticSpec,
    n_per_family: usize,
    w: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    let templates = spec_templates(model, spec)?;
    let mut samples = Vec::new();
    for (i, caption) in spec.captions().enumerate() {
        for m in model.sample_motions(caption, n_per_family, w, rng)? {
            samples.push((i, m.into_frames()));
        }
    }
    let labelled: Vec<(usize, &Array2<f64>)> = samples.iter().map(|(i, m)| (*i, m)).collect();
    template_accuracy(&labelled, &templates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples_per_text: usize,
    /// Pairs per caption for diversity.
    pub subset_size: usize,
    /// Pairs drawn from the pooled samples for variance.
    pub variance_pairs: usize,
    pub w: f64,
    pub seed: u64,
    /// Start every chain of a caption from the same noise stream, so all its
    /// samples coincide.
    #[serde(default)]
    pub shared_noise: bool,
}

impl EvalConfig {
    pub fn new(w: f64, seed: u64) -> Self {
        Self {
            samples_per_text: DEFAULT_SAMPLES_PER_TEXT,
            subset_size: DEFAULT_SUBSET_SIZE,
            variance_pairs: DEFAULT_SUBSET_SIZE,
            w,
            seed,
            shared_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub diversity: f64,
    pub variance: f64,
    pub conditional_accuracy: f64,
    pub config: EvalConfig,
}

/// Sample every family caption of `spec` and compute all three metrics.
pub fn evaluate(model: &Model, spec: &SyntheticSpec, config: &EvalConfig) -> Result<MetricReport> {
    let templates = spec_templates(model, spec)?;
    let n = config.samples_per_text;
    let pooled_needed = 2 * config.variance_pairs;
    let total = n * spec.families.len();
    let mut problems = Vec::new();
    if config.subset_size == 0 || n < 2 * config.subset_size {
        problems.push(format!(
            "samples_per_text {n} must be at least twice subset_size {} (and subset_size >= 1)",
            config.subset_size
        ));
    }
    if config.variance_pairs == 0 || total < pooled_needed {
        problems.push(format!(
            "{total} pooled samples cannot supply {} variance pairs",
            config.variance_pairs
        ));
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let mut rng = SeededRng::new(config.seed);
    let mut groups = Vec::with_capacity(spec.families.len());
    for caption in spec.captions() {
        let mut chain_rng = rng.split();
        let motions = if config.shared_noise {
            let one = model.sample_motions(caption, 1, config.w, &mut chain_rng)?;
            vec![one[0].clone(); n]
        } else {
            model.sample_motions(caption, n, config.w, &mut chain_rng)?
        };
        groups.push(motions.into_iter().map(|m| m.into_frames()).collect::<Vec<_>>());
    }

    let diversity = diversity(&groups, config.subset_size, &mut rng)?;

    let pooled: Vec<&Array2<f64>> = groups.iter().flatten().collect();
    let picks = index::sample(&mut rng, pooled.len(), pooled_needed).into_vec();
    let (first, second) = picks.split_at(config.variance_pairs);
    let feats = |ids: &[usize]| ids.iter().map(|&i| motion_feature(pooled[i])).collect::<Vec<_>>();
    let variance = variance(&feats(first), &feats(second))?;

    let labelled: Vec<(usize, &Array2<f64>)> = groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |m| (i, m)))
        .collect();
    let conditional_accuracy = template_accuracy(&labelled, &templates)?;

    Ok(MetricReport {
        diversity,
        variance,
        conditional_accuracy,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_motions_have_zero_diversity() {
        let m = SeededRng::new(0).normal_matrix(4, 3);
        let groups = vec![vec![m.clone(); 6], vec![m; 4]];
        assert_eq!(diversity(&groups, 2, &mut SeededRng::new(1)).unwrap(), 0.0);
    }

    #[test]
    fn hand_diversity() {
        let groups = vec![vec![array![[0.0, 0.0]], array![[3.0, 4.0]]]];
        for seed in 0..5 {
            assert_eq!(diversity(&groups, 1, &mut SeededRng::new(seed)).unwrap(), 5.0);
        }
    }

    #[test]
    fn diversity_is_homogeneous() {
        let mut rng = SeededRng::new(2);
        let groups: Vec<Vec<Array2<f64>>> = (0..2)
            .map(|_| (0..6).map(|_| rng.normal_matrix(3, 3)).collect())
            .collect();
        let base = diversity(&groups, 3, &mut SeededRng::new(3)).unwrap();
        for c in [0.0, 0.5, 4.0] {
            let scaled: Vec<Vec<Array2<f64>>> =
                groups.iter().map(|g| g.iter().map(|m| m * c).collect()).collect();
            let d = diversity(&scaled, 3, &mut SeededRng::new(3)).unwrap();
            assert!((d - c * base).abs() <= 1e-12 * base.max(1.0));
        }
    }

    #[test]
    fn diversity_needs_enough_samples() {
        let groups = vec![vec![array![[0.0]]; 3]];
        assert!(diversity(&groups, 2, &mut SeededRng::new(0)).is_err());
        assert!(diversity(&groups, 0, &mut SeededRng::new(0)).is_err());
        assert!(diversity(&[], 1, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn hand_variance() {
        assert_eq!(
            variance(&[vec![0.0], vec![1.0]], &[vec![1.0], vec![4.0]]).unwrap(),
            2.0
        );
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0], vec![4.0]];
        assert_eq!(variance(&a, &b).unwrap(), 2.5);
        assert_eq!(variance(&b, &a).unwrap(), 2.5);
        assert_eq!(variance(&a, &a).unwrap(), 0.0);
        assert!(variance(&a, &b[..1]).is_err());
        assert!(variance(&a, &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn feature_of_constant_motion() {
        let m = Array2::from_elem((5, 3), 1.5);
        let f = motion_feature(&m);
        assert_eq!(f.len(), 7);
        assert_eq!(&f[..3], &[1.5; 3]);
        assert_eq!(&f[3..], &[0.0; 4]);
        assert_eq!(motion_feature(&array![[1.0, 2.0, 3.0]])[6], 0.0);
    }

    #[test]
    fn feature_moments_ignore_time_order() {
        let m = SeededRng::new(4).normal_matrix(9, 6);
        let mut rev = m.clone();
        rev.invert_axis(Axis(0));
        let (a, b) = (motion_feature(&m), motion_feature(&rev));
        for (x, y) in a[..12].iter().zip(&b[..12]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn templates_classify_themselves() {
        let t = vec![array![[0.0, 0.0]], array![[1.0, 1.0]], array![[5.0, 0.0]]];
        let labelled: Vec<(usize, &Array2<f64>)> = t.iter().enumerate().collect();
        assert_eq!(template_accuracy(&labelled, &t).unwrap(), 1.0);
        assert_eq!(nearest_template(&array![[0.9, 0.8]], &t).unwrap(), 1);
        assert!(nearest_template(&array![[0.0]], &[]).is_err());
    }
}
