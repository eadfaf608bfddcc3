use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::loss;
use super::GuidanceConfig;
use crate::checkpoint::Checkpoint;
use crate::denoiser::{Denoiser, DenoiserConfig, Params};
use crate::error::{Error, Result};
use crate::motion::{compute_norm_stats, fit_sequence_length, DatasetEntry};
use crate::rng::SeededRng;
use crate::schedule::{NoiseSchedule, ScheduleKind, DEFAULT_COSINE_OFFSET};
use crate::text::{TextEmbedding, TextEncoder, TextEncoderSpec, DEFAULT_TEXT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleKind,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub lr: f64,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub text_encoder: TextEncoderSpec,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub levels: usize,
}

impl TrainConfig {
    pub fn new(seq_len: usize, seed: u64) -> Self {
        Self {
            schedule: ScheduleKind::Cosine {
                offset: DEFAULT_COSINE_OFFSET,
            },
            diffusion_steps: 1000,
            seq_len,
            batch_size: 32,
            steps: 2000,
            lr: 1e-4,
            guidance: GuidanceConfig::default(),
            seed,
            text_encoder: TextEncoderSpec::HashedBow {
                dim: DEFAULT_TEXT_DIM,
                seed: 0,
            },
            embed_dim: 64,
            hidden: vec![64, 128],
            levels: 2,
        }
    }

    pub fn denoiser_config(&self, channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            seq_len: self.seq_len,
            channels,
            text_dim: self.text_encoder.dim(),
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            levels: self.levels,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.guidance.problems();
        if self.diffusion_steps == 0 {
            out.push("diffusion_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.text_encoder.dim() == 0 {
            out.push("text encoder dim must be at least 1".into());
        }
        // Channels are unknown until the data is loaded; 3 is always valid.
        out.extend(self.denoiser_config(3).problems());
        if let Err(e) = NoiseSchedule::from_kind(self.schedule, self.diffusion_steps.max(1)) {
            out.push(e.to_string());
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

/// First- and second-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Minibatch loss at every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Endless epoch-wise shuffled indices.
struct Shuffler {
    order: Vec<usize>,
    pos: usize,
}

impl Shuffler {
    fn next(&mut self, rng: &mut SeededRng) -> usize {
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let i = self.order[self.pos];
        self.pos = (self.pos + 1) % self.order.len();
        i
    }
}

/// Independent streams for cropping, initialization, batching and noise, in
/// that order, all split from the run seed.
fn run_streams(seed: u64) -> (SeededRng, u64, SeededRng, SeededRng) {
    let mut root = SeededRng::new(seed);
    let crop = root.split();
    let init = root.next_seed();
    let batch = root.split();
    let noise = root.split();
    (crop, init, batch, noise)
}

/// The seed [`train`] passes to [`Denoiser::init_params`] for run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    run_streams(seed).1
}

/// Seeded minibatch training on the ε-prediction loss with condition dropout.
pub fn train(dataset: &[DatasetEntry], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Empty("training dataset".into()))?;
    let channels = first.motion.channels();
    let fps = first.motion.fps();
    if let Some(i) = dataset.iter().position(|e| e.motion.channels() != channels) {
        return Err(Error::Shape(format!(
            "entry {i} has {} channels, entry 0 has {channels}",
            dataset[i].motion.channels()
        )));
    }

    let (mut crop_rng, init_seed, mut batch_rng, mut noise_rng) = run_streams(config.seed);

    let fitted = fit_sequence_length(dataset, config.seq_len, &mut crop_rng)?;
    let stats = compute_norm_stats(&fitted)?;
    let x0s: Vec<Array2<f64>> = fitted
        .iter()
        .map(|e| stats.normalize(&e.motion).map(|m| m.into_frames()))
        .collect::<Result<_>>()?;
    let encoder = TextEncoder::from_spec(&config.text_encoder)?;
    let mut cache: BTreeMap<&str, TextEmbedding> = BTreeMap::new();
    for e in &fitted {
        if !cache.contains_key(e.text.as_str()) {
            cache.insert(&e.text, encoder.encode(&e.text)?);
        }
    }
    let conds: Vec<&TextEmbedding> = fitted.iter().map(|e| &cache[e.text.as_str()]).collect();

    let schedule = NoiseSchedule::from_kind(config.schedule, config.diffusion_steps)?;
    let denoiser_config = config.denoiser_config(channels);
    let net = Denoiser::new(denoiser_config.clone())?;
    let mut params = net.init_params(init_seed);
    let mut adam = Adam::new(config.lr, params.num_values());
    let mut shuffler = Shuffler {
        order: (0..x0s.len()).collect(),
        pos: 0,
    };

    let mut step_losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| shuffler.next(&mut batch_rng))
            .collect();
        let xs: Vec<&Array2<f64>> = idx.iter().map(|&i| &x0s[i]).collect();
        let zs: Vec<&TextEmbedding> = idx.iter().map(|&i| conds[i]).collect();
        let out = match loss(
            &net,
            &params,
            &xs,
            &zs,
            &schedule,
            config.guidance.p_uncond,
            &mut noise_rng,
        ) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            other => other?,
        };
        if !out.grads.all_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        adam.step(&mut params, &out.grads);
        if !params.all_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        step_losses.push(out.loss);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(
            denoiser_config,
            &schedule,
            Some(stats),
            config.text_encoder.clone(),
            config.guidance,
            fps,
            params,
        ),
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{time_embed, FusedEmbedding};
    use crate::motion::{generate_synthetic_dataset, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        serde_json::from_str(
            r#"{"joints": 2, "frames": 16, "fps": 20.0, "families": [
                {"caption": "walk fast", "speed": [1.6, 2.0], "heading": [0.0, 0.3],
                 "swing": [0.2, 0.3], "cadence": [1.0, 1.5]},
                {"caption": "walk slow", "speed": [0.3, 0.6], "heading": [0.0, 0.3],
                 "swing": [0.2, 0.3], "cadence": [1.0, 1.5]}]}"#,
        )
        .unwrap()
    }

    fn small(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            diffusion_steps: 50,
            batch_size: 8,
            steps,
            lr: 1e-3,
            embed_dim: 16,
            hidden: vec![8, 16],
            text_encoder: TextEncoderSpec::HashedBow { dim: 16, seed: 0 },
            ..TrainConfig::new(16, seed)
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = generate_synthetic_dataset(&spec(), 20, 1).unwrap();
        let out = train(&data, &small(0, 5)).unwrap();
        assert!(out.step_losses.is_empty());
        let model = out.checkpoint.model().unwrap();
        let init = model.net.init_params(init_seed(5));
        assert_eq!(model.params, init);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = generate_synthetic_dataset(&spec(), 20, 1).unwrap();
        let a = train(&data, &small(5, 5)).unwrap();
        let b = train(&data, &small(5, 5)).unwrap();
        let c = train(&data, &small(5, 6)).unwrap();
        assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
        assert_eq!(a.step_losses, b.step_losses);
        assert_ne!(a.checkpoint, c.checkpoint);
    }

    #[test]
    fn trained_model_separates_captions() {
        let data = generate_synthetic_dataset(&spec(), 20, 1).unwrap();
        let out = train(&data, &small(3, 2)).unwrap();
        let m = out.checkpoint.model().unwrap();
        let te = time_embed(10, 50, 16).unwrap();
        let x = SeededRng::new(0).normal_matrix(16, 6);
        let f = |text: &str| {
            let z = m.encoder.encode(text).unwrap();
            let emb: FusedEmbedding = m.net.fuse(&m.params, &te, &z).unwrap();
            m.net.forward(&m.params, &x, &emb).unwrap()
        };
        assert_ne!(f("walk fast"), f("walk slow"));
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let data = generate_synthetic_dataset(&spec(), 40, 3).unwrap();
        let out = train(&data, &small(400, 4)).unwrap();
        let head: f64 = out.step_losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = out.step_losses[300..].iter().sum::<f64>() / 100.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn config_problems_are_collected() {
        let mut c = small(1, 0);
        c.batch_size = 0;
        c.lr = -1.0;
        c.guidance.p_uncond = 1.5;
        c.levels = 3;
        match c.validate() {
            Err(Error::InvalidConfig(p)) => assert!(p.len() >= 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_clips_rejected_and_empty_dataset() {
        let data = generate_synthetic_dataset(&spec(), 4, 1).unwrap();
        assert!(matches!(
            train(&data, &small(1, 0).with_len(32)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(train(&[], &small(1, 0)), Err(Error::Empty(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data = generate_synthetic_dataset(&spec(), 8, 1).unwrap();
        let mut c = small(200, 0);
        c.lr = 1e150;
        assert!(matches!(train(&data, &c), Err(Error::Diverged { .. })));
    }

    impl TrainConfig {
        fn with_len(mut self, len: usize) -> Self {
            self.seq_len = len;
            self
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let net = Denoiser::new(DenoiserConfig {
            seq_len: 4,
            channels: 3,
            text_dim: 2,
            embed_dim: 2,
            hidden: vec![2],
            levels: 1,
        })
        .unwrap();
        let mut p = net.init_params(0);
        let before = p.clone();
        let mut g = p.zeros_like();
        for (i, v) in g.values_mut().enumerate() {
            *v = if i % 2 == 0 { 3.0 } else { -0.5 };
        }
        Adam::new(0.01, p.num_values()).step(&mut p, &g);
        for ((a, b), gi) in p.values().zip(before.values()).zip(g.values()) {
            assert!(((b - a) - 0.01 * gi.signum()).abs() < 1e-9);
        }
    }
}
