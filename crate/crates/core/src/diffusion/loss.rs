use ndarray::{s, Array2};

use super::forward::q_sample;
use crate::denoiser::{time_embed, Denoiser, Params, Workspace};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::text::TextEmbedding;

/// A minibatch after step sampling, condition dropout and noising. Samples
/// are stacked along rows.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub x_t: Array2<f64>,
    pub eps: Array2<f64>,
    pub steps: Vec<usize>,
    /// Conditions after dropout; dropped entries are the null embedding.
    pub conds: Vec<TextEmbedding>,
}

/// Per example: draw `t ~ U{1..T}`, replace the caption by the null
/// embedding with probability `p_uncond`, then noise `x0` to step `t`.
pub fn prepare_batch(
    x0s: &[&Array2<f64>],
    conds: &[&TextEmbedding],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut SeededRng,
) -> Result<NoisyBatch> {
    let first = x0s.first().ok_or_else(|| Error::Empty("training batch".into()))?;
    if conds.len() != x0s.len() {
        return Err(Error::Shape(format!(
            "{} motions but {} conditions",
            x0s.len(),
            conds.len()
        )));
    }
    let (len, channels) = first.dim();
    let mut x_t = Array2::zeros((x0s.len() * len, channels));
    let mut eps = Array2::zeros(x_t.dim());
    let mut steps = Vec::with_capacity(x0s.len());
    let mut dropped = Vec::with_capacity(x0s.len());
    for (b, (x0, z)) in x0s.iter().zip(conds).enumerate() {
        if x0.dim() != (len, channels) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?}",
                x0.dim(),
                (len, channels)
            )));
        }
        let t = rng.int_inclusive(1, schedule.steps());
        let z = if rng.bernoulli(p_uncond) {
            TextEmbedding::null(z.dim())
        } else {
            (*z).clone()
        };
        let noisy = q_sample(x0, t, schedule, rng)?;
        x_t.slice_mut(s![b * len..(b + 1) * len, ..]).assign(&noisy.x_t);
        eps.slice_mut(s![b * len..(b + 1) * len, ..]).assign(&noisy.eps);
        steps.push(t);
        dropped.push(z);
    }
    Ok(NoisyBatch {
        x_t,
        eps,
        steps,
        conds: dropped,
    })
}

/// Mean of squared differences over every entry.
pub fn epsilon_mse(eps: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    if eps.dim() != pred.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps.dim(), pred.dim())));
    }
    if eps.is_empty() {
        return Err(Error::Empty("loss input".into()));
    }
    let sum: f64 = eps.iter().zip(pred).map(|(e, p)| (e - p) * (e - p)).sum();
    Ok(sum / eps.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` for every network parameter, fusion included.
    pub grads: Params,
}

/// ε-prediction MSE on a freshly drawn noisy batch, with exact gradients.
pub fn loss(
    net: &Denoiser,
    params: &Params,
    x0s: &[&Array2<f64>],
    conds: &[&TextEmbedding],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut SeededRng,
) -> Result<LossOutput> {
    let batch = prepare_batch(x0s, conds, schedule, p_uncond, rng)?;
    let e = net.config().embed_dim;
    let t_embeds = batch
        .steps
        .iter()
        .map(|&t| time_embed(t, schedule.steps(), e))
        .collect::<Result<Vec<_>>>()?;
    let t_refs: Vec<&[f64]> = t_embeds.iter().map(Vec::as_slice).collect();
    let cond_refs: Vec<&TextEmbedding> = batch.conds.iter().collect();
    let emb = net.fuse_rows(params, &t_refs, &cond_refs)?;
    let mut ws = Workspace::new();
    let pred = net.forward_batch(params, &batch.x_t, &emb, &mut ws)?;
    let value = epsilon_mse(&batch.eps, &pred)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let scale = 2.0 / pred.len() as f64;
    let dpred = (&pred - &batch.eps) * scale;
    let mut g = net.backward(params, &ws, &dpred)?;
    net.fuse_backward(params, &cond_refs, &g.embedding, &mut g.params);
    Ok(LossOutput {
        loss: value,
        grads: g.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::text::encode_hashed_bow;

    fn tiny() -> Denoiser {
        Denoiser::new(DenoiserConfig {
            seq_len: 8,
            channels: 6,
            text_dim: 5,
            embed_dim: 4,
            hidden: vec![4, 6],
            levels: 2,
        })
        .unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let x0 = SeededRng::new(1).normal_matrix(8, 6);
        let z = encode_hashed_bow("walk", 5, 0).unwrap();
        let b = prepare_batch(&[&x0, &x0], &[&z, &z], &sched, 0.1, &mut SeededRng::new(2)).unwrap();
        assert_eq!(epsilon_mse(&b.eps, &b.eps).unwrap(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_near_one() {
        // The zero-initialized output layer makes a fresh network predict 0.
        let net = tiny();
        let p = net.init_params(0);
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let x0 = SeededRng::new(3).normal_matrix(8, 6);
        let z = encode_hashed_bow("walk", 5, 0).unwrap();
        let n = 400;
        let x0s = vec![&x0; n];
        let zs = vec![&z; n];
        let out = loss(&net, &p, &x0s, &zs, &sched, 0.1, &mut SeededRng::new(4)).unwrap();
        // Var(eps^2) = 2 for a standard normal.
        let se = (2.0 / (n * 48) as f64).sqrt();
        assert!((out.loss - 1.0).abs() < 3.0 * se, "loss {}", out.loss);
    }

    #[test]
    fn dropout_rate_follows_p_uncond() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Array2::zeros((2, 3));
        let z = encode_hashed_bow("walk", 5, 0).unwrap();
        let n = 20_000;
        let b = prepare_batch(&vec![&x0; n], &vec![&z; n], &sched, 0.1, &mut SeededRng::new(5)).unwrap();
        let dropped = b.conds.iter().filter(|c| c.is_null()).count() as f64 / n as f64;
        let se = (0.1f64 * 0.9 / n as f64).sqrt();
        assert!((dropped - 0.1).abs() < 4.0 * se);
        assert!(b.steps.iter().all(|&t| (1..=10).contains(&t)));
        assert!(b.steps.contains(&1) && b.steps.contains(&10));
        let none = prepare_batch(&[&x0], &[&z], &sched, 0.0, &mut SeededRng::new(5)).unwrap();
        assert!(!none.conds[0].is_null());
    }

    #[test]
    fn batch_errors() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z = encode_hashed_bow("walk", 5, 0).unwrap();
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((3, 3));
        let mut rng = SeededRng::new(0);
        assert!(prepare_batch(&[], &[], &sched, 0.1, &mut rng).is_err());
        assert!(prepare_batch(&[&a], &[&z, &z], &sched, 0.1, &mut rng).is_err());
        assert!(prepare_batch(&[&a, &b], &[&z, &z], &sched, 0.1, &mut rng).is_err());
        assert!(epsilon_mse(&a, &b).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = tiny();
        let mut p = net.init_params(7);
        let mut noise = SeededRng::new(8);
        for v in p.values_mut() {
            *v += 0.3 * noise.normal();
        }
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let x0a = noise.normal_matrix(8, 6);
        let x0b = noise.normal_matrix(8, 6);
        let z = encode_hashed_bow("walk fast", 5, 1).unwrap();
        let y = encode_hashed_bow("run", 5, 1).unwrap();
        let x0s = [&x0a, &x0b, &x0a];
        let zs = [&z, &y, &y];
        // p_uncond 0.5 so both the projection and the null vector get gradient.
        let rng = SeededRng::new(9);
        let eval = |p: &Params| loss(&net, p, &x0s, &zs, &sched, 0.5, &mut rng.clone()).unwrap();
        let analytic = eval(&p).grads;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.num_values() {
            let orig = *p.values().nth(i).unwrap();
            *p.values_mut().nth(i).unwrap() = orig + h;
            let up = eval(&p).loss;
            *p.values_mut().nth(i).unwrap() = orig - h;
            let down = eval(&p).loss;
            *p.values_mut().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = *analytic.values().nth(i).unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
