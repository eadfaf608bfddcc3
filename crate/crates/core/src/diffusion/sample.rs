use ndarray::{s, Array2};

use crate::denoiser::{time_embed, Denoiser, Params, Workspace};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::text::TextEmbedding;

/// Anything that predicts the injected noise for a batch of `(L, C)` samples
/// stacked into `(batch * L, C)`, all at step `t`.
pub trait EpsilonModel {
    /// `(L, C)` of one sample.
    fn sample_shape(&self) -> (usize, usize);

    fn predict(&self, x_t: &Array2<f64>, t: usize, conds: &[&TextEmbedding]) -> Result<Array2<f64>>;
}

/// A trained network bound to its parameters and step count.
#[derive(Debug, Clone, Copy)]
pub struct NetworkModel<'a> {
    pub net: &'a Denoiser,
    pub params: &'a Params,
    pub steps: usize,
}

impl EpsilonModel for NetworkModel<'_> {
    fn sample_shape(&self) -> (usize, usize) {
        let c = self.net.config();
        (c.seq_len, c.channels)
    }

    fn predict(&self, x_t: &Array2<f64>, t: usize, conds: &[&TextEmbedding]) -> Result<Array2<f64>> {
        let te = time_embed(t, self.steps, self.net.config().embed_dim)?;
        let tes = vec![te.as_slice(); conds.len()];
        let emb = self.net.fuse_rows(self.params, &tes, conds)?;
        self.net
            .forward_batch(self.params, x_t, &emb, &mut Workspace::new())
    }
}

/// `(1 + w) cond - w uncond`.
pub fn guide(cond: &Array2<f64>, uncond: &Array2<f64>, w: f64) -> Array2<f64> {
    let mut out = cond * (1.0 + w);
    out.scaled_add(-w, uncond);
    out
}

/// Guided noise estimate. With `w == 0` only the conditional branch is
/// evaluated; samples conditioned on the null embedding get the unconditional
/// prediction unchanged.
pub fn guided_epsilon(
    model: &impl EpsilonModel,
    x_t: &Array2<f64>,
    t: usize,
    conds: &[&TextEmbedding],
    w: f64,
) -> Result<Array2<f64>> {
    let cond = model.predict(x_t, t, conds)?;
    if w == 0.0 || conds.iter().all(|z| z.is_null()) {
        return Ok(cond);
    }
    let nulls: Vec<TextEmbedding> = conds.iter().map(|z| TextEmbedding::null(z.dim())).collect();
    let null_refs: Vec<&TextEmbedding> = nulls.iter().collect();
    let uncond = model.predict(x_t, t, &null_refs)?;
    let mut out = guide(&cond, &uncond, w);
    let len = model.sample_shape().0;
    for (b, z) in conds.iter().enumerate() {
        if z.is_null() {
            out.slice_mut(s![b * len..(b + 1) * len, ..])
                .assign(&cond.slice(s![b * len..(b + 1) * len, ..]));
        }
    }
    Ok(out)
}

/// One reverse step `x_t -> x_{t-1}`: the mean
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)` plus
/// `sqrt(beta_t)` noise, except at `t = 1`. Chain `b` draws from `rngs[b]`.
pub fn p_sample_step(
    model: &impl EpsilonModel,
    x_t: &Array2<f64>,
    t: usize,
    conds: &[&TextEmbedding],
    schedule: &NoiseSchedule,
    w: f64,
    rngs: &mut [SeededRng],
) -> Result<Array2<f64>> {
    let c = schedule.coeffs_at(t)?;
    let len = model.sample_shape().0;
    if rngs.len() != conds.len() || x_t.nrows() != len * conds.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} conditions, {} streams for length {len}",
            x_t.nrows(),
            conds.len(),
            rngs.len()
        )));
    }
    let eps = guided_epsilon(model, x_t, t, conds, w)?;
    let mut x = x_t.clone();
    x.scaled_add(-c.posterior_mean_coef, &eps);
    x /= c.alpha.sqrt();
    if t > 1 {
        let sigma = c.beta.sqrt();
        for (b, rng) in rngs.iter_mut().enumerate() {
            for v in x.slice_mut(s![b * len..(b + 1) * len, ..]).iter_mut() {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(x)
}

/// Run one reverse chain per stream, all conditioned on `cond`. Each chain
/// only touches its own stream and the model evaluates rows independently,
/// so splitting the streams across calls gives identical chains.
pub fn sample_chains(
    model: &impl EpsilonModel,
    cond: &TextEmbedding,
    schedule: &NoiseSchedule,
    w: f64,
    mut rngs: Vec<SeededRng>,
) -> Result<Vec<Array2<f64>>> {
    let (len, channels) = model.sample_shape();
    let count = rngs.len();
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut x = Array2::zeros((count * len, channels));
    for (b, rng) in rngs.iter_mut().enumerate() {
        x.slice_mut(s![b * len..(b + 1) * len, ..])
            .assign(&rng.normal_matrix(len, channels));
    }
    let conds = vec![cond; count];
    for t in (1..=schedule.steps()).rev() {
        x = p_sample_step(model, &x, t, &conds, schedule, w, &mut rngs)?;
    }
    Ok((0..count)
        .map(|b| x.slice(s![b * len..(b + 1) * len, ..]).to_owned())
        .collect())
}

/// `count` independent chains from `x_T ~ N(0, I)`, each on a child stream
/// split from `rng`. Outputs are in the model's (normalized) space.
pub fn sample(
    model: &impl EpsilonModel,
    cond: &TextEmbedding,
    count: usize,
    schedule: &NoiseSchedule,
    w: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Array2<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let rngs = (0..count).map(|_| rng.split()).collect();
    sample_chains(model, cond, schedule, w, rngs)
}
