use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;

/// `x_t` drawn from `q(x_t | x_0)` together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Array2<f64>,
    pub t: usize,
    pub eps: Array2<f64>,
}

/// Closed-form marginal `sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps` for a given `eps`.
pub fn q_sample_with_noise(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    eps: Array2<f64>,
) -> Result<NoisySample> {
    let c = schedule.coeffs_at(t)?;
    if eps.dim() != x0.dim() {
        return Err(Error::Shape(format!(
            "noise {:?} vs sample {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let mut x_t = x0 * c.sqrt_alpha_bar;
    x_t.scaled_add(c.sqrt_one_minus_alpha_bar, &eps);
    Ok(NoisySample { x_t, t, eps })
}

pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<NoisySample> {
    schedule.check_step(t)?;
    let eps = rng.normal_matrix(x0.nrows(), x0.ncols());
    q_sample_with_noise(x0, t, schedule, eps)
}

/// `t` successive single-step transitions `N(sqrt(1 - beta_s) x, beta_s I)`.
/// Slow; exists to check [`q_sample`] statistically.
pub fn q_chain_sample(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    let mut x = x0.clone();
    for &beta in &schedule.betas()[..t] {
        let (keep, spread) = ((1.0 - beta).sqrt(), beta.sqrt());
        x.mapv_inplace(|v| keep * v + spread * rng.normal());
    }
    Ok(x)
}
