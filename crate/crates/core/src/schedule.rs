//! Variance schedules `beta_1..beta_T` and the coefficients derived from them.
//! Steps are 1-based throughout to match the usual `t = 1..=T` indexing.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_COSINE_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

/// How a schedule was built plus its `alpha_bar`, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Every per-step quantity the forward and reverse processes use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    /// `beta / sqrt(1 - alpha_bar)`, the noise weight in the reverse mean.
    pub posterior_mean_coef: f64,
}

fn cosine_f(t: f64, steps: f64, offset: f64) -> f64 {
    (((t / steps + offset) / (1.0 + offset)) * FRAC_PI_2)
        .cos()
        .powi(2)
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            kind,
            beta,
            alpha,
            alpha_bar,
        }
    }

    /// `beta` evenly spaced from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    return beta_start;
                }
                let f = i as f64 / (steps - 1) as f64;
                beta_start * (1.0 - f) + beta_end * f
            })
            .collect();
        Ok(Self::from_betas(
            ScheduleKind::Linear { beta_start, beta_end },
            beta,
        ))
    }

    /// Squared-cosine `alpha_bar` with small offset `s`; betas recovered from
    /// consecutive ratios and clipped at [`MAX_COSINE_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cosine offset must lie in (0, 1), got {offset}"
            )));
        }
        let n = steps as f64;
        let f0 = cosine_f(0.0, n, offset);
        let beta = (1..=steps)
            .map(|t| {
                let prev = cosine_f((t - 1) as f64, n, offset) / f0;
                let cur = cosine_f(t as f64, n, offset) / f0;
                (1.0 - cur / prev).clamp(f64::MIN_POSITIVE, MAX_COSINE_BETA)
            })
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine { offset }, beta))
    }

    pub fn from_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear { beta_start, beta_end } => Self::linear(steps, beta_start, beta_end),
            ScheduleKind::Cosine { offset } => Self::cosine(steps, offset),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn coeffs_at(&self, t: usize) -> Result<StepCoeffs> {
        self.check_step(t)?;
        let i = t - 1;
        let (beta, alpha, alpha_bar) = (self.beta[i], self.alpha[i], self.alpha_bar[i]);
        let sqrt_one_minus_alpha_bar = (1.0 - alpha_bar).sqrt();
        Ok(StepCoeffs {
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar: alpha_bar.sqrt(),
            sqrt_one_minus_alpha_bar,
            posterior_mean_coef: beta / sqrt_one_minus_alpha_bar,
        })
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            kind: self.kind,
            steps: self.steps(),
            alpha_bar: self.alpha_bar.clone(),
        }
    }

    /// Rebuild from a descriptor and check the stored `alpha_bar` to 1e-12.
    pub fn from_descriptor(desc: &ScheduleDescriptor) -> Result<Self> {
        let sched = Self::from_kind(desc.kind, desc.steps)?;
        if desc.alpha_bar.len() != sched.steps() {
            return Err(Error::malformed(
                "schedule descriptor",
                format!(
                    "{} alpha_bar values for {} steps",
                    desc.alpha_bar.len(),
                    desc.steps
                ),
            ));
        }
        if let Some((i, (a, b))) = sched
            .alpha_bar
            .iter()
            .zip(&desc.alpha_bar)
            .enumerate()
            .find(|(_, (a, b))| (*a - *b).abs() > 1e-12)
        {
            return Err(Error::malformed(
                "schedule descriptor",
                format!("alpha_bar[{}] rebuilt as {a}, stored {b}", i + 1),
            ));
        }
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_single_step_is_start() {
        let s = NoiseSchedule::linear(1, 0.02, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.02]);
    }

    #[test]
    fn linear_three_step_hand_values() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3]) {
            assert!((b - e).abs() <= 1e-16);
        }
        for (a, e) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504]) {
            assert!((a - e).abs() <= 1e-15, "{a} vs {e}");
        }
        let c = s.coeffs_at(2).unwrap();
        assert!((c.alpha_bar - 0.72).abs() <= 1e-15);
    }

    #[test]
    fn linear_ddpm_defaults_end_near_zero() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // log-space product as an independent route
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let last = *s.alpha_bars().last().unwrap();
        assert!(last < 1e-4);
        assert!((last - log.exp()).abs() <= 1e-12 * log.exp().max(1e-300) + 1e-18);
    }

    #[test]
    fn linear_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn cosine_betas_clipped_and_positive() {
        for steps in [1, 10, 100, 1000] {
            let s = NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET).unwrap();
            assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_COSINE_BETA));
        }
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
    }

    #[test]
    fn cosine_alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars().last().unwrap() < 0.05);
    }

    #[test]
    fn cosine_alpha_bar_matches_closed_form() {
        let s = NoiseSchedule::cosine(100, 0.008).unwrap();
        let f = |t: f64| {
            (((t / 100.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        let expected = f(50.0) / f(0.0);
        assert!((s.coeffs_at(50).unwrap().alpha_bar - expected).abs() <= 1e-12);
    }

    #[test]
    fn coeffs_consistent() {
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        let c1 = s.coeffs_at(1).unwrap();
        assert_eq!(c1.alpha_bar, 1.0 - c1.beta);
        for t in 1..=50 {
            let c = s.coeffs_at(t).unwrap();
            assert!((c.sqrt_alpha_bar.powi(2) - c.alpha_bar).abs() <= 1e-15);
            assert!((c.sqrt_one_minus_alpha_bar.powi(2) - (1.0 - c.alpha_bar)).abs() <= 1e-15);
            assert_eq!(c.posterior_mean_coef, c.beta / c.sqrt_one_minus_alpha_bar);
        }
        assert!(matches!(s.coeffs_at(0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.coeffs_at(51), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn descriptor_round_trip_and_tamper_detection() {
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let json = serde_json::to_string(&s.descriptor()).unwrap();
        assert!(json.contains("\"kind\":\"cosine\""));
        let desc: ScheduleDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(NoiseSchedule::from_descriptor(&desc).unwrap(), s);
        let mut bad = desc.clone();
        bad.alpha_bar[3] += 1e-9;
        assert!(NoiseSchedule::from_descriptor(&bad).is_err());
    }
}
