use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::std_normal;

pub const ALPHA_START: f64 = 0.9999;
pub const ALPHA_END: f64 = 0.98;

/// Per-step retention factors `α_t` and their running products `ᾱ_t`,
/// stored for `t = 1..=T` at index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Reverse-process variances; all zero (deterministic reverse steps).
    pub sigma: Vec<f64>,
}

/// `α` linear from [`ALPHA_START`] to [`ALPHA_END`] inclusive over `steps`.
pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs T >= 2 steps, got {steps}")));
    }
    let alpha: Vec<f64> = (0..steps)
        .map(|i| ALPHA_START + (ALPHA_END - ALPHA_START) * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        alpha,
        alpha_bar,
        sigma: vec![0.0; steps],
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Step whose marginal noise-to-signal ratio `(1 − ᾱ_t)/ᾱ_t` is closest
    /// to `noise_ratio`.
    pub fn matched_step(&self, noise_ratio: f64) -> usize {
        (1..=self.steps())
            .min_by(|&a, &b| {
                let r = |t: usize| {
                    let ab = self.alpha_bar[t - 1];
                    ((1.0 - ab) / ab - noise_ratio).abs()
                };
                r(a).total_cmp(&r(b))
            })
            .unwrap_or(1)
    }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
pub fn forward_sample<R: Rng + ?Sized>(
    x0: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check(t)?;
    Ok(marginal(x0, schedule.alpha_bar[t - 1], rng))
}

fn marginal<R: Rng + ?Sized>(x0: &[f64], alpha_bar: f64, rng: &mut R) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().map(|x| a * x + s * std_normal(rng)).collect()
}

/// One Markov step `x_t = sqrt(α_t)·x_{t−1} + sqrt(1 − α_t)·ε`.
pub fn forward_step<R: Rng + ?Sized>(
    x_prev: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let alpha = schedule.alpha(t)?;
    Ok(marginal(x_prev, alpha, rng))
}

/// `(x_{t−1}, x_t)` drawn from one ancestral chain: `x_{t−1}` from its
/// marginal, then a single forward step.
pub fn training_pair<R: Rng + ?Sized>(
    x0: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check(t)?;
    let prev = if t == 1 {
        x0.to_vec()
    } else {
        marginal(x0, schedule.alpha_bar[t - 2], rng)
    };
    let next = forward_step(&prev, t, schedule, rng)?;
    Ok((prev, next))
}
