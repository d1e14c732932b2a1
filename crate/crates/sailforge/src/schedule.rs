//! Forward-diffusion coefficients and the noising operation.
//!
//! A [`NoiseSchedule`] holds the cumulative signal-retention coefficients
//! `alpha_bar[t]` of the forward process
//! `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`
//! together with the per-step posterior variances used by the ancestral
//! sampler.

use crate::error::{Result, SailError};

/// How the per-step beta coefficients are laid out over the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// beta interpolated linearly between `beta_min` and `beta_max`.
    Linear,
    /// Squared-cosine alpha_bar curve; betas clipped at `beta_max`.
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(SailError::Config(format!(
                "schedule.kind: unknown kind `{other}` (expected linear|cosine)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

/// Forward-diffusion coefficients indexed by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_timesteps: usize,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step posterior variance `(1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta_t`;
    /// zero at t = 0 (the terminal denoising step).
    pub fn posterior_var(&self) -> &[f64] {
        &self.posterior_var
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps {
            return Err(SailError::Domain(format!(
                "timestep {t} out of range (schedule has {} steps)",
                self.num_timesteps
            )));
        }
        Ok(())
    }

    /// The noising operation `q_t`: returns
    /// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(SailError::Domain(format!(
                "forward_diffuse: x0 has dim {} but eps has dim {}",
                x0.len(),
                eps.len()
            )));
        }
        Ok(mix_signal_noise(x0, eps, self.alpha_bar[t]))
    }
}

/// The noising combination for an explicit `alpha_bar` value.
pub(crate) fn mix_signal_noise(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
}

/// Build a schedule of `num_timesteps` steps.
///
/// For `Linear`, beta runs from `beta_min` to `beta_max` inclusive; for
/// `Cosine`, betas follow the squared-cosine alpha_bar curve clipped at
/// `beta_max` (`beta_min` is unused there). Deterministic for fixed inputs.
pub fn build_schedule(
    num_timesteps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if num_timesteps < 1 {
        return Err(SailError::Config(
            "schedule.timesteps: must be >= 1".into(),
        ));
    }
    if !(beta_min > 0.0) || !beta_min.is_finite() {
        return Err(SailError::Config(format!(
            "schedule.beta_min: must be in (0, 1), got {beta_min}"
        )));
    }
    if !(beta_max < 1.0) || !beta_max.is_finite() {
        return Err(SailError::Config(format!(
            "schedule.beta_max: must be in (0, 1), got {beta_max}"
        )));
    }
    if beta_min > beta_max {
        return Err(SailError::Config(format!(
            "schedule.beta_min: {beta_min} exceeds beta_max {beta_max}"
        )));
    }

    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..num_timesteps)
            .map(|t| {
                if num_timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (num_timesteps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            // Squared-cosine alpha_bar(u) = cos((u + s)/(1 + s) * pi/2)^2, s = 0.008.
            let s = 0.008;
            let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let n = num_timesteps as f64;
            (0..num_timesteps)
                .map(|t| {
                    let t1 = t as f64 / n;
                    let t2 = (t + 1) as f64 / n;
                    (1.0 - f(t2) / f(t1)).min(beta_max)
                })
                .collect()
        }
    };

    let mut alpha_bar = Vec::with_capacity(num_timesteps);
    let mut prod = 1.0;
    for beta in &betas {
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }

    let mut posterior_var = Vec::with_capacity(num_timesteps);
    for t in 0..num_timesteps {
        if t == 0 {
            posterior_var.push(0.0);
        } else {
            posterior_var.push((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * betas[t]);
        }
    }

    let schedule = NoiseSchedule {
        num_timesteps,
        alpha_bar,
        posterior_var,
    };
    debug_assert!(schedule
        .alpha_bar
        .iter()
        .all(|&a| a > 0.0 && a < 1.0));
    Ok(schedule)
}
