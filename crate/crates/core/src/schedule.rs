//! Noise schedules, the closed-form forward process, reverse-step samplers and
//! classifier-free guidance (scalar and spatially varying).

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::mask::TernaryIntentMask;
use crate::tensor::Tensor;

/// Linear-beta schedule parameters, persisted alongside trained weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.train_steps, self.beta_start, self.beta_end)
    }
}

/// Per-step variance increments and their cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly interpolated betas from `beta_start` to `beta_end` over `steps`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(param_err("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(param_err(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(param_err("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(param_err(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            Err(param_err(format!("step {t} outside schedule of {} steps", self.len())))
        } else {
            Ok(())
        }
    }

    /// A coarser schedule visiting only `timesteps` (ascending), with betas
    /// chosen so its cumulative products match the originals at those steps.
    pub fn respaced(&self, timesteps: &[usize]) -> Result<Self> {
        if timesteps.is_empty() || timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(param_err("respacing needs strictly ascending timesteps"));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_step(t)?;
            let ab = self.alpha_bars[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_betas(betas)
    }
}

/// Descending sampling timesteps, evenly spread from `T-1` down to 0.
pub fn sampling_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(param_err(format!(
            "sampling steps must be in 1..={train_steps}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![train_steps - 1]);
    }
    let last = (train_steps - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|i| (i as f64 * last / (steps - 1) as f64).round() as usize)
        .collect())
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("float cast")
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`, element-wise.
pub fn forward_noise<T: Float>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    forward_noise_at(z0, eps, sched.alpha_bar(t))
}

pub(crate) fn forward_noise_at<T: Float>(z0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let a: T = cast(alpha_bar.sqrt());
    let b: T = cast((1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Scalar guidance: `(1 + w) * eps_pos - w * eps_neg`.
pub fn cfg_scalar<T: Float>(eps_pos: &Tensor<T>, eps_neg: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let wt: T = cast(w);
    let one = T::one();
    eps_pos.zip_map(eps_neg, |p, n| (one + wt) * p - wt * n)
}

/// Spatially varying guidance: per pixel `w*M*eps_c + (1 - w*M) * eps_r`, with
/// the intent value shared by every channel of that pixel.
pub fn cfg_spatial<T: Float>(
    eps_c: &Tensor<T>,
    eps_r: &Tensor<T>,
    intent: &TernaryIntentMask,
    w: f64,
) -> Result<Tensor<T>> {
    eps_c.check_same(eps_r, "guidance operands")?;
    if (eps_c.height(), eps_c.width()) != (intent.height(), intent.width()) {
        return Err(shape_err(format!(
            "predictions are {}x{} but intent mask is {}x{}",
            eps_c.height(),
            eps_c.width(),
            intent.height(),
            intent.width()
        )));
    }
    let plane = eps_c.plane();
    // weight per intent value, indexed by value + 1
    let weights: [T; 3] = [cast(-w), T::zero(), cast(w)];
    let mut out = eps_r.clone();
    let values = intent.values();
    for (chunk_out, chunk_c) in out.data_mut().chunks_mut(plane).zip(eps_c.data().chunks(plane)) {
        for ((o, &c), &m) in chunk_out.iter_mut().zip(chunk_c).zip(values) {
            let wm = weights[(m + 1) as usize];
            *o = wm * c + (T::one() - wm) * *o;
        }
    }
    Ok(out)
}

/// Ancestral step from `t` to `t-1` using the posterior mean and variance
/// `beta_t`; the noise term is dropped at `t = 0`.
pub fn ddpm_step<T: Float>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    z_t.check_same(eps, "ddpm step operands")?;
    z_t.check_same(noise, "ddpm step noise")?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha: T = cast(1.0 / (1.0 - beta).sqrt());
    let eps_coef: T = cast(beta / (1.0 - sched.alpha_bar(t)).sqrt());
    let sigma: T = if t == 0 { T::zero() } else { cast(beta.sqrt()) };
    let mut out = z_t.clone();
    for ((o, &e), &n) in out.data_mut().iter_mut().zip(eps.data()).zip(noise.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e);
        if t > 0 {
            *o = *o + sigma * n;
        }
    }
    Ok(out)
}

/// Deterministic step from `t` to `t_prev` (`None` means the clean image).
pub fn ddim_step<T: Float>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let prev_bar = match t_prev {
        Some(p) if p >= t => {
            return Err(param_err(format!(
                "ddim step must move backwards in time, got {t} -> {p}"
            )))
        }
        Some(p) => sched.alpha_bar(p),
        None => 1.0,
    };
    ddim_update(z_t, eps, sched.alpha_bar(t), prev_bar)
}

/// The DDIM update between two arbitrary signal levels.
pub fn ddim_update<T: Float>(z_t: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Tensor<T>> {
    z_t.check_same(eps, "ddim step operands")?;
    let sa: T = cast(alpha_bar.sqrt());
    let sb: T = cast((1.0 - alpha_bar).sqrt());
    let sa_prev: T = cast(alpha_bar_prev.sqrt());
    let sb_prev: T = cast((1.0 - alpha_bar_prev).sqrt());
    z_t.zip_map(eps, |z, e| {
        let x0 = (z - sb * e) / sa;
        sa_prev * x0 + sb_prev * e
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    #[default]
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(param_err(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
    pub sampler: Sampler,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 2.0,
            sampler: Sampler::Ddim,
            steps: 50,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(param_err(format!("guidance weight must be finite and >= 0, got {}", self.w)));
        }
        if self.steps == 0 || self.steps > train_steps {
            return Err(param_err(format!(
                "sampling steps must be in 1..={train_steps}, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}
