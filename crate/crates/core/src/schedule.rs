//! The diffusion clock: cosine noise schedule, forward corruption, the
//! ancestral reverse step, and the one-step clean-image estimate.
//!
//! Timesteps are 1-based everywhere in the public API (`1..=T`).

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// `x0_estimate` refuses timesteps whose signal fraction is below this.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

/// Construction parameters; a checkpoint stores exactly these three values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub offset: f64,
    pub beta_clip: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            offset: 0.008,
            beta_clip: 0.999,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_cosine_schedule(self.timesteps, self.offset, self.beta_clip)
    }
}

/// Per-timestep `beta`, `alpha = 1 - beta` and the running product `alpha_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Index {
                index: t,
                max: self.len(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.alpha_bar(t - 1)
    }

    /// Small posterior variance for a reverse step from `t` to `t_prev < t`.
    pub fn posterior_variance(&self, t: usize, t_prev: usize) -> f64 {
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let beta = 1.0 - ab / ab_prev;
        beta * (1.0 - ab_prev) / (1.0 - ab)
    }
}

/// Squared-cosine signal curve, unnormalized.
fn cosine_curve(t: f64, total: f64, s: f64) -> f64 {
    let c = libm::cos((t / total + s) / (1.0 + s) * FRAC_PI_2);
    c * c
}

/// Builds the cosine schedule `alpha_bar(t) = f(t) / f(0)`,
/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, with per-step betas clipped
/// at `beta_clip`.
pub fn make_cosine_schedule(timesteps: usize, s: f64, beta_clip: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::config("timesteps", "must be at least 1"));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::config("offset", format!("{} not in (0, 1)", s)));
    }
    if !(beta_clip > 0.0 && beta_clip < 1.0) {
        return Err(Error::config("beta_clip", format!("{} not in (0, 1)", beta_clip)));
    }
    let total = timesteps as f64;
    let f0 = cosine_curve(0.0, total, s);
    let mut beta = Vec::with_capacity(timesteps);
    let mut alpha = Vec::with_capacity(timesteps);
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prev_curve = 1.0;
    let mut running = 1.0;
    for t in 1..=timesteps {
        let curve = cosine_curve(t as f64, total, s) / f0;
        let b = (1.0 - curve / prev_curve).min(beta_clip);
        prev_curve = curve;
        let a = 1.0 - b;
        running *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(running);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            timesteps,
            offset: s,
            beta_clip,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

/// `sqrt(alpha_bar(t)) * x0 + sqrt(1 - alpha_bar(t)) * eps`.
pub fn forward_diffuse(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Forward corruption with one timestep per batch item.
pub fn forward_diffuse_batch(
    x0: &ImageTensor,
    ts: &[usize],
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    x0.expect_same_shape(eps)?;
    let [b, ..] = x0.dims4()?;
    if ts.len() != b {
        return Err(Error::dim(format!("{} timesteps for batch {}", ts.len(), b)));
    }
    let per = x0.len() / b;
    let mut out = Tensor::zeros(x0.shape());
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        let (a, s) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let range = i * per..(i + 1) * per;
        for ((o, x), e) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&x0.data()[range.clone()])
            .zip(&eps.data()[range])
        {
            *o = a * x + s * e;
        }
    }
    Ok(out)
}

/// One ancestral step `x_t -> x_{t-1}`.
///
/// `z` must be present for `t > 1` and absent at `t = 1`, where the noise
/// term is dropped.
pub fn posterior_step(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    sched.check(t)?;
    match (t, z) {
        (1, Some(_)) => return Err(Error::contract("noise supplied at t = 1")),
        (t, None) if t > 1 => return Err(Error::contract(format!("noise missing at t = {}", t))),
        _ => {}
    }
    posterior_step_between(x_t, eps_pred, t, t - 1, sched, z)
}

/// Reverse step from `t` to an arbitrary earlier `t_prev`, using the
/// effective `alpha = alpha_bar(t) / alpha_bar(t_prev)`. With `t_prev = t - 1`
/// this is exactly [`posterior_step`]. `z` is ignored when `t_prev == 0`.
pub fn posterior_step_between(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    z: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::contract(format!("t_prev {} must precede t {}", t_prev, t)));
    }
    x_t.expect_same_shape(eps_pred)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let inv_sqrt_alpha = 1.0 / libm::sqrt(alpha);
    let eps_coef = beta / libm::sqrt(1.0 - ab);
    let mut out = x_t.zip_map(eps_pred, |x, e| inv_sqrt_alpha * (x - eps_coef * e))?;
    if t_prev > 0 {
        if let Some(z) = z {
            out.expect_same_shape(z)?;
            let sigma = libm::sqrt(sched.posterior_variance(t, t_prev));
            out.data_mut()
                .iter_mut()
                .zip(z.data())
                .for_each(|(o, zv)| *o += sigma * zv);
        }
    }
    Ok(out)
}

/// Reverse step from `t` to `t_prev` through the clamped clean-image estimate:
/// the posterior mean `c0 * clamp(x0_hat) + ct * x_t` with
/// `c0 = sqrt(alpha_bar_prev) * beta / (1 - alpha_bar)` and
/// `ct = sqrt(alpha) * (1 - alpha_bar_prev) / (1 - alpha_bar)`.
///
/// Without the clamp this equals [`posterior_step_between`]. Near `t = T`,
/// where `alpha_bar` is tiny, the clamp keeps noise-prediction errors from
/// being amplified by `1 / sqrt(alpha)`.
pub fn posterior_step_clipped(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    z: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::contract(format!("t_prev {} must precede t {}", t_prev, t)));
    }
    x_t.expect_same_shape(eps_pred)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let c0 = libm::sqrt(ab_prev) * beta / (1.0 - ab);
    let ct = libm::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    let mut out = x_t.zip_map(eps_pred, |x, e| {
        let x0 = ((x - sb * e) / sa).clamp(-1.0, 1.0);
        c0 * x0 + ct * x
    })?;
    if t_prev > 0 {
        if let Some(z) = z {
            out.expect_same_shape(z)?;
            let sigma = libm::sqrt(sched.posterior_variance(t, t_prev));
            out.data_mut()
                .iter_mut()
                .zip(z.data())
                .for_each(|(o, zv)| *o += sigma * zv);
        }
    }
    Ok(out)
}

/// Unclamped `(x_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar)`.
pub fn x0_estimate_raw(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    let (a, b) = x0_coefficients(t, sched)?;
    x_t.zip_map(eps_pred, |x, e| (x - b * e) * a)
}

/// The one-step clean-image estimate, clamped to `[-1, 1]`.
pub fn x0_estimate(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    Ok(x0_estimate_raw(x_t, eps_pred, t, sched)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// `(1 / sqrt(alpha_bar), sqrt(1 - alpha_bar))` for the clean-image estimate.
pub fn x0_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    if ab < MIN_ALPHA_BAR {
        return Err(Error::numeric(format!(
            "alpha_bar({}) = {:.3e} is below {:.0e}; cap the timesteps used for expert losses",
            t, ab, MIN_ALPHA_BAR
        )));
    }
    Ok((1.0 / libm::sqrt(ab), libm::sqrt(1.0 - ab)))
}

/// Largest timestep whose clean-image estimate is numerically allowed.
pub fn max_estimable_t(sched: &NoiseSchedule) -> usize {
    (1..=sched.len())
        .rev()
        .find(|&t| sched.alpha_bar(t) >= MIN_ALPHA_BAR)
        .unwrap_or(0)
}

/// `steps` timesteps evenly spread over `1..=T`, descending, always ending at 1.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::contract(format!(
            "sampling steps {} must be in 1..={}",
            steps, total
        )));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            // spread i = 0..steps-1 over 1..=total
            1 + (i * (total - 1)) / (steps - 1).max(1)
        })
        .collect();
    if steps == 1 {
        ts[0] = total;
    }
    ts.dedup();
    ts.reverse();
    Ok(ts)
}
