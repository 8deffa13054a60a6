//! Conditional ancestral sampling from pure noise.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::experts::Experts;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::schedule::{posterior_step_clipped, strided_timesteps, NoiseSchedule};
use crate::tensor::{ImageTensor, Tensor};
use crate::trainer::Checkpoint;

/// Ablation switches that may be flipped at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationOverrides {
    pub disable_cross_attention: Option<bool>,
    pub disable_identity_token: Option<bool>,
    pub disable_parse_tokens: Option<bool>,
    pub disable_gaze_token: Option<bool>,
}

impl AblationOverrides {
    pub fn apply(&self, cfg: &DenoiserConfig) -> DenoiserConfig {
        let mut out = cfg.clone();
        let set = |dst: &mut bool, v: Option<bool>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut out.disable_cross_attention, self.disable_cross_attention);
        set(&mut out.disable_identity_token, self.disable_identity_token);
        set(&mut out.disable_parse_tokens, self.disable_parse_tokens);
        set(&mut out.disable_gaze_token, self.disable_gaze_token);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    /// Supplies identity, parsing and gaze; `[1, 3, S, S]`.
    pub source: ImageTensor,
    /// Supplies structure; `[1, 3, S, S]`.
    pub target: ImageTensor,
    pub seed: u64,
    /// Number of reverse steps, at most the schedule length.
    pub steps: usize,
    pub overrides: AblationOverrides,
}

/// Read-only sampling context built from a checkpoint.
#[derive(Debug, Clone)]
pub struct Sampler {
    base: DenoiserConfig,
    experts_cfg: crate::experts::ExpertConfig,
    experts: Experts,
    schedule: NoiseSchedule,
    params: ParamSet,
}

impl Sampler {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        Ok(Self {
            base: cfg.denoiser.clone(),
            experts_cfg: cfg.experts.clone(),
            experts: Experts::new(cfg.experts.clone(), cfg.denoiser.image_size)?,
            schedule: cfg.schedule.build()?,
            params: ckpt.params.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn experts(&self) -> &Experts {
        &self.experts
    }

    pub fn sample(&self, req: &SampleRequest) -> Result<ImageTensor> {
        let s = self.base.image_size;
        for (name, img) in [("source", &req.source), ("target", &req.target)] {
            if img.shape() != [1, 3, s, s] {
                return Err(Error::config(
                    "image_size",
                    format!("{} has shape {:?}, the checkpoint expects [1, 3, {s}, {s}]", name, img.shape()),
                ));
            }
        }
        let total = self.schedule.len();
        if req.steps == 0 || req.steps > total {
            return Err(Error::contract(format!("steps {} must be in 1..={}", req.steps, total)));
        }
        let denoiser = Denoiser::new(req.overrides.apply(&self.base), &self.experts_cfg)?;
        let bundle = self.experts.build_condition(&req.source)?;
        let ts = strided_timesteps(total, req.steps)?;
        let mut rng = Rng::seed_from(req.seed);
        let mut x = rng.normal_tensor(&[1, 3, s, s]);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let eps = denoiser.predict(&self.params, &x, &[t], &req.target, &bundle)?;
            let z = if t_prev > 0 {
                Some(rng.normal_tensor(x.shape()))
            } else {
                None
            };
            x = posterior_step_clipped(&x, &eps, t, t_prev, &self.schedule, z.as_ref())?;
            if !x.is_finite() {
                return Err(Error::numeric(format!("non-finite sample at t = {}", t)));
            }
        }
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Independent samples, in request order.
    pub fn sample_batch(&self, requests: &[SampleRequest]) -> Result<Vec<ImageTensor>> {
        requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.sample(r).map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("request {}: {}", i, m)),
                    Error::Contract(m) => Error::contract(format!("request {}: {}", i, m)),
                    Error::Dimension(m) => Error::dim(format!("request {}: {}", i, m)),
                    Error::Config { field, reason } => {
                        Error::config(&field, format!("request {}: {}", i, reason))
                    }
                    other => other,
                })
            })
            .collect()
    }
}

/// Samples one image; see [`Sampler::sample`].
pub fn sample(req: &SampleRequest, ckpt: &Checkpoint) -> Result<ImageTensor> {
    Sampler::new(ckpt)?.sample(req)
}

/// Samples each request independently.
pub fn sample_batch(requests: &[SampleRequest], ckpt: &Checkpoint) -> Result<Vec<ImageTensor>> {
    Sampler::new(ckpt)?.sample_batch(requests)
}

/// A blank structure image, usable as a target when none should be given.
pub fn blank_target(size: usize) -> ImageTensor {
    Tensor::zeros(&[1, 3, size, size])
}
