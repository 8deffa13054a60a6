//! Training loop: noise draws, conditioning, composite loss and Adam updates.
//!
//! Training is self-reconstruction: the condition bundle and the target image
//! both come from the clean batch `x0`. All randomness of step `k` comes from
//! a generator seeded by one draw of the trainer's stream generator, so a run
//! resumed from a checkpoint replays exactly.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::EmbeddingVars;
use crate::autograd::Graph;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::experts::{ConditionBundle, ExpertConfig, Experts};
use crate::losses::{total_loss_on, x0_estimate_on, LossBreakdown, LossModes, LossWeights};
use crate::optim::{clip_global_norm, warmup_lr, Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::schedule::{forward_diffuse_batch, max_estimable_t, NoiseSchedule, ScheduleConfig};
use crate::tensor::{ImageTensor, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Which image supplies the reference gaze of the gaze loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GazeReference {
    /// The image that supplied the condition bundle.
    #[default]
    Source,
    /// The structure (target) image.
    Target,
}

impl GazeReference {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "source" => Ok(GazeReference::Source),
            "target" => Ok(GazeReference::Target),
            other => Err(Error::config("gaze_reference", format!("`{}` is not source or target", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GazeReference::Source => "source",
            GazeReference::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `None` means 1% of `steps`.
    pub warmup_steps: Option<usize>,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub modes: LossModes,
    pub gaze_reference: GazeReference,
    /// Largest timestep whose clean-image estimate feeds the expert losses;
    /// `None` uses every timestep the schedule can invert.
    pub expert_max_t: Option<usize>,
    /// Probability of replacing an item's target image by zeros.
    pub target_dropout: f64,
    pub grad_clip: f64,
    pub denoiser: DenoiserConfig,
    pub experts: ExpertConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            learning_rate: 1e-4,
            warmup_steps: None,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
            weights: LossWeights::default(),
            modes: LossModes::default(),
            gaze_reference: GazeReference::Source,
            expert_max_t: None,
            target_dropout: 0.0,
            grad_clip: 1.0,
            denoiser: DenoiserConfig::default(),
            experts: ExpertConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small model and short run sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: Some(100),
            expert_max_t: Some(100),
            target_dropout: 0.25,
            denoiser: DenoiserConfig {
                base_channels: 8,
                time_embed_dim: 64,
                d_head: 16,
                res_blocks: 1,
                ..DenoiserConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let warmup = self.effective_warmup();
        if self.steps > 0 && warmup >= self.steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} must be below steps = {}", warmup, self.steps),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be finite and positive"));
        }
        if !(0.0..=1.0).contains(&self.target_dropout) {
            return Err(Error::config("target_dropout", "must lie in [0, 1]"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be finite and positive"));
        }
        self.weights.validate()?;
        self.denoiser.validate()?;
        self.experts.validate()?;
        let sched = self.schedule.build()?;
        if let Some(t) = self.expert_max_t {
            if t > max_estimable_t(&sched) {
                return Err(Error::config(
                    "expert_max_t",
                    format!("{} exceeds the largest invertible timestep {}", t, max_estimable_t(&sched)),
                ));
            }
        }
        Ok(())
    }
}

/// Complete resumable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: Adam,
    pub rng_state: Vec<u8>,
}

/// Per-step record handed to observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Receives progress from [`Trainer::fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _step: usize, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

/// Observer that keeps every step log in memory.
#[derive(Debug, Clone, Default)]
pub struct LossLog {
    pub steps: Vec<StepLog>,
}

impl TrainObserver for LossLog {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.steps.push(*log);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    denoiser: Denoiser,
    experts: Experts,
    schedule: NoiseSchedule,
    params: ParamSet,
    optimizer: Adam,
    rng: Rng,
    step: usize,
    data: Vec<ImageTensor>,
    bundles: Vec<ConditionBundle>,
}

impl Trainer {
    /// Fresh run over `dataset` (each item `[1, 3, S, S]`).
    pub fn new(config: TrainConfig, dataset: &[ImageTensor]) -> Result<Self> {
        config.validate()?;
        let denoiser = Denoiser::new(config.denoiser.clone(), &config.experts)?;
        let params = denoiser.init_params(config.seed)?;
        let optimizer = Adam::new(&params, AdamConfig::default());
        let rng = Rng::derived(config.seed, 0x7_2A1);
        Self::assemble(config, denoiser, params, optimizer, rng, 0, dataset)
    }

    /// Continues the run stored in `ckpt`.
    pub fn resume(ckpt: &Checkpoint, dataset: &[ImageTensor]) -> Result<Self> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::contract(format!(
                "checkpoint format {} but this build reads {}",
                ckpt.format_version, FORMAT_VERSION
            )));
        }
        ckpt.config.validate()?;
        let denoiser = Denoiser::new(ckpt.config.denoiser.clone(), &ckpt.config.experts)?;
        let fresh = denoiser.init_params(ckpt.config.seed)?;
        if fresh.names() != ckpt.params.names()
            || fresh.tensors().iter().zip(ckpt.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::config("params", "checkpoint parameters do not match its configuration"));
        }
        let rng = Rng::from_state_bytes(&ckpt.rng_state)?;
        Self::assemble(
            ckpt.config.clone(),
            denoiser,
            ckpt.params.clone(),
            ckpt.optimizer.clone(),
            rng,
            ckpt.step,
            dataset,
        )
    }

    fn assemble(
        config: TrainConfig,
        denoiser: Denoiser,
        params: ParamSet,
        optimizer: Adam,
        rng: Rng,
        step: usize,
        dataset: &[ImageTensor],
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let s = config.denoiser.image_size;
        for (i, img) in dataset.iter().enumerate() {
            if img.shape() != [1, 3, s, s] {
                return Err(Error::config(
                    "image_size",
                    format!("dataset item {} has shape {:?}, expected [1, 3, {s}, {s}]", i, img.shape()),
                ));
            }
        }
        let experts = Experts::new(config.experts.clone(), s)?;
        let bundles = dataset
            .iter()
            .map(|x| experts.build_condition(x))
            .collect::<Result<Vec<_>>>()?;
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            denoiser,
            experts,
            schedule,
            params,
            optimizer,
            rng,
            step,
            data: dataset.to_vec(),
            bundles,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn experts(&self) -> &Experts {
        &self.experts
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng_state: self.rng.state_bytes(),
        }
    }

    /// Dataset indices of the batch for 0-based step `k`: consecutive slices
    /// of per-epoch shuffles.
    pub fn batch_indices(&self, k: usize) -> Vec<usize> {
        let n = self.data.len();
        let b = self.config.batch_size;
        (k * b..(k + 1) * b)
            .map(|s| {
                let epoch = s / n;
                let mut order: Vec<usize> = (0..n).collect();
                Rng::derived(self.config.seed, 0xE90C_0000 + epoch as u64).shuffle(&mut order);
                order[s % n]
            })
            .collect()
    }

    fn expert_cap(&self) -> usize {
        self.config
            .expert_max_t
            .unwrap_or_else(|| max_estimable_t(&self.schedule))
    }

    /// One update on the next batch of the dataset.
    pub fn step(&mut self) -> Result<StepLog> {
        let idx = self.batch_indices(self.step);
        let batch = Tensor::stack_batch(&idx.iter().map(|&i| self.data[i].clone()).collect::<Vec<_>>())?;
        let bundle = ConditionBundle::concat(&idx.iter().map(|&i| self.bundles[i].clone()).collect::<Vec<_>>())?;
        self.train_step(&batch, &bundle)
    }

    /// One update on an explicit batch whose condition bundle is `bundle`
    /// (built from the same images).
    pub fn train_step(&mut self, batch: &ImageTensor, bundle: &ConditionBundle) -> Result<StepLog> {
        let [b, ..] = batch.dims4()?;
        if bundle.batch() != b {
            return Err(Error::dim(format!("bundle batch {} for image batch {}", bundle.batch(), b)));
        }
        let mut rng = Rng::seed_from(self.rng.next_u64());
        let ts = sample_timesteps(&mut rng, b, self.schedule.len());
        let eps = rng.normal_tensor(batch.shape());
        let x_t = forward_diffuse_batch(batch, &ts, &eps, &self.schedule)?;
        let mut target = batch.clone();
        if self.config.target_dropout > 0.0 {
            let per = batch.len() / b;
            for i in 0..b {
                if rng.uniform() < self.config.target_dropout {
                    target.data_mut()[i * per..(i + 1) * per].fill(0.0);
                }
            }
        }

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x_t);
        let tv = g.constant(target);
        let emb = EmbeddingVars::constant(&mut g, bundle);
        let eps_pred = self.denoiser.forward_on(&mut g, &bound, xv, &ts, tv, emb)?;
        let eps_true = g.constant(eps);

        let cap = self.expert_cap();
        let keep: Vec<usize> = (0..b).filter(|&i| ts[i] <= cap).collect();
        let (x0_hat, reference) = if self.config.weights.is_zero() || keep.is_empty() {
            (None, bundle.clone())
        } else {
            let sub_ts: Vec<usize> = keep.iter().map(|&i| ts[i]).collect();
            let xs = g.select_batch(xv, &keep)?;
            let es = g.select_batch(eps_pred, &keep)?;
            let x0_hat = x0_estimate_on(&mut g, xs, es, &sub_ts, &self.schedule)?;
            let mut reference = ConditionBundle::concat(&keep.iter().map(|&i| bundle.item(i)).collect::<Vec<_>>())?;
            if self.config.gaze_reference == GazeReference::Target {
                let targets = Tensor::stack_batch(&keep.iter().map(|&i| batch.batch_item(i)).collect::<Vec<_>>())?;
                reference.e_gaze = self.experts.encode_gaze(&targets)?;
            }
            (Some(x0_hat), reference)
        };
        let loss = total_loss_on(
            &mut g,
            eps_true,
            eps_pred,
            x0_hat,
            &reference,
            &self.config.weights,
            &self.experts,
            self.config.modes,
        )?;
        let losses = loss.breakdown(&g, &self.config.weights);
        let step = self.step + 1;
        if let Some(term) = losses.first_non_finite() {
            return Err(Error::numeric(format!("non-finite {} at step {}", term, step)));
        }
        let grads = g.backward(loss.l_total);
        let mut grads = bound.gradients(&grads, &self.params);
        clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = warmup_lr(step, self.config.learning_rate, self.config.effective_warmup());
        self.optimizer.step(&mut self.params, &grads, lr)?;
        if !self.params.is_finite() {
            return Err(Error::numeric(format!("non-finite parameters after step {}", step)));
        }
        self.step = step;
        Ok(StepLog { step, lr, losses })
    }

    /// Runs until `config.steps` updates have been applied in total.
    pub fn fit(&mut self, observer: &mut dyn TrainObserver) -> Result<Checkpoint> {
        while self.step < self.config.steps {
            let log = self.step()?;
            observer.on_step(&log)?;
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                observer.on_checkpoint(&self.checkpoint())?;
            }
            if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
                observer.on_eval(self.step, self)?;
            }
        }
        Ok(self.checkpoint())
    }
}

/// Trains a fresh model on `dataset` and returns the final checkpoint.
/// `n` training timesteps drawn uniformly from `1..=t_max`.
pub fn sample_timesteps(rng: &mut Rng, n: usize, t_max: usize) -> Vec<usize> {
    (0..n).map(|_| rng.int_inclusive(1, t_max)).collect()
}

pub fn fit(dataset: &[ImageTensor], config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<Checkpoint> {
    Trainer::new(config.clone(), dataset)?.fit(observer)
}
