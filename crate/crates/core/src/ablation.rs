//! Variant grid over conditioning ablations and attention placements.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::Resolution;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, EvalSet, MetricsReport};
use crate::sampler::{AblationOverrides, SampleRequest, Sampler};
use crate::tensor::ImageTensor;
use crate::trainer::{Checkpoint, LossLog, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoCrossAttention,
    NoIdentity,
    NoExpertLosses,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoCrossAttention,
        Variant::NoIdentity,
        Variant::NoExpertLosses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::NoIdentity => "no_identity",
            Variant::NoExpertLosses => "no_expert_losses",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config("variant", format!("unknown variant `{}`; valid: {}", s, names.join(", ")))
            })
    }

    /// The base configuration with this variant's switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoCrossAttention => cfg.denoiser.disable_cross_attention = true,
            Variant::NoIdentity => cfg.denoiser.disable_identity_token = true,
            Variant::NoExpertLosses => cfg.weights = LossWeights::ZERO,
        }
        cfg
    }
}

/// One grid cell: a variant at a set of attention placements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationSpec {
    pub variant: Variant,
    pub placements: Vec<Resolution>,
}

impl AblationSpec {
    /// `variant@placements`, placements listed low to high, e.g. `full@low+mid+high`.
    pub fn name(&self) -> String {
        let mut p = self.placements.clone();
        p.sort();
        p.reverse();
        let joined: Vec<&str> = p.iter().map(|r| r.name()).collect();
        format!("{}@{}", self.variant.name(), joined.join("+"))
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = self.variant.apply(base);
        cfg.denoiser.attention_placements = self.placements.clone();
        cfg
    }
}

/// The placements compared in the grid: high, mid+high, low+mid+high.
pub fn standard_placements() -> Vec<Vec<Resolution>> {
    alloc::vec![
        alloc::vec![Resolution::High],
        alloc::vec![Resolution::Mid, Resolution::High],
        alloc::vec![Resolution::Low, Resolution::Mid, Resolution::High],
    ]
}

/// Cartesian product of variants and placements.
pub fn grid(variants: &[Variant], placements: &[Vec<Resolution>]) -> Vec<AblationSpec> {
    variants
        .iter()
        .flat_map(|&variant| {
            placements.iter().map(move |p| AblationSpec {
                variant,
                placements: p.clone(),
            })
        })
        .collect()
}

/// Source/target pairs sampled after training.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub sources: Vec<ImageTensor>,
    pub targets: Vec<ImageTensor>,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub spec: AblationSpec,
    pub report: MetricsReport,
    /// Mean identity loss over the final tenth of training steps.
    pub final_l_id: f64,
    pub checkpoint: Checkpoint,
}

impl AblationRow {
    pub fn ssim(&self) -> f64 {
        self.report.get("ssim").unwrap_or(f64::NAN)
    }

    pub fn fid(&self) -> f64 {
        self.report.get("fid").unwrap_or(f64::NAN)
    }

    pub fn id_similarity(&self) -> f64 {
        self.report.get("id_similarity").unwrap_or(f64::NAN)
    }
}

/// Samples every pair of `plan` with `ckpt`; sample `i` uses seed `plan.seed + i`.
pub fn sample_plan(ckpt: &Checkpoint, plan: &EvalPlan, overrides: AblationOverrides) -> Result<Vec<ImageTensor>> {
    if plan.sources.len() != plan.targets.len() || plan.sources.is_empty() {
        return Err(Error::contract("evaluation plan needs matching, non-empty source and target lists"));
    }
    let sampler = Sampler::new(ckpt)?;
    let requests: Vec<SampleRequest> = plan
        .sources
        .iter()
        .zip(&plan.targets)
        .enumerate()
        .map(|(i, (s, t))| SampleRequest {
            source: s.clone(),
            target: t.clone(),
            seed: plan.seed + i as u64,
            steps: plan.steps,
            overrides,
        })
        .collect();
    sampler.sample_batch(&requests)
}

/// Trains and evaluates one grid cell. SSIM and FID compare outputs with the
/// targets; identity similarity compares them with the sources.
pub fn run_variant(
    base: &TrainConfig,
    spec: &AblationSpec,
    dataset: &[ImageTensor],
    plan: &EvalPlan,
    config_digest: &str,
) -> Result<AblationRow> {
    let cfg = spec.config(base);
    let mut log = LossLog::default();
    let ckpt = Trainer::new(cfg, dataset)?.fit(&mut log)?;
    let outputs = sample_plan(&ckpt, plan, AblationOverrides::default())?;
    let sampler = Sampler::new(&ckpt)?;
    let report = evaluate(
        &EvalSet {
            outputs: &outputs,
            references: &plan.targets,
            identity_references: Some(&plan.sources),
        },
        sampler.experts(),
        crate::metrics::DEFAULT_EXTRACTOR,
        config_digest,
    )?;
    let tail = (log.steps.len() / 10).max(1).min(log.steps.len());
    let final_l_id = if log.steps.is_empty() {
        0.0
    } else {
        log.steps[log.steps.len() - tail..]
            .iter()
            .map(|s| s.losses.l_id)
            .sum::<f64>()
            / tail as f64
    };
    Ok(AblationRow {
        name: spec.name(),
        spec: spec.clone(),
        report,
        final_l_id,
        checkpoint: ckpt,
    })
}

/// Runs every spec in order.
pub fn run_grid(
    base: &TrainConfig,
    specs: &[AblationSpec],
    dataset: &[ImageTensor],
    plan: &EvalPlan,
    config_digest: &str,
) -> Result<Vec<AblationRow>> {
    specs
        .iter()
        .map(|s| run_variant(base, s, dataset, plan, config_digest))
        .collect()
}
