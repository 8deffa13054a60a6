//! Flat `key = value` configuration files.
//!
//! Keys mirror the fields of [`TrainConfig`]; nested structures use dotted
//! prefixes (`denoiser.`, `experts.`, `schedule.`). Lines starting with `#`
//! are comments. Unknown keys are rejected.

use std::path::Path;

use caidd_core::denoiser::Resolution;
use caidd_core::losses::{GazeMode, ParseMode};
use caidd_core::trainer::{GazeReference, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every accepted key, in the order [`to_text`] writes them.
pub const KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "eval_every",
    "checkpoint_every",
    "seed",
    "lambda_id",
    "lambda_parse",
    "lambda_gaze",
    "parse_loss_mode",
    "gaze_loss_mode",
    "gaze_reference",
    "expert_max_t",
    "target_dropout",
    "grad_clip",
    "denoiser.image_size",
    "denoiser.base_channels",
    "denoiser.channel_multipliers",
    "denoiser.attention_placements",
    "denoiser.time_embed_dim",
    "denoiser.use_target_concat",
    "denoiser.disable_cross_attention",
    "denoiser.disable_identity_token",
    "denoiser.disable_parse_tokens",
    "denoiser.disable_gaze_token",
    "denoiser.n_heads",
    "denoiser.d_head",
    "denoiser.res_blocks",
    "denoiser.norm_groups",
    "experts.d_id",
    "experts.d_parse",
    "experts.n_regions",
    "experts.surrogate_seed",
    "schedule.timesteps",
    "schedule.offset",
    "schedule.beta_clip",
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    caidd_core::Error::config(key, format!("`{}` is not {}", value, what)).into()
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

/// `none` or an integer.
fn optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value, "an integer or none").map(Some)
    }
}

/// Applies one assignment.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    let int = |what| num::<usize>(key, v, what);
    let real = || num::<f64>(key, v, "a number");
    let d = &mut cfg.denoiser;
    match key.trim() {
        "steps" => cfg.steps = int("a non-negative integer")?,
        "batch_size" => cfg.batch_size = int("a positive integer")?,
        "learning_rate" => cfg.learning_rate = real()?,
        "warmup_steps" => cfg.warmup_steps = optional(key, v)?,
        "eval_every" => cfg.eval_every = int("a non-negative integer")?,
        "checkpoint_every" => cfg.checkpoint_every = int("a non-negative integer")?,
        "seed" => cfg.seed = num(key, v, "an unsigned integer")?,
        "lambda_id" => cfg.weights.lambda_id = real()?,
        "lambda_parse" => cfg.weights.lambda_parse = real()?,
        "lambda_gaze" => cfg.weights.lambda_gaze = real()?,
        "parse_loss_mode" => cfg.modes.parse = ParseMode::parse(v)?,
        "gaze_loss_mode" => cfg.modes.gaze = GazeMode::parse(v)?,
        "gaze_reference" => cfg.gaze_reference = GazeReference::parse(v)?,
        "expert_max_t" => cfg.expert_max_t = optional(key, v)?,
        "target_dropout" => cfg.target_dropout = real()?,
        "grad_clip" => cfg.grad_clip = real()?,
        "denoiser.image_size" => d.image_size = int("a positive integer")?,
        "denoiser.base_channels" => d.base_channels = int("a positive integer")?,
        "denoiser.channel_multipliers" => {
            d.channel_multipliers = v
                .split(',')
                .map(|p| num::<usize>(key, p.trim(), "a comma separated list of integers"))
                .collect::<Result<_>>()?
        }
        "denoiser.attention_placements" => {
            d.attention_placements = if v == "none" { Vec::new() } else { Resolution::parse_list(v)? }
        }
        "denoiser.time_embed_dim" => d.time_embed_dim = int("a positive integer")?,
        "denoiser.use_target_concat" => d.use_target_concat = flag(key, v)?,
        "denoiser.disable_cross_attention" => d.disable_cross_attention = flag(key, v)?,
        "denoiser.disable_identity_token" => d.disable_identity_token = flag(key, v)?,
        "denoiser.disable_parse_tokens" => d.disable_parse_tokens = flag(key, v)?,
        "denoiser.disable_gaze_token" => d.disable_gaze_token = flag(key, v)?,
        "denoiser.n_heads" => d.n_heads = int("a positive integer")?,
        "denoiser.d_head" => d.d_head = int("a positive integer")?,
        "denoiser.res_blocks" => d.res_blocks = int("a positive integer")?,
        "denoiser.norm_groups" => d.norm_groups = int("a positive integer")?,
        "experts.d_id" => cfg.experts.d_id = int("a positive integer")?,
        "experts.d_parse" => cfg.experts.d_parse = int("a positive integer")?,
        "experts.n_regions" => cfg.experts.n_regions = int("a positive integer")?,
        "experts.surrogate_seed" => cfg.experts.surrogate_seed = num(key, v, "an unsigned integer")?,
        "schedule.timesteps" => cfg.schedule.timesteps = int("a positive integer")?,
        "schedule.offset" => cfg.schedule.offset = real()?,
        "schedule.beta_clip" => cfg.schedule.beta_clip = real()?,
        other => {
            return Err(caidd_core::Error::config(other, "unknown configuration key").into());
        }
    }
    Ok(())
}

/// Splits `key=value`.
pub fn split_assignment(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::usage(format!("expected key=value, got `{}`", line)))
}

/// Applies every assignment of a config document to `base`.
pub fn apply_text(base: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut cfg = base;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            caidd_core::Error::config("config", format!("line {}: expected key = value, got `{}`", n + 1, line))
        })?;
        set(&mut cfg, k.trim(), v)?;
    }
    Ok(cfg)
}

/// Parses a document over the built-in defaults and validates the result.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let cfg = apply_text(TrainConfig::default(), text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, then applies `overrides` (`key=value` each) in order.
pub fn load(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = apply_text(TrainConfig::default(), &text)?;
    for o in overrides {
        let (k, v) = split_assignment(o)?;
        set(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Value of `key` in `cfg`, formatted so that [`set`] reads it back exactly.
pub fn get(cfg: &TrainConfig, key: &str) -> Result<String> {
    let d = &cfg.denoiser;
    Ok(match key {
        "steps" => cfg.steps.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "learning_rate" => cfg.learning_rate.to_string(),
        "warmup_steps" => opt(cfg.warmup_steps),
        "eval_every" => cfg.eval_every.to_string(),
        "checkpoint_every" => cfg.checkpoint_every.to_string(),
        "seed" => cfg.seed.to_string(),
        "lambda_id" => cfg.weights.lambda_id.to_string(),
        "lambda_parse" => cfg.weights.lambda_parse.to_string(),
        "lambda_gaze" => cfg.weights.lambda_gaze.to_string(),
        "parse_loss_mode" => cfg.modes.parse.name().to_string(),
        "gaze_loss_mode" => cfg.modes.gaze.name().to_string(),
        "gaze_reference" => cfg.gaze_reference.name().to_string(),
        "expert_max_t" => opt(cfg.expert_max_t),
        "target_dropout" => cfg.target_dropout.to_string(),
        "grad_clip" => cfg.grad_clip.to_string(),
        "denoiser.image_size" => d.image_size.to_string(),
        "denoiser.base_channels" => d.base_channels.to_string(),
        "denoiser.channel_multipliers" => d
            .channel_multipliers
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
        "denoiser.attention_placements" => {
            if d.attention_placements.is_empty() {
                "none".to_string()
            } else {
                Resolution::format_list(&d.attention_placements)
            }
        }
        "denoiser.time_embed_dim" => d.time_embed_dim.to_string(),
        "denoiser.use_target_concat" => d.use_target_concat.to_string(),
        "denoiser.disable_cross_attention" => d.disable_cross_attention.to_string(),
        "denoiser.disable_identity_token" => d.disable_identity_token.to_string(),
        "denoiser.disable_parse_tokens" => d.disable_parse_tokens.to_string(),
        "denoiser.disable_gaze_token" => d.disable_gaze_token.to_string(),
        "denoiser.n_heads" => d.n_heads.to_string(),
        "denoiser.d_head" => d.d_head.to_string(),
        "denoiser.res_blocks" => d.res_blocks.to_string(),
        "denoiser.norm_groups" => d.norm_groups.to_string(),
        "experts.d_id" => cfg.experts.d_id.to_string(),
        "experts.d_parse" => cfg.experts.d_parse.to_string(),
        "experts.n_regions" => cfg.experts.n_regions.to_string(),
        "experts.surrogate_seed" => cfg.experts.surrogate_seed.to_string(),
        "schedule.timesteps" => cfg.schedule.timesteps.to_string(),
        "schedule.offset" => cfg.schedule.offset.to_string(),
        "schedule.beta_clip" => cfg.schedule.beta_clip.to_string(),
        other => return Err(caidd_core::Error::config(other, "unknown configuration key").into()),
    })
}

/// Canonical text form: every key, one per line, in [`KEYS`] order.
pub fn to_text(cfg: &TrainConfig) -> String {
    KEYS.iter()
        .map(|k| format!("{} = {}\n", k, get(cfg, k).expect("every listed key is readable")))
        .collect()
}

/// Hex SHA-256 of the canonical text.
pub fn digest(cfg: &TrainConfig) -> String {
    hex(&Sha256::digest(to_text(cfg).as_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}
