//! U-Net noise predictor with cross-attention at selectable resolutions.
//!
//! Levels run from full resolution ("high") down by factors of two ("mid",
//! "low"). Each level has `res_blocks` residual blocks in the encoder and the
//! decoder, one skip connection, and optionally an attention block on each
//! side. The target image is concatenated to `x_t` on the channel axis.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    concat_project_on, cross_attention_on, AttentionShape, AttentionVars, EmbeddingVars, TokenSelection,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::experts::{ConditionBundle, ExpertConfig};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Resolution {
    High,
    Mid,
    Low,
}

impl Resolution {
    pub const ALL: [Resolution; 3] = [Resolution::High, Resolution::Mid, Resolution::Low];

    pub fn name(self) -> &'static str {
        match self {
            Resolution::High => "high",
            Resolution::Mid => "mid",
            Resolution::Low => "low",
        }
    }

    /// Level index: 0 is full resolution.
    pub fn level(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Resolution> {
        match s.trim() {
            "high" => Ok(Resolution::High),
            "mid" => Ok(Resolution::Mid),
            "low" => Ok(Resolution::Low),
            other => Err(Error::config(
                "attention_placements",
                format!("unknown resolution `{}` (expected low, mid or high)", other),
            )),
        }
    }

    /// Parses a list such as `low,mid,high` or `mid+high`.
    pub fn parse_list(s: &str) -> Result<Vec<Resolution>> {
        let mut out: Vec<Resolution> = Vec::new();
        for part in s.split([',', '+']).filter(|p| !p.trim().is_empty()) {
            let r = Resolution::parse(part)?;
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn format_list(list: &[Resolution]) -> String {
        let mut sorted = list.to_vec();
        sorted.sort();
        sorted.reverse();
        sorted.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// One multiplier per level, high to low.
    pub channel_multipliers: Vec<usize>,
    pub attention_placements: Vec<Resolution>,
    pub time_embed_dim: usize,
    pub use_target_concat: bool,
    pub disable_cross_attention: bool,
    pub disable_identity_token: bool,
    pub disable_parse_tokens: bool,
    pub disable_gaze_token: bool,
    pub n_heads: usize,
    pub d_head: usize,
    pub res_blocks: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            attention_placements: Resolution::ALL.to_vec(),
            time_embed_dim: 256,
            use_target_concat: true,
            disable_cross_attention: false,
            disable_identity_token: false,
            disable_parse_tokens: false,
            disable_gaze_token: false,
            n_heads: 4,
            d_head: 32,
            res_blocks: 2,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn tokens(&self) -> TokenSelection {
        TokenSelection {
            identity: !self.disable_identity_token,
            parsing: !self.disable_parse_tokens,
            gaze: !self.disable_gaze_token,
        }
    }

    /// Whether an attention block sits at `level`.
    pub fn attends_at(&self, level: usize) -> bool {
        !self.disable_cross_attention && self.attention_placements.iter().any(|r| r.level() == level)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if !(1..=3).contains(&levels) {
            return Err(Error::config(
                "channel_multipliers",
                format!("{} levels given, 1 to 3 supported", levels),
            ));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::config("channel_multipliers", "multipliers must be positive"));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("res_blocks", self.res_blocks),
            ("norm_groups", self.norm_groups),
            ("time_embed_dim", self.time_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        let factor = 1 << (levels - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::config(
                "image_size",
                format!("{} is not divisible by {}", self.image_size, factor),
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim", "must be even"));
        }
        for r in &self.attention_placements {
            if r.level() >= levels {
                return Err(Error::config(
                    "attention_placements",
                    format!("`{}` is unavailable with {} levels", r.name(), levels),
                ));
            }
        }
        for level in 0..levels {
            let mut widths = vec![self.channels(level)];
            if level + 1 < levels {
                widths.push(self.channels(level) + self.channels(level + 1));
            }
            widths.push(2 * self.channels(level));
            for c in widths {
                if c % self.norm_groups != 0 {
                    return Err(Error::config(
                        "norm_groups",
                        format!("{} groups do not divide {} channels", self.norm_groups, c),
                    ));
                }
            }
        }
        if !self.disable_cross_attention && !self.attention_placements.is_empty() && self.tokens().is_empty() {
            return Err(Error::config(
                "disable_cross_attention",
                "all token modalities are disabled while cross-attention is on",
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of timestep `t`; entries lie in `[-1, 1]`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config("time_embed_dim", format!("{} must be even and positive", dim)));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg);
        out[half + i] = libm::cos(arg);
    }
    Ok(out)
}

/// The noise predictor for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    d_id: usize,
    d_parse: usize,
}

struct Ctx<'a> {
    bound: &'a Bound,
    temb: Var,
    tokens: Option<Var>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, experts: &ExpertConfig) -> Result<Self> {
        cfg.validate()?;
        experts.validate()?;
        Ok(Self {
            cfg,
            d_id: experts.d_id,
            d_parse: experts.d_parse,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn in_channels(&self) -> usize {
        if self.cfg.use_target_concat {
            6
        } else {
            3
        }
    }

    fn attention_shape(&self, channels: usize) -> AttentionShape {
        AttentionShape {
            channels,
            d_id: self.d_id,
            d_parse: self.d_parse,
            n_heads: self.cfg.n_heads,
            d_head: self.cfg.d_head,
        }
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let cfg = &self.cfg;
        let mut rng = Rng::derived(seed, 0xDE_0015E);
        let mut b = ParamBuilder::new(&mut rng);
        let d = cfg.time_embed_dim;
        let c0 = cfg.channels(0);
        let cin = self.in_channels();
        b.normal("in.w", &[c0, cin, 3, 3], cin * 9, 1.0)?;
        b.constant("in.b", &[c0], 0.0)?;
        b.normal("time.l1.w", &[d, d], d, 1.0)?;
        b.constant("time.l1.b", &[d], 0.0)?;
        b.normal("time.l2.w", &[d, d], d, 1.0)?;
        b.constant("time.l2.b", &[d], 0.0)?;
        let tokens = cfg.tokens();
        let mut ch = c0;
        for level in 0..cfg.levels() {
            let c = cfg.channels(level);
            let name = Resolution::ALL[level].name();
            for j in 0..cfg.res_blocks {
                self.register_block(&mut b, &format!("enc.{}.{}", name, j), ch, c)?;
                ch = c;
            }
            if cfg.attends_at(level) {
                self.attention_shape(c).register(&mut b, &format!("enc.{}.attn", name), tokens)?;
            }
        }
        self.register_block(&mut b, "mid.0", ch, ch)?;
        self.register_block(&mut b, "mid.1", ch, ch)?;
        for level in (0..cfg.levels()).rev() {
            let c = cfg.channels(level);
            let name = Resolution::ALL[level].name();
            for j in 0..cfg.res_blocks {
                let input = if j == 0 { ch + c } else { c };
                self.register_block(&mut b, &format!("dec.{}.{}", name, j), input, c)?;
            }
            ch = c;
            if cfg.attends_at(level) {
                self.attention_shape(c).register(&mut b, &format!("dec.{}.attn", name), tokens)?;
            }
            if level > 0 {
                let up = format!("up.{}", name);
                b.normal(&format!("{}.w", up), &[c, c, 3, 3], c * 9, 1.0)?;
                b.constant(&format!("{}.b", up), &[c], 0.0)?;
                ch = c;
            }
        }
        b.constant("out.norm.g", &[c0], 1.0)?;
        b.constant("out.norm.b", &[c0], 0.0)?;
        b.normal("out.w", &[3, c0, 3, 3], c0 * 9, 0.5)?;
        b.constant("out.b", &[3], 0.0)?;
        Ok(b.finish())
    }

    fn register_block(&self, b: &mut ParamBuilder<'_>, p: &str, cin: usize, cout: usize) -> Result<()> {
        let d = self.cfg.time_embed_dim;
        b.constant(&format!("{}.n1.g", p), &[cin], 1.0)?;
        b.constant(&format!("{}.n1.b", p), &[cin], 0.0)?;
        b.normal(&format!("{}.c1.w", p), &[cout, cin, 3, 3], cin * 9, 1.0)?;
        b.constant(&format!("{}.c1.b", p), &[cout], 0.0)?;
        b.normal(&format!("{}.t.w", p), &[cout, d], d, 1.0)?;
        b.constant(&format!("{}.t.b", p), &[cout], 0.0)?;
        b.constant(&format!("{}.n2.g", p), &[cout], 1.0)?;
        b.constant(&format!("{}.n2.b", p), &[cout], 0.0)?;
        b.normal(&format!("{}.c2.w", p), &[cout, cout, 3, 3], cout * 9, 0.5)?;
        b.constant(&format!("{}.c2.b", p), &[cout], 0.0)?;
        if cin != cout {
            b.normal(&format!("{}.skip.w", p), &[cout, cin, 1, 1], cin, 1.0)?;
            b.constant(&format!("{}.skip.b", p), &[cout], 0.0)?;
        }
        Ok(())
    }

    fn p(ctx: &Ctx<'_>, prefix: &str, name: &str) -> Result<Var> {
        ctx.bound.var(&format!("{}.{}", prefix, name))
    }

    fn check(g: &Graph, v: Var, layer: &str) -> Result<()> {
        if g.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite activations after `{}`", layer)))
        }
    }

    fn res_block(&self, g: &mut Graph, ctx: &Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
        let groups = self.cfg.norm_groups;
        let b = g.shape(x)[0];
        let h = g.group_norm(x, groups, Some(Self::p(ctx, prefix, "n1.g")?), Some(Self::p(ctx, prefix, "n1.b")?))?;
        let h = g.silu(h);
        let h = g.conv2d(h, Self::p(ctx, prefix, "c1.w")?, Some(Self::p(ctx, prefix, "c1.b")?), 1, 1)?;
        let te = g.silu(ctx.temb);
        let te = g.linear(te, Self::p(ctx, prefix, "t.w")?, Some(Self::p(ctx, prefix, "t.b")?))?;
        let cout = g.shape(te)[1];
        let te = g.reshape(te, &[b, cout, 1, 1])?;
        let h = g.add(h, te)?;
        let h = g.group_norm(h, groups, Some(Self::p(ctx, prefix, "n2.g")?), Some(Self::p(ctx, prefix, "n2.b")?))?;
        let h = g.silu(h);
        let h = g.conv2d(h, Self::p(ctx, prefix, "c2.w")?, Some(Self::p(ctx, prefix, "c2.b")?), 1, 1)?;
        let skip = match ctx.bound.var(&format!("{}.skip.w", prefix)) {
            Ok(w) => g.conv2d(x, w, Some(Self::p(ctx, prefix, "skip.b")?), 1, 0)?,
            Err(_) => x,
        };
        let out = g.add(skip, h)?;
        Self::check(g, out, prefix)?;
        Ok(out)
    }

    fn attend(&self, g: &mut Graph, ctx: &Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
        let Some(tokens) = ctx.tokens else { return Ok(x) };
        let vars = AttentionVars::from_bound(ctx.bound, prefix, self.cfg.n_heads, self.cfg.d_head)?;
        let (out, _) = cross_attention_on(g, &vars, x, tokens)?;
        Self::check(g, out, prefix)?;
        Ok(out)
    }

    /// Projected time embedding `[B, time_embed_dim]` for timesteps `ts`.
    pub fn time_embedding_on(&self, g: &mut Graph, bound: &Bound, ts: &[usize]) -> Result<Var> {
        let d = self.cfg.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            if t == 0 {
                return Err(Error::Index { index: 0, max: usize::MAX });
            }
            data.extend(sinusoidal_embedding(t, d)?);
        }
        let s = g.constant(Tensor::new(&[ts.len(), d], data)?);
        let h = g.linear(s, bound.var("time.l1.w")?, Some(bound.var("time.l1.b")?))?;
        let h = g.silu(h);
        g.linear(h, bound.var("time.l2.w")?, Some(bound.var("time.l2.b")?))
    }

    /// Noise prediction on a tape. `x_t` and `target` are `[B, 3, S, S]`,
    /// `ts` holds one timestep per batch item.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x_t: Var,
        ts: &[usize],
        target: Var,
        emb: EmbeddingVars,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let [b, c, h, w] = g.value(x_t).dims4()?;
        if c != 3 || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::dim(format!(
                "denoiser expects [B, 3, {s}, {s}], got {:?}",
                g.shape(x_t),
                s = cfg.image_size
            )));
        }
        if g.shape(target) != g.shape(x_t) {
            return Err(Error::dim(format!(
                "target {:?} differs from x_t {:?}",
                g.shape(target),
                g.shape(x_t)
            )));
        }
        if ts.len() != b {
            return Err(Error::dim(format!("{} timesteps for batch {}", ts.len(), b)));
        }
        if g.shape(emb.e_id)[0] != b {
            return Err(Error::dim(format!(
                "bundle batch {} for image batch {}",
                g.shape(emb.e_id)[0],
                b
            )));
        }
        let temb = self.time_embedding_on(g, bound, ts)?;
        let mut ctx = Ctx {
            bound,
            temb,
            tokens: None,
        };

        let input = if cfg.use_target_concat {
            g.concat(&[x_t, target], 1)?
        } else {
            x_t
        };
        let mut x = g.conv2d(input, bound.var("in.w")?, Some(bound.var("in.b")?), 1, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for level in 0..cfg.levels() {
            let name = Resolution::ALL[level].name();
            for j in 0..cfg.res_blocks {
                x = self.res_block(g, &ctx, &format!("enc.{}.{}", name, j), x)?;
            }
            if cfg.attends_at(level) {
                let prefix = format!("enc.{}.attn", name);
                ctx.tokens = Some(self.tokens_for(g, bound, &prefix, emb)?);
                x = self.attend(g, &ctx, &prefix, x)?;
            }
            skips.push(x);
            if level + 1 < cfg.levels() {
                x = g.avg_pool(x, 2)?;
            }
        }
        x = self.res_block(g, &ctx, "mid.0", x)?;
        x = self.res_block(g, &ctx, "mid.1", x)?;
        for level in (0..cfg.levels()).rev() {
            let name = Resolution::ALL[level].name();
            let skip = skips.pop().ok_or_else(|| Error::contract("skip stack underflow"))?;
            x = g.concat(&[x, skip], 1)?;
            for j in 0..cfg.res_blocks {
                x = self.res_block(g, &ctx, &format!("dec.{}.{}", name, j), x)?;
            }
            if cfg.attends_at(level) {
                let prefix = format!("dec.{}.attn", name);
                ctx.tokens = Some(self.tokens_for(g, bound, &prefix, emb)?);
                x = self.attend(g, &ctx, &prefix, x)?;
            }
            if level > 0 {
                x = g.upsample2x(x)?;
                let up = format!("up.{}", name);
                x = g.conv2d(x, bound.var(&format!("{}.w", up))?, Some(bound.var(&format!("{}.b", up))?), 1, 1)?;
            }
        }
        let x = g.group_norm(
            x,
            cfg.norm_groups,
            Some(bound.var("out.norm.g")?),
            Some(bound.var("out.norm.b")?),
        )?;
        let x = g.silu(x);
        let out = g.conv2d(x, bound.var("out.w")?, Some(bound.var("out.b")?), 1, 1)?;
        Self::check(g, out, "out")?;
        Ok(out)
    }

    fn tokens_for(&self, g: &mut Graph, bound: &Bound, prefix: &str, emb: EmbeddingVars) -> Result<Var> {
        let vars = AttentionVars::from_bound(bound, prefix, self.cfg.n_heads, self.cfg.d_head)?;
        Ok(concat_project_on(g, &vars, emb, self.cfg.tokens())?.0)
    }

    /// Predicted noise for a batch; parameters are not differentiated.
    pub fn predict(
        &self,
        params: &ParamSet,
        x_t: &ImageTensor,
        ts: &[usize],
        target: &ImageTensor,
        bundle: &ConditionBundle,
    ) -> Result<ImageTensor> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let tg = g.constant(target.clone());
        let emb = EmbeddingVars::constant(&mut g, bundle);
        let out = self.forward_on(&mut g, &bound, x, ts, tg, emb)?;
        Ok(g.value(out).clone())
    }

    /// Projected time embedding of a single timestep.
    pub fn time_embedding(&self, params: &ParamSet, t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let v = self.time_embedding_on(&mut g, &bound, &[t])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Names of parameters belonging to attention blocks.
    pub fn attention_param_names(&self, params: &ParamSet) -> Vec<String> {
        params
            .names()
            .iter()
            .filter(|n| n.contains(".attn."))
            .map(|n| n.to_string())
            .collect()
    }
}
