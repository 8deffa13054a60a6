//! Condition tokens and multi-head cross-attention from feature maps to them.
//!
//! Every modality has its own affine projection into `d_model`, producing the
//! token sequence `[identity, parse_1..parse_R, gaze]`. Spatial positions of a
//! feature map are the queries; the attended values are projected back to the
//! feature channels and added residually.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::experts::ConditionBundle;
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Identity,
    Parsing,
    Gaze,
}

/// Which modalities contribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSelection {
    pub identity: bool,
    pub parsing: bool,
    pub gaze: bool,
}

impl TokenSelection {
    pub const ALL: TokenSelection = TokenSelection {
        identity: true,
        parsing: true,
        gaze: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.identity || self.parsing || self.gaze)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    /// Channels of the feature map that supplies queries.
    pub channels: usize,
    pub d_id: usize,
    pub d_parse: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl AttentionShape {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("d_id", self.d_id),
            ("d_parse", self.d_parse),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Registers the block's arrays under `prefix.` with the given builder.
    pub fn register(&self, b: &mut ParamBuilder<'_>, prefix: &str, tokens: TokenSelection) -> Result<()> {
        self.validate()?;
        let dm = self.d_model();
        let name = |s: &str| format!("{}.{}", prefix, s);
        if tokens.identity {
            b.normal(&name("id_w"), &[dm, self.d_id], self.d_id, 1.0)?;
            b.constant(&name("id_b"), &[dm], 0.0)?;
        }
        if tokens.parsing {
            b.normal(&name("parse_w"), &[dm, self.d_parse], self.d_parse, 1.0)?;
            b.constant(&name("parse_b"), &[dm], 0.0)?;
        }
        if tokens.gaze {
            b.normal(&name("gaze_w"), &[dm, 3], 3, 1.0)?;
            b.constant(&name("gaze_b"), &[dm], 0.0)?;
        }
        b.normal(&name("w_q"), &[dm, self.channels], self.channels, 1.0)?;
        b.normal(&name("w_k"), &[dm, dm], dm, 1.0)?;
        b.normal(&name("w_v"), &[dm, dm], dm, 1.0)?;
        b.normal(&name("w_o"), &[self.channels, dm], dm, 0.5)?;
        Ok(())
    }
}

/// Parameters of one standalone attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub shape: AttentionShape,
    pub set: ParamSet,
}

impl AttentionParams {
    pub fn init(shape: AttentionShape, rng: &mut Rng) -> Result<Self> {
        let mut b = ParamBuilder::new(rng);
        shape.register(&mut b, "attn", TokenSelection::ALL)?;
        Ok(Self {
            shape,
            set: b.finish(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.set.get(&format!("attn.{}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.set.get_mut(&format!("attn.{}", name))
    }
}

/// Tape handles of one attention block; projections of disabled modalities
/// may be absent.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub id: Option<(Var, Var)>,
    pub parse: Option<(Var, Var)>,
    pub gaze: Option<(Var, Var)>,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
    pub d_head: usize,
}

impl AttentionVars {
    pub fn from_bound(bound: &Bound, prefix: &str, n_heads: usize, d_head: usize) -> Result<Self> {
        let get = |s: &str| bound.var(&format!("{}.{}", prefix, s));
        let pair = |w: &str, b: &str| get(w).and_then(|w| Ok((w, get(b)?))).ok();
        Ok(Self {
            id: pair("id_w", "id_b"),
            parse: pair("parse_w", "parse_b"),
            gaze: pair("gaze_w", "gaze_b"),
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            n_heads,
            d_head,
        })
    }
}

/// Token sequence for a batch: `tokens` is `[B, N, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub tokens: Tensor,
    pub modality_tags: Vec<Modality>,
}

impl ConditionTokens {
    pub fn len(&self) -> usize {
        self.modality_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality_tags.is_empty()
    }

    /// Reorders tokens (and tags) so that new position `i` holds old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<ConditionTokens> {
        let s = self.tokens.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut seen = alloc::vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || core::mem::replace(&mut seen[i], true)) {
            return Err(Error::contract(format!("{:?} is not a permutation of 0..{}", order, n)));
        }
        let src = self.tokens.data();
        let mut data = Vec::with_capacity(src.len());
        for bi in 0..b {
            for &o in order {
                data.extend_from_slice(&src[(bi * n + o) * d..(bi * n + o + 1) * d]);
            }
        }
        Ok(ConditionTokens {
            tokens: Tensor::new(s, data)?,
            modality_tags: order.iter().map(|&i| self.modality_tags[i]).collect(),
        })
    }
}

/// Condition embeddings on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub e_id: Var,
    pub e_parse: Var,
    pub e_gaze: Var,
}

impl EmbeddingVars {
    pub fn constant(g: &mut Graph, bundle: &ConditionBundle) -> Self {
        Self {
            e_id: g.constant(bundle.e_id.clone()),
            e_parse: g.constant(bundle.e_parse.clone()),
            e_gaze: g.constant(bundle.e_gaze.clone()),
        }
    }
}

fn project(g: &mut Graph, modality: &str, e: Var, (w, b): (Var, Var)) -> Result<Var> {
    let want = g.shape(w)[1];
    let have = *g.shape(e).last().unwrap_or(&0);
    if want != have {
        return Err(Error::config(
            modality,
            format!("embedding width {} but projection expects {}", have, want),
        ));
    }
    g.linear(e, w, Some(b))
}

/// Builds `[B, N, d_model]` tokens in `[identity, parse.., gaze]` order.
pub fn concat_project_on(
    g: &mut Graph,
    vars: &AttentionVars,
    emb: EmbeddingVars,
    select: TokenSelection,
) -> Result<(Var, Vec<Modality>)> {
    if select.is_empty() {
        return Err(Error::config("tokens", "every modality is disabled"));
    }
    let missing = |m: &str| Error::config(m, "projection parameters are missing");
    let b = g.shape(emb.e_id)[0];
    let dm = vars.n_heads * vars.d_head;
    let mut parts = Vec::new();
    let mut tags = Vec::new();
    if select.identity {
        let t = project(g, "identity", emb.e_id, vars.id.ok_or_else(|| missing("identity"))?)?;
        parts.push(g.reshape(t, &[b, 1, dm])?);
        tags.push(Modality::Identity);
    }
    if select.parsing {
        let pw = vars.parse.ok_or_else(|| missing("parsing"))?;
        if g.shape(emb.e_parse).len() != 3 || g.shape(emb.e_parse)[0] != b {
            return Err(Error::config("parsing", format!("tokens of shape {:?}", g.shape(emb.e_parse))));
        }
        let r = g.shape(emb.e_parse)[1];
        parts.push(project(g, "parsing", emb.e_parse, pw)?);
        tags.extend(core::iter::repeat(Modality::Parsing).take(r));
    }
    if select.gaze {
        let t = project(g, "gaze", emb.e_gaze, vars.gaze.ok_or_else(|| missing("gaze"))?)?;
        parts.push(g.reshape(t, &[b, 1, dm])?);
        tags.push(Modality::Gaze);
    }
    let tokens = g.concat(&parts, 1)?;
    if !g.value(tokens).is_finite() {
        return Err(Error::numeric("non-finite condition tokens"));
    }
    Ok((tokens, tags))
}

/// Residual cross-attention. Returns the updated feature map `[B, C, H, W]`
/// and the attention weights `[B * heads, H * W, N]`.
pub fn cross_attention_on(g: &mut Graph, vars: &AttentionVars, f: Var, tokens: Var) -> Result<(Var, Var)> {
    let [b, c, h, w] = g.value(f).dims4()?;
    let ts = g.shape(tokens).to_vec();
    let (heads, dh) = (vars.n_heads, vars.d_head);
    let dm = heads * dh;
    if ts.len() != 3 || ts[0] != b || ts[2] != dm {
        return Err(Error::dim(format!(
            "tokens {:?} do not match batch {} and d_model {}",
            ts, b, dm
        )));
    }
    if g.shape(vars.w_q) != [dm, c] {
        return Err(Error::dim(format!(
            "query projection {:?} does not accept {} channels",
            g.shape(vars.w_q),
            c
        )));
    }
    if !g.value(tokens).is_finite() {
        return Err(Error::numeric("non-finite condition tokens"));
    }
    let n = ts[1];
    let hw = h * w;
    let split = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, len, dh])
    };
    let flat = g.reshape(f, &[b, c, hw])?;
    let flat = g.permute(flat, &[0, 2, 1])?;
    let q = g.linear(flat, vars.w_q, None)?;
    let q = split(g, q, hw)?;
    let k = g.linear(tokens, vars.w_k, None)?;
    let k = split(g, k, n)?;
    let v = g.linear(tokens, vars.w_v, None)?;
    let v = split(g, v, n)?;
    let logits = g.bmm(q, k, true)?;
    let logits = g.scale(logits, 1.0 / libm::sqrt(dh as f64));
    let weights = g.softmax_last(logits)?;
    let out = g.bmm(weights, v, false)?;
    let out = g.reshape(out, &[b, heads, hw, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, hw, dm])?;
    let out = g.linear(out, vars.w_o, None)?;
    let out = g.permute(out, &[0, 2, 1])?;
    let out = g.reshape(out, &[b, c, h, w])?;
    Ok((g.add(f, out)?, weights))
}

/// Tokens for a whole bundle with every modality present.
pub fn concat_project(bundle: &ConditionBundle, params: &AttentionParams) -> Result<ConditionTokens> {
    let mut g = Graph::new();
    let bound = params.set.bind_frozen(&mut g);
    let vars = AttentionVars::from_bound(&bound, "attn", params.shape.n_heads, params.shape.d_head)?;
    let emb = EmbeddingVars::constant(&mut g, bundle);
    let (t, tags) = concat_project_on(&mut g, &vars, emb, TokenSelection::ALL)?;
    Ok(ConditionTokens {
        tokens: g.value(t).clone(),
        modality_tags: tags,
    })
}

/// Residual cross-attention of `f` (`[B, C, H, W]`) over `tokens`.
pub fn cross_attention(f: &Tensor, tokens: &ConditionTokens, params: &AttentionParams) -> Result<Tensor> {
    Ok(cross_attention_with_weights(f, tokens, params)?.0)
}

/// Like [`cross_attention`], also returning the weights `[B, heads, H*W, N]`.
pub fn cross_attention_with_weights(
    f: &Tensor,
    tokens: &ConditionTokens,
    params: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = params.set.bind_frozen(&mut g);
    let vars = AttentionVars::from_bound(&bound, "attn", params.shape.n_heads, params.shape.d_head)?;
    let fv = g.constant(f.clone());
    let tv = g.constant(tokens.tokens.clone());
    let (out, weights) = cross_attention_on(&mut g, &vars, fv, tv)?;
    let wt = g.value(weights);
    let ws = wt.shape();
    let b = f.shape()[0];
    let weights = wt.clone().reshape(&[b, ws[0] / b, ws[1], ws[2]])?;
    Ok((g.value(out).clone(), weights))
}

/// Text dump of one query's attention row per head, for debugging.
pub fn describe_weights(weights: &Tensor, tags: &[Modality], query: usize) -> Result<String> {
    let s = weights.shape();
    if s.len() != 4 || s[3] != tags.len() || query >= s[2] {
        return Err(Error::dim(format!("weights {:?} vs {} tags, query {}", s, tags.len(), query)));
    }
    let mut out = String::new();
    for head in 0..s[1] {
        let row = &weights.data()[(head * s[2] + query) * s[3]..(head * s[2] + query + 1) * s[3]];
        out.push_str(&format!("head {}:", head));
        for (t, w) in tags.iter().zip(row) {
            out.push_str(&format!(" {:?}={:.4}", t, w));
        }
        out.push('\n');
    }
    Ok(out)
}
