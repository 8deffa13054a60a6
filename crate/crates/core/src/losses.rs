//! Noise-prediction loss plus identity, parsing and gaze refinement terms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::experts::{ConditionBundle, Experts};
use crate::schedule::{x0_coefficients, NoiseSchedule};
use crate::tensor::{ImageTensor, Tensor};

/// Smoothing in the Dice denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Allowed deviation of a gaze vector's norm from 1.
pub const GAZE_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_parse: f64,
    pub lambda_gaze: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_parse: 0.5,
            lambda_gaze: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_id: 0.0,
        lambda_parse: 0.0,
        lambda_gaze: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_parse", self.lambda_parse),
            ("lambda_gaze", self.lambda_gaze),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("{} must be finite and non-negative", v)));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_id == 0.0 && self.lambda_parse == 0.0 && self.lambda_gaze == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Dice,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GazeMode {
    #[default]
    Angular,
    L2,
}

impl ParseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "dice" => Ok(ParseMode::Dice),
            "l1" => Ok(ParseMode::L1),
            other => Err(Error::config("parse_loss_mode", format!("`{}` is not dice or l1", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParseMode::Dice => "dice",
            ParseMode::L1 => "l1",
        }
    }
}

impl GazeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "angular" => Ok(GazeMode::Angular),
            "l2" => Ok(GazeMode::L2),
            other => Err(Error::config("gaze_loss_mode", format!("`{}` is not angular or l2", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GazeMode::Angular => "angular",
            GazeMode::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossModes {
    pub parse: ParseMode,
    pub gaze: GazeMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_id: f64,
    pub l_parse: f64,
    pub l_gaze: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the weighted sum of the terms.
    pub fn compose(l_diff: f64, l_id: f64, l_parse: f64, l_gaze: f64, w: &LossWeights) -> Self {
        Self {
            l_diff,
            l_id,
            l_parse,
            l_gaze,
            l_total: l_diff + w.lambda_id * l_id + w.lambda_parse * l_parse + w.lambda_gaze * l_gaze,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_diff", self.l_diff),
            ("l_id", self.l_id),
            ("l_parse", self.l_parse),
            ("l_gaze", self.l_gaze),
            ("l_total", self.l_total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Mean squared error.
pub fn diffusion_loss(eps_true: &ImageTensor, eps_pred: &ImageTensor) -> Result<f64> {
    eps_true.expect_same_shape(eps_pred)?;
    let n = eps_true.len().max(1) as f64;
    Ok(eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// `1 - cos(e_gen, e_src)`.
pub fn identity_loss(e_gen: &[f64], e_src: &[f64]) -> Result<f64> {
    if e_gen.len() != e_src.len() {
        return Err(Error::dim(format!("identity vectors of {} and {}", e_gen.len(), e_src.len())));
    }
    let (na, nb) = (norm(e_gen), norm(e_src));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(alloc::string::String::from("zero identity vector")));
    }
    let dot: f64 = e_gen.iter().zip(e_src).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Region-mask loss over `[R, H, W]` (or `[B, R, H, W]`, averaged over items).
pub fn parse_loss(masks_gen: &Tensor, masks_ref: &Tensor, mode: ParseMode) -> Result<f64> {
    masks_gen.expect_same_shape(masks_ref)?;
    let s = masks_gen.shape();
    if s.len() < 3 {
        return Err(Error::dim(format!("region masks of shape {:?}", s)));
    }
    let plane = s[s.len() - 1] * s[s.len() - 2];
    let (a, b) = (masks_gen.data(), masks_ref.data());
    match mode {
        ParseMode::L1 => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64),
        ParseMode::Dice => {
            let regions = a.len() / plane;
            let mut total = 0.0;
            for r in 0..regions {
                let (pa, pb) = (&a[r * plane..(r + 1) * plane], &b[r * plane..(r + 1) * plane]);
                let inter: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
                let sum: f64 = pa.iter().sum::<f64>() + pb.iter().sum::<f64>();
                total += 1.0 - 2.0 * inter / (sum + DICE_EPS);
            }
            Ok(total / regions as f64)
        }
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > GAZE_NORM_TOL {
        return Err(Error::contract(format!("{} has norm {}, expected a unit vector", what, n)));
    }
    Ok(())
}

/// Angle in radians or Euclidean distance between unit gaze vectors.
pub fn gaze_loss(g_gen: &[f64], g_ref: &[f64], mode: GazeMode) -> Result<f64> {
    if g_gen.len() != 3 || g_ref.len() != 3 {
        return Err(Error::dim("gaze vectors must have 3 components"));
    }
    check_unit(g_gen, "generated gaze")?;
    check_unit(g_ref, "reference gaze")?;
    match mode {
        GazeMode::Angular => {
            let dot: f64 = g_gen.iter().zip(g_ref).map(|(a, b)| a * b).sum();
            Ok(libm::acos(dot.clamp(-1.0, 1.0)))
        }
        GazeMode::L2 => Ok(libm::sqrt(g_gen.iter().zip(g_ref).map(|(a, b)| (a - b) * (a - b)).sum())),
    }
}

/// Scalar mean over all entries.
pub fn diffusion_loss_on(g: &mut Graph, eps_true: Var, eps_pred: Var) -> Result<Var> {
    let d = g.sub(eps_pred, eps_true)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Batch mean of `1 - cos` over rows of `[B, D]`.
pub fn identity_loss_on(g: &mut Graph, e_gen: Var, e_src: Var) -> Result<Var> {
    for v in [e_gen, e_src] {
        let d = g.shape(v)[1];
        if g.value(v).data().chunks(d).any(|row| norm(row) == 0.0) {
            return Err(Error::Degenerate(alloc::string::String::from("zero identity vector")));
        }
    }
    let row_norm = |g: &mut Graph, v: Var| -> Result<Var> {
        let sq = g.square(v);
        let ss = g.sum_axis(sq, 1)?;
        Ok(g.sqrt(ss))
    };
    let prod = g.mul(e_gen, e_src)?;
    let dot = g.sum_axis(prod, 1)?;
    let na = row_norm(g, e_gen)?;
    let nb = row_norm(g, e_src)?;
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mask loss averaged over batch items and regions of `[B, R, H, W]`.
pub fn parse_loss_on(g: &mut Graph, m_gen: Var, m_ref: Var, mode: ParseMode) -> Result<Var> {
    if g.shape(m_gen) != g.shape(m_ref) {
        return Err(Error::dim(format!("masks {:?} vs {:?}", g.shape(m_gen), g.shape(m_ref))));
    }
    let [b, r, h, w] = g.value(m_gen).dims4()?;
    match mode {
        ParseMode::L1 => {
            let d = g.sub(m_gen, m_ref)?;
            let a = g.abs(d);
            Ok(g.mean(a))
        }
        ParseMode::Dice => {
            let flat = |g: &mut Graph, v: Var| g.reshape(v, &[b, r, h * w]);
            let (fa, fb) = (flat(g, m_gen)?, flat(g, m_ref)?);
            let prod = g.mul(fa, fb)?;
            let inter = g.sum_axis(prod, 2)?;
            let sa = g.sum_axis(fa, 2)?;
            let sb = g.sum_axis(fb, 2)?;
            let den = g.add(sa, sb)?;
            let den = g.add_scalar(den, DICE_EPS);
            let ratio = g.div(inter, den)?;
            let m = g.mean(ratio);
            let m = g.scale(m, -2.0);
            Ok(g.add_scalar(m, 1.0))
        }
    }
}

/// Gaze loss averaged over rows of `[B, 3]`.
///
/// The angle uses the chord form `2 asin(|a - b| / 2)`, equal to
/// `acos(a . b)` for unit vectors but with a bounded gradient at zero angle.
pub fn gaze_loss_on(g: &mut Graph, g_gen: Var, g_ref: Var, mode: GazeMode) -> Result<Var> {
    if g.shape(g_gen) != g.shape(g_ref) || g.shape(g_gen).len() != 2 || g.shape(g_gen)[1] != 3 {
        return Err(Error::dim(format!("gaze {:?} vs {:?}", g.shape(g_gen), g.shape(g_ref))));
    }
    for (v, what) in [(g_gen, "generated gaze"), (g_ref, "reference gaze")] {
        for row in g.value(v).data().chunks(3) {
            check_unit(row, what)?;
        }
    }
    let d = g.sub(g_gen, g_ref)?;
    let sq = g.square(d);
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.add_scalar(ss, 1e-20);
    let dist = g.sqrt(ss);
    match mode {
        GazeMode::L2 => Ok(g.mean(dist)),
        GazeMode::Angular => {
            let half = g.scale(dist, 0.5);
            let half = g.clamp(half, 0.0, 1.0);
            let ac = g.acos(half);
            let angle = g.scale(ac, -2.0);
            let angle = g.add_scalar(angle, core::f64::consts::PI);
            Ok(g.mean(angle))
        }
    }
}

/// `clamp((x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t), -1, 1)` with one `t` per item.
pub fn x0_estimate_on(g: &mut Graph, x_t: Var, eps: Var, ts: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    let [b, ..] = g.value(x_t).dims4()?;
    if ts.len() != b {
        return Err(Error::dim(format!("{} timesteps for batch {}", ts.len(), b)));
    }
    let mut inv = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &t in ts {
        let (a, s) = x0_coefficients(t, sched)?;
        inv.push(a);
        noise.push(s);
    }
    let noise = g.constant(Tensor::new(&[b, 1, 1, 1], noise)?);
    let inv = g.constant(Tensor::new(&[b, 1, 1, 1], inv)?);
    let scaled = g.mul(eps, noise)?;
    let diff = g.sub(x_t, scaled)?;
    let raw = g.mul(diff, inv)?;
    Ok(g.clamp(raw, -1.0, 1.0))
}

/// Tape handles of every term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_diff: Var,
    pub l_id: Option<Var>,
    pub l_parse: Option<Var>,
    pub l_gaze: Option<Var>,
    pub l_total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown::compose(
            g.value(self.l_diff).item(),
            val(self.l_id),
            val(self.l_parse),
            val(self.l_gaze),
            w,
        )
    }
}

/// Composite loss. `x0_hat` is re-encoded by the frozen experts and compared
/// with `reference` (the bundle of the image that conditioned the prediction).
/// When `x0_hat` is `None` only the diffusion term is formed.
pub fn total_loss_on(
    g: &mut Graph,
    eps_true: Var,
    eps_pred: Var,
    x0_hat: Option<Var>,
    reference: &ConditionBundle,
    weights: &LossWeights,
    experts: &Experts,
    modes: LossModes,
) -> Result<LossVars> {
    weights.validate()?;
    let l_diff = diffusion_loss_on(g, eps_true, eps_pred)?;
    let mut vars = LossVars {
        l_diff,
        l_id: None,
        l_parse: None,
        l_gaze: None,
        l_total: l_diff,
    };
    let Some(x0_hat) = x0_hat else { return Ok(vars) };
    let gen = experts.encode_on(g, x0_hat)?;
    let id_ref = g.constant(reference.e_id.clone());
    let masks_ref = g.constant(reference.region_masks.clone());
    let gaze_ref = g.constant(reference.e_gaze.clone());
    let l_id = identity_loss_on(g, gen.e_id, id_ref)?;
    let l_parse = parse_loss_on(g, gen.region_masks, masks_ref, modes.parse)?;
    let l_gaze = gaze_loss_on(g, gen.e_gaze, gaze_ref, modes.gaze)?;
    let mut total = l_diff;
    for (term, lambda) in [
        (l_id, weights.lambda_id),
        (l_parse, weights.lambda_parse),
        (l_gaze, weights.lambda_gaze),
    ] {
        let weighted = g.scale(term, lambda);
        total = g.add(total, weighted)?;
    }
    vars.l_id = Some(l_id);
    vars.l_parse = Some(l_parse);
    vars.l_gaze = Some(l_gaze);
    vars.l_total = total;
    Ok(vars)
}

/// Composite loss on plain tensors; see [`total_loss_on`].
pub fn total_loss(
    eps_true: &ImageTensor,
    eps_pred: &ImageTensor,
    x0_hat: &ImageTensor,
    reference: &ConditionBundle,
    weights: &LossWeights,
    experts: &Experts,
    modes: LossModes,
) -> Result<LossBreakdown> {
    if x0_hat.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::contract("x0_hat must lie in [-1, 1]"));
    }
    let mut g = Graph::new();
    let et = g.constant(eps_true.clone());
    let ep = g.constant(eps_pred.clone());
    let x0 = g.constant(x0_hat.clone());
    let vars = total_loss_on(&mut g, et, ep, Some(x0), reference, weights, experts, modes)?;
    Ok(vars.breakdown(&g, weights))
}

/// Per-term values recomputed from the scalar helpers, batch-averaged.
pub fn breakdown_by_terms(
    eps_true: &ImageTensor,
    eps_pred: &ImageTensor,
    x0_hat: &ImageTensor,
    reference: &ConditionBundle,
    weights: &LossWeights,
    experts: &Experts,
    modes: LossModes,
) -> Result<LossBreakdown> {
    let l_diff = diffusion_loss(eps_true, eps_pred)?;
    let gen = experts.build_condition(x0_hat)?;
    let b = gen.batch();
    let mut sums = vec![0.0; 3];
    for i in 0..b {
        let (gi, ri) = (gen.item(i), reference.item(i));
        sums[0] += identity_loss(gi.e_id.data(), ri.e_id.data())?;
        sums[1] += parse_loss(&gi.region_masks, &ri.region_masks, modes.parse)?;
        sums[2] += gaze_loss(gi.e_gaze.data(), ri.e_gaze.data(), modes.gaze)?;
    }
    let n = b as f64;
    Ok(LossBreakdown::compose(l_diff, sums[0] / n, sums[1] / n, sums[2] / n, weights))
}
