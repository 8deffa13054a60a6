//! Frozen expert encoders and the condition bundle they produce.
//!
//! The three experts stand in for a face recognizer, a face parser and a
//! gaze estimator. Their weights are drawn once from `surrogate_seed` and never
//! trained. Each encoder is written on the autodiff tape so the expert losses
//! can push gradients back into the image.
//!
//! * identity: standardized image, face-centred window, two random conv
//!   stages pooled onto a 4x4 grid, random projection, L2 normalization.
//! * parsing: per-pixel softmax over regions of a contrast-gated canonical
//!   layout prior plus a random-feature term; one token per region is the
//!   mask-weighted mean of a random conv feature map.
//! * gaze: offset between the dark (pupil) and bright centroids inside a
//!   canonical eye window, lifted to a unit 3-vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthfaces::{self, FaceParams, N_REGIONS, REGION_EYES};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertConfig {
    pub d_id: usize,
    pub d_parse: usize,
    pub n_regions: usize,
    pub surrogate_seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d_id: 128,
            d_parse: 64,
            n_regions: N_REGIONS,
            surrogate_seed: 0x1D_5EED,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_id", self.d_id),
            ("d_parse", self.d_parse),
            ("n_regions", self.n_regions),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Conditioning payload for a batch of source images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// `[B, d_id]`, unit rows.
    pub e_id: Tensor,
    /// `[B, n_regions, d_parse]`, one pooled token per region.
    pub e_parse: Tensor,
    /// `[B, n_regions, H, W]`, soft masks summing to 1 over regions.
    pub region_masks: Tensor,
    /// `[B, 3]`, unit rows.
    pub e_gaze: Tensor,
}

impl ConditionBundle {
    pub fn batch(&self) -> usize {
        self.e_id.shape()[0]
    }

    /// Checks the unit-norm and mask invariants.
    pub fn validate(&self) -> Result<()> {
        let b = self.batch();
        for (name, t) in [("e_id", &self.e_id), ("e_gaze", &self.e_gaze)] {
            let d = t.shape()[1];
            for row in t.data().chunks(d) {
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::numeric(format!("{} row norm {} is not 1", name, norm)));
                }
            }
        }
        let [mb, r, h, w] = self.region_masks.dims4()?;
        if mb != b || self.e_parse.shape()[..2] != [b, r] {
            return Err(Error::dim("bundle batch or region counts disagree"));
        }
        let plane = h * w;
        let m = self.region_masks.data();
        for bi in 0..b {
            for p in 0..plane {
                let mut total = 0.0;
                for ri in 0..r {
                    let v = m[(bi * r + ri) * plane + p];
                    if v < 0.0 {
                        return Err(Error::numeric("negative region mask"));
                    }
                    total += v;
                }
                if total > 1.0 + 1e-6 {
                    return Err(Error::numeric(format!("region masks sum to {}", total)));
                }
            }
        }
        if !(self.e_parse.is_finite() && self.e_id.is_finite() && self.e_gaze.is_finite()) {
            return Err(Error::numeric("non-finite bundle entries"));
        }
        Ok(())
    }

    /// Batch item `i` as a batch of one.
    pub fn item(&self, i: usize) -> ConditionBundle {
        ConditionBundle {
            e_id: self.e_id.batch_item(i),
            e_parse: self.e_parse.batch_item(i),
            region_masks: self.region_masks.batch_item(i),
            e_gaze: self.e_gaze.batch_item(i),
        }
    }

    pub fn concat(items: &[ConditionBundle]) -> Result<ConditionBundle> {
        let pick = |f: fn(&ConditionBundle) -> &Tensor| {
            Tensor::stack_batch(&items.iter().map(|b| f(b).clone()).collect::<Vec<_>>())
        };
        Ok(ConditionBundle {
            e_id: pick(|b| &b.e_id)?,
            e_parse: pick(|b| &b.e_parse)?,
            region_masks: pick(|b| &b.region_masks)?,
            e_gaze: pick(|b| &b.e_gaze)?,
        })
    }
}

/// Tape handles for an encoded batch.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub e_id: Var,
    pub e_parse: Var,
    pub region_masks: Var,
    pub e_gaze: Var,
}

const ID_CHANNELS: usize = 16;
const ID_GRID: usize = 4;
const PARSE_HIDDEN: usize = 8;
const PRIOR_GAIN: f64 = 5.0;
const CONTRAST_KNEE: f64 = 0.01;
const GAZE_GAIN: f64 = 3.0;
const DARK_SLOPE: f64 = 8.0;
const DARK_LEVEL: f64 = -0.2;
const WINDOW_FLOOR: f64 = 0.25;
const NEUTRAL_SLOPE: f64 = 10.0;
const NEUTRAL_LEVEL: f64 = 0.12;
const GAZE_DEPTH: f64 = 0.25;

/// The three frozen encoders for one image size.
#[derive(Debug, Clone)]
pub struct Experts {
    cfg: ExpertConfig,
    image_size: usize,
    id_window: Tensor,
    id_conv1: Tensor,
    id_conv2: Tensor,
    id_proj: Tensor,
    parse_prior: Tensor,
    parse_conv: Tensor,
    parse_head: Tensor,
    parse_feat: Tensor,
    eye_window: Tensor,
    coord_u: Tensor,
    coord_v: Tensor,
    gaze_mix: Tensor,
    /// Pupil offset measured on the canonical face looking straight ahead.
    gaze_bias: Tensor,
}

fn gaussian_weights(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / libm::sqrt(fan_in as f64);
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// Separable Gaussian blur of one `size x size` plane.
fn blur(plane: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (xx, yy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if xx >= 0 && yy >= 0 && (xx as usize) < size && (yy as usize) < size {
                        acc += w * src[yy as usize * size + xx as usize];
                        wsum += w;
                    }
                }
                out[y * size + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

impl Experts {
    pub fn new(cfg: ExpertConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        if image_size < 16 || image_size % 8 != 0 {
            return Err(Error::config(
                "image_size",
                format!("{} must be a multiple of 8 and at least 16", image_size),
            ));
        }
        let s = image_size;
        let plane = s * s;
        let mut rng = Rng::derived(cfg.surrogate_seed, 0xE7);

        let to_unit = |i: usize| 2.0 * (i as f64 + 0.5) / s as f64 - 1.0;
        let id_window = Tensor::from_fn(&[1, 1, s, s], |i| {
            let (u, v) = (to_unit(i % s), to_unit(i / s));
            libm::exp(-(u * u + v * v) / (2.0 * 0.6 * 0.6))
        });
        let id_conv1 = gaussian_weights(&mut rng, &[ID_CHANNELS, 3, 3, 3], 27, 1.5);
        let id_conv2 = gaussian_weights(&mut rng, &[ID_CHANNELS, ID_CHANNELS, 3, 3], ID_CHANNELS * 9, 1.5);
        let flat = ID_CHANNELS * ID_GRID * ID_GRID;
        let id_proj = gaussian_weights(&mut rng, &[cfg.d_id, flat], flat, 1.0);

        // canonical layout: neutral identity, frontal pose and gaze
        let canonical = synthfaces::render_face(
            &FaceParams {
                identity_vector: [0.0; synthfaces::IDENTITY_DIM],
                pose_yaw: 0.0,
                gaze: [0.0, 0.0, 1.0],
                lighting: 1.0,
                background_seed: 0,
            },
            s,
        )?;
        let sigma = s as f64 / 32.0 * 1.5;
        let mut prior = vec![0.0; cfg.n_regions * plane];
        if cfg.n_regions == N_REGIONS {
            for r in 0..N_REGIONS {
                let soft = blur(&canonical.gt_masks.data()[r * plane..(r + 1) * plane], s, sigma);
                for (p, v) in soft.iter().enumerate() {
                    prior[r * plane + p] = PRIOR_GAIN * v;
                }
            }
        }
        let parse_prior = Tensor::new(&[1, cfg.n_regions, s, s], prior)?;
        let parse_conv = gaussian_weights(&mut rng, &[PARSE_HIDDEN, 3, 3, 3], 27, 1.0);
        let parse_head = gaussian_weights(&mut rng, &[cfg.n_regions, PARSE_HIDDEN, 1, 1], PARSE_HIDDEN, 0.5);
        let parse_feat = gaussian_weights(&mut rng, &[cfg.d_parse, 3, 3, 3], 27, 1.5);

        // eye positions swept over the yaw range of the generator
        let mut eyes = vec![0.0f64; plane];
        for k in 0..=4 {
            let swept = synthfaces::render_face(
                &FaceParams {
                    pose_yaw: -0.5 + 0.25 * k as f64,
                    ..canonical.params.clone()
                },
                s,
            )?;
            let soft = blur(&swept.gt_masks.data()[REGION_EYES * plane..(REGION_EYES + 1) * plane], s, sigma);
            for (e, v) in eyes.iter_mut().zip(soft) {
                *e = e.max(v);
            }
        }
        let peak = eyes.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let eye_window = Tensor::new(
            &[1, 1, s, s],
            eyes.iter()
                .map(|v| ((v / peak - WINDOW_FLOOR) / (1.0 - WINDOW_FLOOR)).max(0.0))
                .collect(),
        )?;
        let coord_u = Tensor::from_fn(&[1, 1, s, s], |i| to_unit(i % s));
        let coord_v = Tensor::from_fn(&[1, 1, s, s], |i| to_unit(i / s));
        let gaze_mix = Tensor::from_fn(&[3, 3], |i| {
            let eye = if i % 4 == 0 { 1.0 } else { 0.0 };
            eye + 0.05 * rng.normal()
        });

        let mut experts = Self {
            cfg,
            image_size,
            id_window,
            id_conv1,
            id_conv2,
            id_proj,
            parse_prior,
            parse_conv,
            parse_head,
            parse_feat,
            eye_window,
            coord_u,
            coord_v,
            gaze_mix,
            gaze_bias: Tensor::zeros(&[1, 2]),
        };
        let mut g = Graph::new();
        let x = g.constant(canonical.image.clone());
        let offset = experts.pupil_offset_on(&mut g, x)?;
        experts.gaze_bias = g.value(offset).clone();
        Ok(experts)
    }

    pub fn config(&self) -> ExpertConfig {
        self.cfg
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check_image(&self, g: &Graph, x: Var) -> Result<usize> {
        let [b, c, h, w] = g.value(x).dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::dim(format!(
                "expert encoders expect [B, 3, {s}, {s}], got {:?}",
                g.shape(x),
                s = self.image_size
            )));
        }
        Ok(b)
    }

    /// Per-image standardization over all channels and pixels.
    fn standardize(g: &mut Graph, x: Var) -> Result<Var> {
        g.group_norm(x, 1, None, None)
    }

    /// Per-item sum over all non-batch axes, shaped `[B, 1]`.
    fn per_item_sum(g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let n = g.value(x).len() / b;
        let flat = g.reshape(x, &[b, n])?;
        g.sum_axis(flat, 1)
    }

    /// L2-normalizes the rows of `[B, D]`.
    fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
        let sq = g.square(x);
        let ss = g.sum_axis(sq, 1)?;
        let ss = g.add_scalar(ss, 1e-24);
        let norm = g.sqrt(ss);
        g.div(x, norm)
    }

    pub fn identity_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.check_image(g, x)?;
        let xs = Self::standardize(g, x)?;
        let win = g.constant(self.id_window.clone());
        let xw = g.mul(xs, win)?;
        let w1 = g.constant(self.id_conv1.clone());
        let h = g.conv2d(xw, w1, None, 1, 1)?;
        let h = g.tanh(h);
        let h = g.avg_pool(h, 2)?;
        let w2 = g.constant(self.id_conv2.clone());
        let h = g.conv2d(h, w2, None, 1, 1)?;
        let h = g.tanh(h);
        let h = g.avg_pool(h, self.image_size / 2 / ID_GRID)?;
        let flat = g.reshape(h, &[b, ID_CHANNELS * ID_GRID * ID_GRID])?;
        let proj = g.constant(self.id_proj.clone());
        let e = g.linear(flat, proj, None)?;
        Self::normalize_rows(g, e)
    }

    /// Returns `(tokens [B, R, d_parse], masks [B, R, H, W])`.
    pub fn parsing_on(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let b = self.check_image(g, x)?;
        let (s, r) = (self.image_size, self.cfg.n_regions);
        let plane = s * s;

        // contrast gate var / (var + knee): zero on a constant image
        let n = (3 * plane) as f64;
        let flat = g.reshape(x, &[b, 3 * plane])?;
        let total = g.sum_axis(flat, 1)?;
        let mean = g.scale(total, 1.0 / n);
        let centred = g.sub(flat, mean)?;
        let sq = g.square(centred);
        let var = g.sum_axis(sq, 1)?;
        let var = g.scale(var, 1.0 / n);
        let denom = g.add_scalar(var, CONTRAST_KNEE);
        let gate = g.div(var, denom)?;
        let gate = g.reshape(gate, &[b, 1, 1, 1])?;

        let xs = Self::standardize(g, x)?;
        let wc = g.constant(self.parse_conv.clone());
        let hidden = g.conv2d(xs, wc, None, 1, 1)?;
        let hidden = g.tanh(hidden);
        let wh = g.constant(self.parse_head.clone());
        let feat_logits = g.conv2d(hidden, wh, None, 1, 0)?;
        let prior = g.constant(self.parse_prior.clone());
        let gated = g.mul(prior, gate)?;
        let logits = g.add(feat_logits, gated)?;

        // softmax across the region axis
        let lt = g.permute(logits, &[0, 2, 3, 1])?;
        let soft = g.softmax_last(lt)?;
        let masks = g.permute(soft, &[0, 3, 1, 2])?;

        let wf = g.constant(self.parse_feat.clone());
        let feats = g.conv2d(xs, wf, None, 1, 1)?;
        let feats = g.tanh(feats);
        let feats = g.reshape(feats, &[b, self.cfg.d_parse, plane])?;
        let mflat = g.reshape(masks, &[b, r, plane])?;
        let pooled = g.bmm(mflat, feats, true)?;
        let mass = g.sum_axis(mflat, 2)?;
        let mass = g.add_scalar(mass, 1e-6);
        let tokens = g.div(pooled, mass)?;
        Ok((tokens, masks))
    }

    /// Pupil centroid minus whole-eye centroid, `[B, 2]` in unit coordinates.
    fn pupil_offset_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.check_image(g, x)?;
        let s = self.image_size;
        let pixels = g.reshape(x, &[b, 3, s * s])?;
        let pixels = g.permute(pixels, &[0, 2, 1])?;
        let channel_mix = |g: &mut Graph, w: [f64; 3]| -> Result<Var> {
            let w = g.constant(Tensor::new(&[1, 3], w.to_vec())?);
            let v = g.linear(pixels, w, None)?;
            g.reshape(v, &[b, 1, s, s])
        };
        let lum = channel_mix(g, [1.0 / 3.0; 3])?;
        let warmth = channel_mix(g, [1.0, 0.0, -1.0])?;
        let window = g.constant(self.eye_window.clone());

        // pupils: the darkest pixels around the eyes
        let dark = g.scale(lum, -DARK_SLOPE);
        let dark = g.add_scalar(dark, DARK_SLOPE * DARK_LEVEL);
        let dark = g.sigmoid(dark);
        let dark = g.mul(dark, window)?;
        // whole eye: colour-neutral pixels, skin is always warm
        let eye = g.scale(warmth, -NEUTRAL_SLOPE);
        let eye = g.add_scalar(eye, NEUTRAL_SLOPE * NEUTRAL_LEVEL);
        let eye = g.sigmoid(eye);
        let bright = g.mul(eye, window)?;
        let dark = g.mul(dark, eye)?;

        let cu = g.constant(self.coord_u.clone());
        let cv = g.constant(self.coord_v.clone());
        let centroid = |g: &mut Graph, w: Var, coord: Var| -> Result<Var> {
            let num = g.mul(w, coord)?;
            let num = Self::per_item_sum(g, num)?;
            let den = Self::per_item_sum(g, w)?;
            let den = g.add_scalar(den, 1e-6);
            g.div(num, den)
        };
        let du = {
            let a = centroid(g, dark, cu)?;
            let c = centroid(g, bright, cu)?;
            g.sub(a, c)?
        };
        let dv = {
            let a = centroid(g, dark, cv)?;
            let c = centroid(g, bright, cv)?;
            g.sub(a, c)?
        };
        g.concat(&[du, dv], 1)
    }

    pub fn gaze_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.check_image(g, x)?;
        let offset = self.pupil_offset_on(g, x)?;
        let bias = g.constant(self.gaze_bias.clone());
        let offset = g.sub(offset, bias)?;
        // image v grows downwards, gaze y grows upwards
        let flip = g.constant(Tensor::new(&[1, 2], vec![GAZE_GAIN, -GAZE_GAIN])?);
        let gxy = g.mul(offset, flip)?;
        let gz = g.constant(Tensor::full(&[b, 1], GAZE_DEPTH));
        let raw = g.concat(&[gxy, gz], 1)?;
        let mix = g.constant(self.gaze_mix.clone());
        let mixed = g.linear(raw, mix, None)?;
        Self::normalize_rows(g, mixed)
    }

    /// All three encoders on one tape.
    pub fn encode_on(&self, g: &mut Graph, x: Var) -> Result<BundleVars> {
        let e_id = self.identity_on(g, x)?;
        let (e_parse, region_masks) = self.parsing_on(g, x)?;
        let e_gaze = self.gaze_on(g, x)?;
        Ok(BundleVars {
            e_id,
            e_parse,
            region_masks,
            e_gaze,
        })
    }

    pub fn encode_identity(&self, image: &ImageTensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let v = self.identity_on(&mut g, x)?;
        Ok(g.value(v).clone())
    }

    pub fn encode_parsing(&self, image: &ImageTensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let (t, m) = self.parsing_on(&mut g, x)?;
        Ok((g.value(t).clone(), g.value(m).clone()))
    }

    pub fn encode_gaze(&self, image: &ImageTensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let v = self.gaze_on(&mut g, x)?;
        Ok(g.value(v).clone())
    }

    /// Runs the three encoders on `source` and bundles the results.
    pub fn build_condition(&self, source: &ImageTensor) -> Result<ConditionBundle> {
        let mut g = Graph::new();
        let x = g.constant(source.clone());
        let v = self.encode_on(&mut g, x)?;
        let bundle = ConditionBundle {
            e_id: g.value(v.e_id).clone(),
            e_parse: g.value(v.e_parse).clone(),
            region_masks: g.value(v.region_masks).clone(),
            e_gaze: g.value(v.e_gaze).clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Cosine similarity of the identity embeddings of two single images.
    pub fn identity_similarity(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let ea = self.encode_identity(a)?;
        let eb = self.encode_identity(b)?;
        if ea.shape() != eb.shape() || ea.shape()[0] != 1 {
            return Err(Error::dim("identity_similarity expects two single images"));
        }
        Ok(cosine(ea.data(), eb.data()))
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experts() -> Experts {
        Experts::new(ExpertConfig::default(), 32).unwrap()
    }

    #[test]
    fn wrong_size_is_a_dimension_error() {
        let e = experts();
        let img = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(e.encode_identity(&img), Err(Error::Dimension(_))));
        assert!(matches!(e.encode_gaze(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn gray_image_gives_uniform_masks() {
        let e = experts();
        let (tokens, masks) = e.encode_parsing(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(tokens.is_finite());
        for v in masks.data() {
            assert!((v - 0.2).abs() < 1e-9, "{}", v);
        }
    }

    #[test]
    fn bundle_invariants_hold() {
        let e = experts();
        let face = synthfaces::make_dataset(2, 2, 3, 32).unwrap();
        let batch = Tensor::stack_batch(&face.images()).unwrap();
        let b = e.build_condition(&batch).unwrap();
        assert_eq!(b.e_id.shape(), &[2, 128]);
        assert_eq!(b.e_parse.shape(), &[2, 5, 64]);
        assert_eq!(b.e_gaze.shape(), &[2, 3]);
        let masks = b.region_masks.data();
        for bi in 0..2 {
            for p in 0..1024 {
                let s: f64 = (0..5).map(|r| masks[(bi * 5 + r) * 1024 + p]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg = ExpertConfig {
            d_id: 0,
            ..ExpertConfig::default()
        };
        assert!(matches!(Experts::new(cfg, 32), Err(Error::Config { field, .. }) if field == "d_id"));
        assert!(Experts::new(ExpertConfig::default(), 20).is_err());
    }
}
