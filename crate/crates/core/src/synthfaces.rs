//! Procedural faces with ground-truth identity, region masks and gaze.
//!
//! A face is an anti-aliased oval with two eyes (pupils offset by gaze), a
//! nose and a mouth, drawn over a seeded textured background. Geometry that
//! defines identity comes only from `identity_vector`; yaw, gaze, lighting and
//! background never touch it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, Tensor};

pub const IDENTITY_DIM: usize = 8;
pub const N_REGIONS: usize = 5;
pub const REGION_NAMES: [&str; N_REGIONS] = ["skin", "eyes", "nose", "mouth", "background"];
pub const REGION_SKIN: usize = 0;
pub const REGION_EYES: usize = 1;
pub const REGION_NOSE: usize = 2;
pub const REGION_MOUTH: usize = 3;
pub const REGION_BACKGROUND: usize = 4;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    /// Each component in `[-1, 1]`: oval width, oval height, eye spacing, eye
    /// size, nose width, mouth width, skin lightness, skin warmth.
    pub identity_vector: [f64; IDENTITY_DIM],
    /// Radians in `[-0.5, 0.5]`.
    pub pose_yaw: f64,
    /// Unit gaze direction; `x` right, `y` up, `z` towards the viewer.
    pub gaze: [f64; 3],
    /// In `[0.5, 1.5]`.
    pub lighting: f64,
    pub background_seed: u64,
}

impl FaceParams {
    pub fn validate(&self) -> Result<()> {
        if self.identity_vector.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::config("identity_vector", "components must lie in [-1, 1]"));
        }
        if !(-0.5..=0.5).contains(&self.pose_yaw) {
            return Err(Error::config("pose_yaw", format!("{} not in [-0.5, 0.5]", self.pose_yaw)));
        }
        let norm = libm::sqrt(self.gaze.iter().map(|v| v * v).sum::<f64>());
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::config("gaze", format!("norm {} is not 1", norm)));
        }
        if !(0.5..=1.5).contains(&self.lighting) {
            return Err(Error::config("lighting", format!("{} not in [0.5, 1.5]", self.lighting)));
        }
        Ok(())
    }
}

/// Gaze direction from horizontal and vertical angles (radians).
pub fn gaze_from_angles(yaw: f64, pitch: f64) -> [f64; 3] {
    [
        libm::sin(yaw) * libm::cos(pitch),
        libm::sin(pitch),
        libm::cos(yaw) * libm::cos(pitch),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFace {
    /// `[1, 3, S, S]` in `[-1, 1]`.
    pub image: ImageTensor,
    pub params: FaceParams,
    /// `[N_REGIONS, S, S]`, binary, one region per pixel.
    pub gt_masks: Tensor,
    pub gt_gaze: [f64; 3],
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        du * du + dv * dv <= 1.0
    }
}

/// Face layout in normalized coordinates (`u` right, `v` down, both in [-1, 1]).
struct Layout {
    face: Ellipse,
    eyes: [Ellipse; 2],
    pupils: [Ellipse; 2],
    nose: Ellipse,
    mouth: Ellipse,
    skin: [f64; 3],
}

impl Layout {
    fn new(p: &FaceParams) -> Self {
        let id = &p.identity_vector;
        let (sy, cy) = (libm::sin(p.pose_yaw), libm::cos(p.pose_yaw));
        let face_w = 0.62 + 0.08 * id[0];
        let face_h = 0.78 + 0.08 * id[1];
        let eye_dx = 0.30 + 0.06 * id[2];
        let eye_r = 0.17 + 0.03 * id[3];
        let nose_w = 0.10 + 0.04 * id[4];
        let mouth_w = 0.28 + 0.08 * id[5];
        let light = 0.62 + 0.15 * id[6];
        let warm = 0.06 * id[7];

        let face = Ellipse {
            cx: 0.10 * sy,
            cy: 0.02,
            rx: face_w * (1.0 - 0.12 * sy.abs()),
            ry: face_h,
        };
        let shift = 0.25 * sy;
        let eye = |side: f64| {
            // the eye turned away from the viewer is foreshortened
            let scale = cy * (1.0 + 0.35 * side * sy);
            Ellipse {
                cx: side * eye_dx * cy + shift,
                cy: -0.18,
                rx: eye_r * scale,
                ry: 0.7 * eye_r,
            }
        };
        let eyes = [eye(-1.0), eye(1.0)];
        let pupil = |e: &Ellipse| Ellipse {
            cx: e.cx + 0.55 * e.rx * p.gaze[0],
            cy: e.cy - 0.55 * e.ry * p.gaze[1],
            rx: 0.55 * e.ry,
            ry: 0.55 * e.ry,
        };
        let pupils = [pupil(&eyes[0]), pupil(&eyes[1])];
        let nose = Ellipse {
            cx: 0.35 * sy,
            cy: 0.10,
            rx: nose_w * (1.0 - 0.2 * sy.abs()),
            ry: 0.17,
        };
        let mouth = Ellipse {
            cx: 0.27 * sy,
            cy: 0.43,
            rx: mouth_w * cy,
            ry: 0.075,
        };
        let skin = [
            (light + 0.16 + warm).clamp(0.0, 1.0),
            light.clamp(0.0, 1.0),
            (light - 0.12 - warm).clamp(0.0, 1.0),
        ];
        Self {
            face,
            eyes,
            pupils,
            nose,
            mouth,
            skin,
        }
    }

    fn region(&self, u: f64, v: f64) -> usize {
        if self.eyes.iter().any(|e| e.contains(u, v)) {
            REGION_EYES
        } else if self.mouth.contains(u, v) {
            REGION_MOUTH
        } else if self.nose.contains(u, v) {
            REGION_NOSE
        } else if self.face.contains(u, v) {
            REGION_SKIN
        } else {
            REGION_BACKGROUND
        }
    }
}

struct Background {
    base: [f64; 3],
    waves: [(f64, f64, f64, f64); 3],
}

impl Background {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::seed_from(seed);
        let base = [
            rng.uniform_range(0.25, 0.75),
            rng.uniform_range(0.25, 0.75),
            rng.uniform_range(0.25, 0.75),
        ];
        let mut wave = || {
            let angle = rng.uniform_range(0.0, core::f64::consts::TAU);
            let freq = rng.uniform_range(1.0, 4.0) * core::f64::consts::PI;
            (
                freq * libm::cos(angle),
                freq * libm::sin(angle),
                rng.uniform_range(0.0, core::f64::consts::TAU),
                rng.uniform_range(0.04, 0.12),
            )
        };
        let waves = [wave(), wave(), wave()];
        Self { base, waves }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let mut tex = 0.0;
        for &(fu, fv, phase, amp) in &self.waves {
            tex += amp * libm::sin(fu * u + fv * v + phase);
        }
        [
            (self.base[0] + tex).clamp(0.0, 1.0),
            (self.base[1] + 0.7 * tex).clamp(0.0, 1.0),
            (self.base[2] - 0.5 * tex).clamp(0.0, 1.0),
        ]
    }
}

/// Rasterizes a face at `size x size`.
pub fn render_face(params: &FaceParams, size: usize) -> Result<LabeledFace> {
    if size < 16 {
        return Err(Error::config("size", format!("{} is below the minimum of 16", size)));
    }
    params.validate()?;
    let layout = Layout::new(params);
    let background = Background::new(params.background_seed);
    let light = params.lighting;
    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    let mut masks = vec![0.0; N_REGIONS * plane];
    let to_unit = |i: f64| 2.0 * i / size as f64 - 1.0;
    let sub = SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let (uc, vc) = (to_unit(px as f64 + 0.5), to_unit(py as f64 + 0.5));
            masks[layout.region(uc, vc) * plane + py * size + px] = 1.0;
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = to_unit(px as f64 + (sx as f64 + 0.5) / sub);
                    let v = to_unit(py as f64 + (sy as f64 + 0.5) / sub);
                    let c = shade(&layout, &background, light, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                let intensity = acc[k] / (sub * sub);
                image[k * plane + py * size + px] = 2.0 * intensity - 1.0;
            }
        }
    }
    Ok(LabeledFace {
        image: Tensor::new(&[1, 3, size, size], image)?,
        params: params.clone(),
        gt_masks: Tensor::new(&[N_REGIONS, size, size], masks)?,
        gt_gaze: params.gaze,
    })
}

/// Color in `[0, 1]` at one sample point.
fn shade(layout: &Layout, background: &Background, light: f64, u: f64, v: f64) -> [f64; 3] {
    let lit = |c: [f64; 3]| c.map(|x| (x * light).clamp(0.0, 1.0));
    match layout.region(u, v) {
        REGION_EYES => {
            if layout.pupils.iter().any(|p| p.contains(u, v)) {
                [0.04, 0.03, 0.03]
            } else {
                lit([0.92, 0.92, 0.9])
            }
        }
        REGION_MOUTH => lit([0.72, 0.22, 0.26]),
        REGION_NOSE => lit(layout.skin.map(|c| c * 0.78)),
        REGION_SKIN => lit(layout.skin),
        _ => background.color(u, v),
    }
}

/// A generated dataset with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub faces: Vec<LabeledFace>,
    /// Identity index of each face.
    pub identities: Vec<usize>,
    pub identity_vectors: Vec<[f64; IDENTITY_DIM]>,
}

impl SyntheticDataset {
    pub fn images(&self) -> Vec<ImageTensor> {
        self.faces.iter().map(|f| f.image.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

pub fn random_identity(rng: &mut Rng) -> [f64; IDENTITY_DIM] {
    core::array::from_fn(|_| rng.uniform_range(-1.0, 1.0))
}

/// Random nuisance parameters (pose, gaze, lighting, background) for an identity.
pub fn random_params(identity_vector: [f64; IDENTITY_DIM], rng: &mut Rng) -> FaceParams {
    let pose_yaw = rng.uniform_range(-0.5, 0.5);
    let gaze = gaze_from_angles(rng.uniform_range(-0.6, 0.6), rng.uniform_range(-0.4, 0.4));
    let lighting = rng.uniform_range(0.75, 1.25);
    FaceParams {
        identity_vector,
        pose_yaw,
        gaze,
        lighting,
        background_seed: rng.next_u64(),
    }
}

/// `n` faces over `n_identities` identities. Every identity appears at least
/// once; the remaining faces pick an identity uniformly at random.
pub fn make_dataset(n: usize, n_identities: usize, seed: u64, size: usize) -> Result<SyntheticDataset> {
    if n_identities == 0 || n < n_identities {
        return Err(Error::contract(format!(
            "need n >= n_identities >= 1, got n = {}, n_identities = {}",
            n, n_identities
        )));
    }
    let mut rng = Rng::seed_from(seed);
    let identity_vectors: Vec<_> = (0..n_identities).map(|_| random_identity(&mut rng)).collect();
    let mut faces = Vec::with_capacity(n);
    let mut identities = Vec::with_capacity(n);
    for i in 0..n {
        let id = if i < n_identities { i } else { rng.below(n_identities) };
        let params = random_params(identity_vectors[id], &mut rng);
        faces.push(render_face(&params, size)?);
        identities.push(id);
    }
    Ok(SyntheticDataset {
        faces,
        identities,
        identity_vectors,
    })
}
