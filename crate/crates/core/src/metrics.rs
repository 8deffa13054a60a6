//! Image-quality metrics: SSIM, Fréchet distance over surrogate features,
//! a perceptual distance and identity similarity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::experts::Experts;
use crate::rng::Rng;
use crate::tensor::{ImageTensor, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Eigenvalues below this are treated as zero in the matrix square root.
pub const EIGEN_FLOOR: f64 = 1e-10;
pub const DEFAULT_EXTRACTOR: &str = "surrogate-conv64";

fn planes(img: &ImageTensor) -> Result<(usize, usize, usize)> {
    let s = img.shape();
    match s.len() {
        3 => Ok((s[0], s[1], s[2])),
        4 if s[0] == 1 => Ok((s[1], s[2], s[3])),
        _ => Err(Error::dim(format!("expected one image [C, H, W] or [1, C, H, W], got {:?}", s))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| v / total).collect()
}

/// Gaussian-windowed SSIM over valid window positions, averaged over
/// channels. Inputs in `[-1, 1]` are mapped to `[0, 1]` first.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "images of {}x{} are smaller than the {} px window",
            h, w, SSIM_WINDOW
        )));
    }
    let k = gaussian_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let unit = |v: f64| (v + 1.0) / 2.0;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| unit(v)).collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| unit(v)).collect();
        for y in 0..ho {
            for x in 0..wo {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = k[dy] * k[dx];
                        let i = (y + dy) * w + x + dx;
                        let (va, vb) = (pa[i], pb[i]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
        }
    }
    Ok(total / (c * ho * wo) as f64)
}

fn mean_and_cov(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let mu: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for i in 0..n {
            for a in 0..d {
                let da = x[(i, a)] - mu[a];
                for b in a..d {
                    cov[(a, b)] += da * (x[(i, b)] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }
    (mu, cov)
}

fn floored_sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig
        .eigenvalues
        .map(|l| if l < EIGEN_FLOOR { 0.0 } else { libm::sqrt(l) });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn to_matrix(t: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("{} features must be [N, D], got {:?}", what, t.shape())));
    }
    if !t.is_finite() {
        return Err(Error::numeric(format!("non-finite {} features", what)));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

/// Fréchet distance between Gaussian fits of two feature sets `[N, D]`.
pub fn fid(features_real: &Tensor, features_gen: &Tensor) -> Result<f64> {
    let r = to_matrix(features_real, "real")?;
    let g = to_matrix(features_gen, "generated")?;
    if r.ncols() != g.ncols() {
        return Err(Error::dim(format!("feature widths {} and {}", r.ncols(), g.ncols())));
    }
    if r.nrows() == 0 || g.nrows() == 0 {
        return Err(Error::contract("empty feature set"));
    }
    let (mu_r, cov_r) = mean_and_cov(&r);
    let (mu_g, cov_g) = mean_and_cov(&g);
    let mean_term: f64 = mu_r.iter().zip(&mu_g).map(|(a, b)| (a - b) * (a - b)).sum();
    let root_r = floored_sqrt_psd(cov_r.clone());
    let inner = &root_r * &cov_g * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { libm::sqrt(l) })
        .sum();
    Ok((mean_term + cov_r.trace() + cov_g.trace() - 2.0 * cross).max(0.0))
}

/// Frozen seeded convolutional features used by the distribution and
/// perceptual metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    id: String,
    conv1: Tensor,
    conv2: Tensor,
}

const EXTRACTOR_SEED: u64 = 0xFEA7_0064;

impl FeatureExtractor {
    pub fn new(id: &str) -> Result<Self> {
        if id != DEFAULT_EXTRACTOR {
            return Err(Error::config(
                "feature_extractor",
                format!("unknown extractor `{}` (available: {})", id, DEFAULT_EXTRACTOR),
            ));
        }
        let mut rng = Rng::derived(EXTRACTOR_SEED, 1);
        let mut draw = |shape: &[usize], fan_in: usize| {
            let std = 1.5 / libm::sqrt(fan_in as f64);
            Tensor::from_fn(shape, |_| rng.normal() * std)
        };
        let conv1 = draw(&[16, 3, 3, 3], 27);
        let conv2 = draw(&[32, 16, 3, 3], 144);
        Ok(Self {
            id: id.to_string(),
            conv1,
            conv2,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        64
    }

    /// Activations of both layers for one image `[1, 3, H, W]`.
    fn layers(&self, img: &ImageTensor) -> Result<[Tensor; 2]> {
        let (c, h, w) = planes(img)?;
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("feature extractor needs RGB with even sides, got {:?}", img.shape())));
        }
        let mut g = Graph::new();
        let x = g.constant(img.clone().reshape(&[1, 3, h, w])?);
        let w1 = g.constant(self.conv1.clone());
        let h1 = g.conv2d(x, w1, None, 1, 1)?;
        let h1 = g.tanh(h1);
        let p = g.avg_pool(h1, 2)?;
        let w2 = g.constant(self.conv2.clone());
        let h2 = g.conv2d(p, w2, None, 1, 1)?;
        let h2 = g.tanh(h2);
        Ok([g.value(h1).clone(), g.value(h2).clone()])
    }

    /// Spatial mean and standard deviation of each second-layer channel.
    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let [_, h2] = self.layers(img)?;
        let s = h2.shape();
        let plane = s[2] * s[3];
        let mut out = vec![0.0; 2 * s[1]];
        for c in 0..s[1] {
            let p = &h2.data()[c * plane..(c + 1) * plane];
            let m = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
            out[c] = m;
            out[s[1] + c] = libm::sqrt(var);
        }
        Ok(out)
    }

    /// Channel-normalized activations compared position by position, averaged
    /// over positions and summed over layers.
    pub fn perceptual_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        a.expect_same_shape(b)?;
        let la = self.layers(a)?;
        let lb = self.layers(b)?;
        let mut total = 0.0;
        for (fa, fb) in la.iter().zip(&lb) {
            let s = fa.shape();
            let (ch, plane) = (s[1], s[2] * s[3]);
            let mut acc = 0.0;
            for p in 0..plane {
                let col = |t: &Tensor| -> Vec<f64> { (0..ch).map(|c| t.data()[c * plane + p]).collect() };
                let (va, vb) = (col(fa), col(fb));
                let na = libm::sqrt(va.iter().map(|v| v * v).sum::<f64>()) + 1e-10;
                let nb = libm::sqrt(vb.iter().map(|v| v * v).sum::<f64>()) + 1e-10;
                acc += va
                    .iter()
                    .zip(&vb)
                    .map(|(x, y)| {
                        let d = x / na - y / nb;
                        d * d
                    })
                    .sum::<f64>();
            }
            total += acc / plane as f64;
        }
        Ok(total)
    }
}

/// Feature matrix `[N, D]` for `images`.
pub fn extract_features(images: &[ImageTensor], extractor_id: &str) -> Result<Tensor> {
    let fx = FeatureExtractor::new(extractor_id)?;
    let mut data = Vec::with_capacity(images.len() * fx.dim());
    for img in images {
        data.extend(fx.features(img)?);
    }
    Tensor::new(&[images.len(), fx.dim()], data)
}

/// Perceptual distance with the default extractor.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    FeatureExtractor::new(DEFAULT_EXTRACTOR)?.perceptual_distance(a, b)
}

/// Cosine of the surrogate identity embeddings.
pub fn identity_similarity(a: &ImageTensor, b: &ImageTensor, experts: &Experts) -> Result<f64> {
    experts.identity_similarity(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, MetricValue>,
    pub n_samples: usize,
    pub feature_extractor_id: String,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).map(|m| m.value)
    }
}

/// What to compare in [`evaluate`].
pub struct EvalSet<'a> {
    pub outputs: &'a [ImageTensor],
    /// Structure references: SSIM, perceptual distance and FID use these.
    pub references: &'a [ImageTensor],
    /// Identity references; `None` compares identity with `references`.
    pub identity_references: Option<&'a [ImageTensor]>,
}

/// Pooled FID plus per-pair mean SSIM, perceptual distance and identity similarity.
pub fn evaluate(set: &EvalSet<'_>, experts: &Experts, extractor_id: &str, config_digest: &str) -> Result<MetricsReport> {
    let n = set.outputs.len();
    if n == 0 || set.references.is_empty() {
        return Err(Error::contract("evaluation needs at least one output and one reference"));
    }
    let ids = set.identity_references.unwrap_or(set.references);
    if set.references.len() != n || ids.len() != n {
        return Err(Error::dim(format!(
            "{} outputs, {} references, {} identity references",
            n,
            set.references.len(),
            ids.len()
        )));
    }
    let fx = FeatureExtractor::new(extractor_id)?;
    let (mut s, mut p, mut id) = (0.0, 0.0, 0.0);
    for i in 0..n {
        s += ssim(&set.outputs[i], &set.references[i])?;
        p += fx.perceptual_distance(&set.outputs[i], &set.references[i])?;
        id += experts.identity_similarity(&set.outputs[i], &ids[i])?;
    }
    let f = fid(
        &extract_features(set.references, extractor_id)?,
        &extract_features(set.outputs, extractor_id)?,
    )?;
    let mut values = BTreeMap::new();
    let mut put = |name: &str, value: f64| {
        values.insert(name.to_string(), MetricValue { value, n_samples: n });
    };
    put("ssim", s / n as f64);
    put("fid", f);
    put("perceptual", p / n as f64);
    put("id_similarity", id / n as f64);
    if values.values().any(|m| !m.value.is_finite()) {
        return Err(Error::numeric("non-finite metric value"));
    }
    Ok(MetricsReport {
        values,
        n_samples: n,
        feature_extractor_id: fx.id().to_string(),
        config_digest: config_digest.to_string(),
    })
}
