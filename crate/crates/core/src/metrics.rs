//! Perceptual difference maps, ROI locality, and Fréchet distance between Gaussians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{encode_png, RgbImage};
use crate::ndio::{resample_bilinear, MembershipTensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown part: {0}")]
    UnknownPart(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not symmetric positive semi-definite")]
    NotPsd,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

// D65 reference white, matching the row sums of the sRGB → XYZ matrix.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIELAB `(L*, a*, b*)` of one sRGB triple in `[0, 1]`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let xyz: [f64; 3] =
        std::array::from_fn(|i| SRGB_TO_XYZ[i][0] * lin[0] + SRGB_TO_XYZ[i][1] * lin[1] + SRGB_TO_XYZ[i][2] * lin[2]);
    let [fx, fy, fz] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Planar `3 × h × w` CIELAB values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl LabImage {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }
}

pub fn srgb_to_lab(image: &RgbImage) -> LabImage {
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let lab = srgb_pixel_to_lab(image.pixel(y, x).map(|v| v as f64));
            for (c, v) in lab.into_iter().enumerate() {
                data[c * hw + y * w + x] = v;
            }
        }
    }
    LabImage { h, w, data }
}

/// Per-pixel squared CIELAB distance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl DiffMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Grayscale heatmap normalized by the map's maximum; returns the PNG and that maximum.
    pub fn to_png(&self) -> (Vec<u8>, f64) {
        let max = self.max();
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        (encode_png(self.w, self.h, png::ColorType::Grayscale, &pixels), max)
    }
}

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn diff_map(a: &RgbImage, b: &RgbImage) -> Result<DiffMap> {
    same_shape(a, b)?;
    let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
    let values = la
        .data
        .chunks_exact(la.h * la.w)
        .zip(lb.data.chunks_exact(lb.h * lb.w))
        .fold(vec![0.0; la.h * la.w], |mut acc, (ca, cb)| {
            for ((d, x), y) in acc.iter_mut().zip(ca).zip(cb) {
                *d += (x - y) * (x - y);
            }
            acc
        });
    Ok(DiffMap {
        h: la.h,
        w: la.w,
        values,
    })
}

/// Binary region of interest at image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
    pub part_id: usize,
}

impl RoiMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// ROI of a part for sample `sample` of `u`.
///
/// The summed membership of the part's clusters and every other cluster are
/// bilinearly resampled to `out_h × out_w`. A pixel is inside when the part
/// scores at least as high as every other cluster; on an exact tie the lower
/// id wins, the part being identified with its smallest member.
pub fn roi_mask(
    u: &MembershipTensor,
    sample: usize,
    members: &[usize],
    part_id: usize,
    out_h: usize,
    out_w: usize,
) -> Result<RoiMask> {
    let k = u.k();
    if members.is_empty() || members.iter().any(|&m| m >= k) {
        return Err(MetricsError::UnknownPart(format!(
            "part {part_id} members {members:?} not within {k} clusters"
        )));
    }
    if sample >= u.tensor.n() {
        return Err(MetricsError::ShapeMismatch(format!(
            "sample {sample} of {}",
            u.tensor.n()
        )));
    }
    let r = resample_bilinear(&u.tensor.sample(sample), out_h, out_w);
    let part_key = *members.iter().min().unwrap();
    let hw = out_h * out_w;
    let mut score = vec![0.0f64; hw];
    for &m in members {
        for (s, &v) in score.iter_mut().zip(r.plane(0, m)) {
            *s += v as f64;
        }
    }
    let mask = (0..hw)
        .map(|p| {
            (0..k).filter(|c| !members.contains(c)).all(|c| {
                let other = r.plane(0, c)[p] as f64;
                score[p] > other || (score[p] == other && part_key < c)
            })
        })
        .collect();
    Ok(RoiMask {
        h: out_h,
        w: out_w,
        mask,
        part_id,
    })
}

/// In/Out-MSE of one target/edited pair. A side with no pixels reports `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub in_mse: Option<f64>,
    pub out_mse: Option<f64>,
    pub roi_fraction: f64,
}

pub fn locality(target: &RgbImage, edited: &RgbImage, mask: &RoiMask) -> Result<LocalityReport> {
    same_shape(target, edited)?;
    if (mask.h, mask.w) != (target.height(), target.width()) {
        return Err(MetricsError::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.h,
            mask.w,
            target.height(),
            target.width()
        )));
    }
    let d = diff_map(target, edited)?;
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in d.values.iter().zip(&mask.mask) {
        if m {
            sum_in += v;
            n_in += 1;
        } else {
            sum_out += v;
            n_out += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(LocalityReport {
        in_mse: mean(sum_in, n_in),
        out_mse: mean(sum_out, n_out),
        roi_fraction: n_in as f64 / mask.mask.len().max(1) as f64,
    })
}

// ---------------------------------------------------------------------------
// Fréchet distance
// ---------------------------------------------------------------------------

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricsError::DimensionMismatch(d, cov.nrows()));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-6 * scale {
            return Err(MetricsError::NotPsd);
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        if SymmetricEigen::new(sym.clone()).eigenvalues.min() < -1e-8 * scale {
            return Err(MetricsError::NotPsd);
        }
        Ok(Self {
            mu: DVector::from_vec(mu),
            cov: sym,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased (n − 1) covariance, symmetrized.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(MetricsError::TooFewSamples(features.len()));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(MetricsError::DimensionMismatch(d, bad.len()));
    }
    let n = features.len() as f64;
    let mut mu = DVector::<f64>::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(f) - &mu;
        cov.ger(1.0, &x, &x, 1.0);
    }
    cov /= n - 1.0;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mu, cov })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`, clamped at 0.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(MetricsError::DimensionMismatch(s1.dim(), s2.dim()));
    }
    let mean_term = (&s1.mu - &s2.mu).norm_squared();
    let root1 = psd_sqrt(&s1.cov);
    let inner = &root1 * &s2.cov * &root1;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    Ok((mean_term + s1.cov.trace() + s2.cov.trace() - 2.0 * cross).max(0.0))
}

/// Maps an image to a feature vector for distribution comparison.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Vec<f64>;
}

/// Average-pools each channel onto a `grid × grid` lattice; 8 gives D = 192.
#[derive(Debug, Clone, Copy)]
pub struct PooledPixels {
    pub grid: usize,
}

impl Default for PooledPixels {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl FeatureExtractor for PooledPixels {
    fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn extract(&self, image: &RgbImage) -> Vec<f64> {
        let (h, w, g) = (image.height(), image.width(), self.grid);
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            let plane = image.channel(c);
            for gy in 0..g {
                let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
                for gx in 0..g {
                    let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += plane[y * w + x] as f64;
                        }
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }
}

/// Fréchet distance between two image sets under a feature extractor.
pub fn frechet_between(a: &[RgbImage], b: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let fa: Vec<Vec<f64>> = a.iter().map(|i| extractor.extract(i)).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(|i| extractor.extract(i)).collect();
    frechet_distance(&gaussian_stats(&fa)?, &gaussian_stats(&fb)?)
}
