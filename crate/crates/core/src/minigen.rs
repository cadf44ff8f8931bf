//! A miniature style-based generator.
//!
//! The network follows the style mechanism of StyleGAN at desk scale: a
//! mapping network turns `z` into `w`, a per-layer affine map turns `w` into
//! per-channel scales `sigma_l`, and the synthesis network starts from a
//! learned constant. Layer `l` consumes features `X_l` (the capture for that
//! layer): it normalizes each channel, multiplies channel `c` by
//! `sigma_l[c]`, applies a reflect-padded 3x3 convolution and a leaky
//! rectifier, then upsamples when the next layer is at a higher resolution.
//! The last layer feeds a 1x1 projection to RGB.
//!
//! Weights are stored as raw `N(0, 0.02)` draws and rescaled by
//! `1 / (0.02 * sqrt(fan_in))` when the network is built (the equalized
//! learning-rate parameterization), so activations keep unit scale.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbImage;
use crate::ndio::{ActivationTensor, Array, NdioError, Tensor4};

pub const LATENT_DIM: usize = 64;
pub const INIT_STD: f32 = 0.02;
pub const LEAKY_SLOPE: f32 = 0.2;
/// Index of the first 32x32 layer in the default plan.
pub const DEFAULT_BASE_LAYER: usize = 5;

const NORM_EPS: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Array(#[from] NdioError),
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

/// Spatial size and channel width of the features entering one styled layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub plan: Vec<LayerSpec>,
}

impl GeneratorConfig {
    /// The fixed seven-layer plan producing 3x32x32 images.
    pub fn new(seed: u64) -> Self {
        let resolutions = [4, 8, 8, 16, 16, 32, 32];
        let widths = [64, 64, 64, 64, 48, 48, 32];
        Self {
            seed,
            latent_dim: LATENT_DIM,
            plan: resolutions
                .iter()
                .zip(widths)
                .map(|(&resolution, channels)| LayerSpec { resolution, channels })
                .collect(),
        }
    }

    /// A custom plan, intended for small test networks.
    pub fn with_plan(seed: u64, latent_dim: usize, plan: Vec<LayerSpec>) -> Self {
        assert!(!plan.is_empty(), "plan needs at least one layer");
        for pair in plan.windows(2) {
            let ratio = pair[1].resolution / pair[0].resolution;
            assert!(
                pair[1].resolution % pair[0].resolution == 0 && (ratio == 1 || ratio == 2),
                "each layer keeps or doubles the resolution"
            );
        }
        assert!(plan[0].resolution >= 2, "reflect padding needs at least 2x2");
        Self { seed, latent_dim, plan }
    }

    pub fn output_resolution(&self) -> usize {
        self.plan.last().unwrap().resolution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    /// Standard-normal latent drawn from a seeded stream.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateLatent(pub Vec<f32>);

/// Per-layer style scales, `sigma[l][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSet {
    pub sigma: Vec<Vec<f32>>,
}

impl StyleSet {
    pub fn layers(&self) -> usize {
        self.sigma.len()
    }

    /// Archive entries `sigma_l{l}`, one vector per layer.
    pub fn to_arrays(&self) -> BTreeMap<String, Array> {
        self.sigma
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let a = Array::new(vec![s.len()], s.clone()).expect("finite style");
                (format!("sigma_l{l}"), a)
            })
            .collect()
    }

    /// Inverse of [`StyleSet::to_arrays`]. Layers must be numbered `0..L` without gaps.
    pub fn from_arrays(arrays: &BTreeMap<String, Array>) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (name, a) in arrays {
            if let Some(l) = name.strip_prefix("sigma_l").and_then(|s| s.parse::<usize>().ok()) {
                if a.shape().len() != 1 {
                    return Err(GeneratorError::ShapeMismatch(format!(
                        "{name} has shape {:?}, expected a vector",
                        a.shape()
                    )));
                }
                layers.insert(l, a.data().to_vec());
            }
        }
        if let Some(gap) = (0..layers.len()).find(|l| !layers.contains_key(l)) {
            return Err(GeneratorError::ShapeMismatch(format!(
                "style archive lacks sigma_l{gap}"
            )));
        }
        Ok(Self {
            sigma: layers.into_values().collect(),
        })
    }
}

/// Fully connected layer with row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

/// Two dense layers, each followed by a leaky rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub layers: [Dense; 2],
}

impl MappingNetwork {
    pub fn apply(&self, z: &[f32]) -> Vec<f32> {
        let mut h = z.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h);
            h.iter_mut().for_each(|v| *v = leaky(*v));
        }
        h
    }
}

/// 3x3 convolution weights laid out `out × in × 3 × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3 {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    raw: Vec<f32>,
    constant: Vec<f32>,
    mapping: MappingNetwork,
    styles: Vec<Dense>,
    convs: Vec<Conv3>,
    to_rgb: Dense,
}

#[inline]
fn leaky(v: f32) -> f32 {
    if v >= 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

struct WeightStream {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
    raw: Vec<f32>,
}

impl WeightStream {
    fn draw(&mut self, count: usize, gain: f32) -> Vec<f32> {
        (0..count)
            .map(|_| {
                let v = self.normal.sample(&mut self.rng);
                self.raw.push(v);
                v * gain
            })
            .collect()
    }
}

fn equalized_gain(fan_in: usize) -> f32 {
    1.0 / (INIT_STD * (fan_in as f32).sqrt())
}

/// Draw all weights from the seeded stream in a fixed order: constant input,
/// mapping layers, then per layer its style affine and convolution, then the
/// RGB projection.
pub fn build_generator(config: GeneratorConfig) -> Generator {
    let mut stream = WeightStream {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        normal: Normal::new(0.0, INIT_STD).unwrap(),
        raw: Vec::new(),
    };
    let d = config.latent_dim;
    let plan = &config.plan;
    let first = plan[0];
    let last = *plan.last().unwrap();

    let constant = stream.draw(first.channels * first.resolution * first.resolution, 1.0 / INIT_STD);
    let mapping = MappingNetwork {
        layers: [0, 1].map(|_| Dense {
            inputs: d,
            outputs: d,
            weight: stream.draw(d * d, equalized_gain(d)),
            bias: vec![0.0; d],
        }),
    };

    let mut styles = Vec::with_capacity(plan.len());
    let mut convs = Vec::with_capacity(plan.len());
    for (l, spec) in plan.iter().enumerate() {
        styles.push(Dense {
            inputs: d,
            outputs: spec.channels,
            weight: stream.draw(spec.channels * d, equalized_gain(d)),
            bias: vec![1.0; spec.channels],
        });
        let outputs = plan.get(l + 1).unwrap_or(&last).channels;
        convs.push(Conv3 {
            inputs: spec.channels,
            outputs,
            weight: stream.draw(outputs * spec.channels * 9, equalized_gain(spec.channels * 9)),
        });
    }
    let to_rgb = Dense {
        inputs: last.channels,
        outputs: 3,
        weight: stream.draw(3 * last.channels, equalized_gain(last.channels)),
        bias: vec![0.0; 3],
    };

    Generator {
        config,
        raw: stream.raw,
        constant,
        mapping,
        styles,
        convs,
        to_rgb,
    }
}

/// Output of one synthesis pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub image: RgbImage,
    pub captures: BTreeMap<usize, ActivationTensor>,
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.config.plan
    }

    pub fn num_layers(&self) -> usize {
        self.config.plan.len()
    }

    /// All raw draws in traversal order.
    pub fn raw_weights(&self) -> &[f32] {
        &self.raw
    }

    /// Sum of raw weights in f64; a cheap fingerprint for regression fixtures.
    pub fn weight_checksum(&self) -> f64 {
        self.raw.iter().map(|&v| v as f64).sum()
    }

    pub fn constant_input(&self) -> &[f32] {
        &self.constant
    }
    pub fn mapping(&self) -> &MappingNetwork {
        &self.mapping
    }
    pub fn style_affine(&self, layer: usize) -> &Dense {
        &self.styles[layer]
    }
    pub fn conv(&self, layer: usize) -> &Conv3 {
        &self.convs[layer]
    }
    pub fn to_rgb(&self) -> &Dense {
        &self.to_rgb
    }

    pub fn map_latent(&self, z: &LatentVector) -> IntermediateLatent {
        IntermediateLatent(self.mapping.apply(&z.0))
    }

    pub fn styles_from_w(&self, w: &IntermediateLatent) -> StyleSet {
        StyleSet {
            sigma: self.styles.iter().map(|a| a.apply(&w.0)).collect(),
        }
    }

    pub fn styles_for_seed(&self, seed: u64) -> StyleSet {
        let z = LatentVector::from_seed(seed, self.config.latent_dim);
        self.styles_from_w(&self.map_latent(&z))
    }

    pub fn check_styles(&self, styles: &StyleSet) -> Result<()> {
        if styles.layers() != self.num_layers() {
            return Err(GeneratorError::ShapeMismatch(format!(
                "{} style layers for a {}-layer generator",
                styles.layers(),
                self.num_layers()
            )));
        }
        for (l, (s, spec)) in styles.sigma.iter().zip(&self.config.plan).enumerate() {
            if s.len() != spec.channels {
                return Err(GeneratorError::ShapeMismatch(format!(
                    "layer {l}: {} style values for {} channels",
                    s.len(),
                    spec.channels
                )));
            }
        }
        Ok(())
    }

    pub fn synthesize(&self, styles: &StyleSet, capture_layers: &BTreeSet<usize>) -> Result<RenderResult> {
        self.check_styles(styles)?;
        let plan = &self.config.plan;
        let mut res = plan[0].resolution;
        let mut x = self.constant.clone();
        let mut captures = BTreeMap::new();

        for (l, spec) in plan.iter().enumerate() {
            if capture_layers.contains(&l) {
                let t = Tensor4::new([1, spec.channels, res, res], x.clone())?;
                captures.insert(l, ActivationTensor::new(t, l));
            }
            normalize_and_scale(&mut x, spec.channels, res * res, &styles.sigma[l]);
            let mut y = conv3x3_reflect(&x, &self.convs[l], res);
            y.iter_mut().for_each(|v| *v = leaky(*v));
            match plan.get(l + 1) {
                Some(next) if next.resolution == 2 * res => {
                    x = upsample_nearest(&y, self.convs[l].outputs, res);
                    res *= 2;
                }
                _ => x = y,
            }
        }

        let hw = res * res;
        let c = self.to_rgb.inputs;
        let mut data = Vec::with_capacity(3 * hw);
        for o in 0..3 {
            let row = &self.to_rgb.weight[o * c..(o + 1) * c];
            let mut plane = vec![self.to_rgb.bias[o]; hw];
            for (i, &wgt) in row.iter().enumerate() {
                for (p, v) in plane.iter_mut().zip(&x[i * hw..(i + 1) * hw]) {
                    *p += wgt * v;
                }
            }
            data.extend(plane.into_iter().map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0)));
        }
        let image = RgbImage::new(res, res, data).expect("rgb shape");
        Ok(RenderResult { image, captures })
    }

    /// `synthesize(styles_from_w(map_latent(z)))`.
    pub fn render(&self, z: &LatentVector, capture_layers: &BTreeSet<usize>) -> RenderResult {
        let styles = self.styles_from_w(&self.map_latent(z));
        self.synthesize(&styles, capture_layers)
            .expect("styles derived from this generator")
    }

    pub fn render_seed(&self, seed: u64, capture_layers: &BTreeSet<usize>) -> RenderResult {
        self.render(&LatentVector::from_seed(seed, self.config.latent_dim), capture_layers)
    }

    /// Render one image per latent seed, stacking captures along the sample axis.
    /// The result does not depend on the number of worker threads.
    pub fn render_batch(
        &self,
        seeds: &[u64],
        capture_layers: &BTreeSet<usize>,
    ) -> (Vec<RgbImage>, BTreeMap<usize, ActivationTensor>) {
        let renders: Vec<RenderResult> = seeds.par_iter().map(|&s| self.render_seed(s, capture_layers)).collect();
        let mut captures = BTreeMap::new();
        for &l in capture_layers {
            if l >= self.num_layers() {
                continue;
            }
            let parts: Vec<Tensor4> = renders.iter().map(|r| r.captures[&l].tensor.clone()).collect();
            if let Ok(t) = Tensor4::concat(&parts) {
                captures.insert(l, ActivationTensor::new(t, l));
            }
        }
        (renders.into_iter().map(|r| r.image).collect(), captures)
    }
}

fn normalize_and_scale(x: &mut [f32], channels: usize, hw: usize, sigma: &[f32]) {
    for c in 0..channels {
        let plane = &mut x[c * hw..(c + 1) * hw];
        let mean = plane.iter().sum::<f32>() / hw as f32;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / hw as f32;
        let scale = sigma[c] / (var + NORM_EPS).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn conv3x3_reflect(x: &[f32], conv: &Conv3, res: usize) -> Vec<f32> {
    let hw = res * res;
    let pw = res + 2;
    // reflect-pad every input plane once
    let mut padded = vec![0.0f32; conv.inputs * pw * pw];
    for c in 0..conv.inputs {
        let src = &x[c * hw..(c + 1) * hw];
        let dst = &mut padded[c * pw * pw..(c + 1) * pw * pw];
        for py in 0..pw {
            let sy = reflect(py as isize - 1, res);
            for px in 0..pw {
                let sx = reflect(px as isize - 1, res);
                dst[py * pw + px] = src[sy * res + sx];
            }
        }
    }

    let mut out = vec![0.0f32; conv.outputs * hw];
    for o in 0..conv.outputs {
        let acc = &mut out[o * hw..(o + 1) * hw];
        for i in 0..conv.inputs {
            let plane = &padded[i * pw * pw..(i + 1) * pw * pw];
            let k = &conv.weight[(o * conv.inputs + i) * 9..(o * conv.inputs + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wgt = k[ky * 3 + kx];
                    for y in 0..res {
                        let row = &plane[(y + ky) * pw + kx..(y + ky) * pw + kx + res];
                        for (a, v) in acc[y * res..(y + 1) * res].iter_mut().zip(row) {
                            *a += wgt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample_nearest(x: &[f32], channels: usize, res: usize) -> Vec<f32> {
    let r2 = 2 * res;
    let mut out = vec![0.0f32; channels * r2 * r2];
    for c in 0..channels {
        let src = &x[c * res * res..(c + 1) * res * res];
        let dst = &mut out[c * r2 * r2..(c + 1) * r2 * r2];
        for y in 0..r2 {
            for xx in 0..r2 {
                dst[y * r2 + xx] = src[(y / 2) * res + xx / 2];
            }
        }
    }
    out
}
