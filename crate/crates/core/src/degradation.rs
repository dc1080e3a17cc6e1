//! Randomised, shuffled degradation pipeline producing LR inputs from HR
//! patches: blur, bicubic downsampling, additive Gaussian noise and an 8x8
//! block-DCT compression proxy, applied in a per-recipe order.
//!
//! A [`DegradationRecipe`] fully determines the output for a given input.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImagePatch};
use crate::math;
use crate::resample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    Blur,
    Downsample,
    Noise,
    Compression,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Blur, Stage::Downsample, Stage::Noise, Stage::Compression];
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum BlurKernel {
    GaussianIso { sigma: f64 },
    GaussianAniso { sigma_x: f64, sigma_y: f64, theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlurSpec {
    pub kernel: BlurKernel,
    /// Odd kernel side length.
    pub size: usize,
}

impl BlurSpec {
    /// Normalised `size x size` kernel weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.size / 2) as isize;
        let mut k = Vec::with_capacity(self.size * self.size);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (dx as f64, dy as f64);
                let v = match self.kernel {
                    BlurKernel::GaussianIso { sigma } => math::exp(-(x * x + y * y) / (2.0 * sigma * sigma)),
                    BlurKernel::GaussianAniso { sigma_x, sigma_y, theta } => {
                        let (c, s) = (math::cos(theta), math::sin(theta));
                        let u = c * x + s * y;
                        let v = -s * x + c * y;
                        math::exp(-(u * u / (2.0 * sigma_x * sigma_x) + v * v / (2.0 * sigma_y * sigma_y)))
                    }
                };
                k.push(v);
            }
        }
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DegradationRecipe {
    pub blur: Option<BlurSpec>,
    pub scale: usize,
    pub noise_sigma: f64,
    pub jpeg_quality: Option<u8>,
    pub order: [Stage; 4],
    pub seed: u64,
}

impl DegradationRecipe {
    /// Only the downsampling stage is active.
    pub fn downsample_only(scale: usize) -> Self {
        DegradationRecipe { blur: None, scale, noise_sigma: 0.0, jpeg_quality: None, order: Stage::ALL, seed: 0 }
    }

    pub fn identity() -> Self {
        Self::downsample_only(1)
    }
}

/// Sampling ranges for [`sample_recipe`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RecipeRanges {
    pub scale: usize,
    pub blur_prob: f64,
    pub iso_prob: f64,
    pub sigma: (f64, f64),
    pub max_kernel_size: usize,
    pub noise_sigma: (f64, f64),
    pub compression_prob: f64,
    pub quality: (u8, u8),
}

impl Default for RecipeRanges {
    fn default() -> Self {
        RecipeRanges {
            scale: 2,
            blur_prob: 0.9,
            iso_prob: 0.5,
            sigma: (0.2, 2.0),
            max_kernel_size: 15,
            noise_sigma: (0.0, 0.1),
            compression_prob: 0.7,
            quality: (30, 95),
        }
    }
}

impl RecipeRanges {
    pub fn with_scale(scale: usize) -> Self {
        RecipeRanges { scale, ..Self::default() }
    }
}

fn kernel_size_for(sigma_max: f64, max_size: usize) -> usize {
    let s = 2 * (math::ceil(3.0 * sigma_max) as usize) + 1;
    s.clamp(3, max_size | 1)
}

/// Draws a recipe; identical seeds give identical recipes.
pub fn sample_recipe(seed: u64, ranges: &RecipeRanges) -> DegradationRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blur = rng.random_bool(ranges.blur_prob).then(|| {
        let (lo, hi) = ranges.sigma;
        if rng.random_bool(ranges.iso_prob) {
            let sigma = rng.random_range(lo..=hi);
            BlurSpec { kernel: BlurKernel::GaussianIso { sigma }, size: kernel_size_for(sigma, ranges.max_kernel_size) }
        } else {
            let sigma_x = rng.random_range(lo..=hi);
            let sigma_y = rng.random_range(lo..=hi);
            let theta = rng.random_range(0.0..core::f64::consts::PI);
            BlurSpec {
                kernel: BlurKernel::GaussianAniso { sigma_x, sigma_y, theta },
                size: kernel_size_for(sigma_x.max(sigma_y), ranges.max_kernel_size),
            }
        }
    });
    let noise_sigma = rng.random_range(ranges.noise_sigma.0..=ranges.noise_sigma.1);
    let jpeg_quality =
        rng.random_bool(ranges.compression_prob).then(|| rng.random_range(ranges.quality.0..=ranges.quality.1));
    let mut order = Stage::ALL;
    order.shuffle(&mut rng);
    DegradationRecipe { blur, scale: ranges.scale, noise_sigma, jpeg_quality, order, seed: rng.random() }
}

/// Applies `recipe` to `hr`. Output dimensions are `hr / scale`, values in `[0, 1]`.
pub fn degrade(hr: &ImagePatch, recipe: &DegradationRecipe) -> Result<ImagePatch> {
    if recipe.scale == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    for (dim, v) in [("height", hr.height()), ("width", hr.width())] {
        if v % recipe.scale != 0 {
            return Err(Error::NotDivisible { dim, value: v, factor: recipe.scale });
        }
    }
    if !(0.0..=1.0).contains(&recipe.noise_sigma) {
        return Err(Error::InvalidArgument("noise sigma outside [0, 1]".into()));
    }
    let mut img = hr.clone();
    for stage in recipe.order {
        img = match stage {
            Stage::Blur => match &recipe.blur {
                Some(spec) => blur(&img, spec)?,
                None => img,
            },
            Stage::Downsample => resample::downscale(&img, recipe.scale)?,
            Stage::Noise => {
                if recipe.noise_sigma > 0.0 {
                    add_noise(&img, recipe.noise_sigma, recipe.seed)
                } else {
                    img
                }
            }
            Stage::Compression => match recipe.jpeg_quality {
                Some(q) => compress(&img, q)?,
                None => img,
            },
        };
    }
    Ok(img.clamped())
}

/// Convolves every channel with the blur kernel, symmetric borders.
pub fn blur(img: &ImagePatch, spec: &BlurSpec) -> Result<ImagePatch> {
    if spec.size.is_multiple_of(2) {
        return Err(Error::InvalidArgument("blur kernel size must be odd".into()));
    }
    let k = spec.weights();
    let r = (spec.size / 2) as isize;
    let (c, h, w) = img.dims();
    let mut out = ImagePatch::new(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = reflect_index(y as isize + dy, h);
                    for dx in -r..=r {
                        let xx = reflect_index(x as isize + dx, w);
                        acc += k[((dy + r) as usize) * spec.size + (dx + r) as usize] * img.get(ch, yy, xx);
                    }
                }
                out.set(ch, y, x, acc);
            }
        }
    }
    Ok(out)
}

fn add_noise(img: &ImagePatch, sigma: f64, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    out.clamped()
}

/// Luminance quantisation table of baseline JPEG, in 8-bit code values.
const QUANT_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantisation step multiplier; linear in quality, `(100 - q) / 50`.
pub fn compression_strength(quality: u8) -> f64 {
    (100.0 - quality as f64) / 50.0
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let alpha = if u == 0 { math::sqrt(1.0 / 8.0) } else { math::sqrt(2.0 / 8.0) };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * math::cos((2 * x + 1) as f64 * u as f64 * core::f64::consts::PI / 16.0);
        }
    }
    b
}

/// 8x8 block DCT quantisation of every channel; partial blocks are padded by
/// edge replication.
#[allow(clippy::needless_range_loop)]
pub fn compress(img: &ImagePatch, quality: u8) -> Result<ImagePatch> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument("quality must be in 1..=100".into()));
    }
    let strength = compression_strength(quality);
    if strength == 0.0 {
        return Ok(img.clone());
    }
    let basis = dct_basis();
    let (c, h, w) = img.dims();
    let mut out = img.clone();
    let mut block = [0.0; 64];
    let mut coef = [0.0; 64];
    let mut tmp = [0.0; 64];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = img.get(ch, (by + y).min(h - 1), (bx + x).min(w - 1));
                    }
                }
                // coef = B * block * B^T
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u * 8 + x] = (0..8).map(|y| basis[u][y] * block[y * 8 + x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        coef[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * basis[v][x]).sum();
                    }
                }
                for (i, cv) in coef.iter_mut().enumerate() {
                    let step = QUANT_TABLE[i] * strength / 255.0;
                    *cv = math::round(*cv / step) * step;
                }
                // block = B^T * coef * B
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y * 8 + v] = (0..8).map(|u| basis[u][y] * coef[u * 8 + v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y < h && bx + x < w {
                            let v: f64 = (0..8).map(|v| tmp[y * 8 + v] * basis[v][x]).sum();
                            out.set(ch, by + y, bx + x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out.clamped())
}

/// Anisotropic total variation `sum |dx| + |dy|` over all channels.
pub fn total_variation(img: &ImagePatch) -> f64 {
    let (c, h, w) = img.dims();
    let mut tv = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += math::abs(img.get(ch, y, x + 1) - img.get(ch, y, x));
                }
                if y + 1 < h {
                    tv += math::abs(img.get(ch, y + 1, x) - img.get(ch, y, x));
                }
            }
        }
    }
    tv
}

/// Helper for checking the stage-order coverage of sampled recipes.
pub fn order_index(order: &[Stage; 4]) -> usize {
    // Lehmer code of the permutation, in 0..24.
    let pos: Vec<usize> = order.iter().map(|s| Stage::ALL.iter().position(|t| t == s).unwrap_or(0)).collect();
    let mut idx = 0;
    let mut used = [false; 4];
    for (i, &p) in pos.iter().enumerate() {
        let smaller = (0..p).filter(|&q| !used[q]).count();
        used[p] = true;
        idx = idx * (4 - i) + smaller;
    }
    idx
}
