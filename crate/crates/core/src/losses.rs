//! Training objectives.
//!
//! Reductions: image losses average over elements, except that ESU and UDL
//! first sum the absolute residual over colour channels and then average
//! over pixels. The codebook loss averages the channel-summed squared error
//! over latent cells and sums the Gram difference over its `C x C` entries,
//! averaged over the batch.
//!
//! Each loss exists on the tape (`*_var`) for training and as a plain
//! function of images for evaluation and tests; the plain form evaluates
//! the tape form on constants.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::codebook::LatentGrid;
use crate::error::{shape_err, Error, Result};
use crate::image::ImagePatch;
use crate::math;
use crate::networks::{to_tokens, FeatureExtractor};
use crate::tensor::Tensor;

/// Clamp applied to discriminator probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    /// Gram-matrix term.
    pub alpha: f64,
    /// Latent L2 term.
    pub beta: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.25, adversarial: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.adversarial >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Single-channel per-pixel log-variance map.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(ImagePatch);

impl UncertaintyMap {
    pub fn new(s: ImagePatch) -> Result<Self> {
        if s.channels() != 1 {
            return Err(shape_err("UncertaintyMap", &[1], &[s.channels()]));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("uncertainty map"));
        }
        Ok(UncertaintyMap(s))
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(ImagePatch::from_vec(1, height, width, values)?)
    }

    pub fn image(&self) -> &ImagePatch {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    /// `s - min(s)`; non-negative with minimum exactly zero.
    pub fn shifted(&self) -> UncertaintyMap {
        let min = self.values().iter().copied().fold(f64::INFINITY, f64::min);
        UncertaintyMap(
            ImagePatch::from_vec(1, self.0.height(), self.0.width(), self.values().iter().map(|v| v - min).collect())
                .expect("same size"),
        )
    }
}

/// `s - min(s)` per image of an `[N,1,H,W]` batch.
pub fn shift_per_image(s: &Tensor) -> Result<Tensor> {
    let shape = s.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(shape_err("shift_per_image", &[0, 1, 0, 0], shape));
    }
    let hw = shape[2] * shape[3];
    let mut out = s.clone();
    for img in out.data_mut().chunks_mut(hw) {
        let min = img.iter().copied().fold(f64::INFINITY, f64::min);
        img.iter_mut().for_each(|v| *v -= min);
    }
    Ok(out)
}

fn same_shape(a: Var<'_>, b: Var<'_>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(context, &a.shape(), &b.shape()));
    }
    Ok(())
}

fn check_map(x: Var<'_>, s: Var<'_>, context: &'static str) -> Result<()> {
    let (xs, ss) = (x.shape(), s.shape());
    if ss.len() != 4 || xs.len() != 4 || ss[0] != xs[0] || ss[1] != 1 || ss[2..] != xs[2..] {
        return Err(shape_err(context, &[xs[0], 1, xs[2], xs[3]], &ss));
    }
    Ok(())
}

/// `[N,C,H,W] -> [N,1,H,W]` channel-summed absolute residual.
fn residual_map<'t>(x: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    x.sub(f)?.abs().sum_channels()
}

/// `mean_i [ exp(-s_i) r_i + 2 s_i ]`.
pub fn esu_var<'t>(x: Var<'t>, f: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, f, "esu_loss images")?;
    check_map(x, s, "esu_loss uncertainty map")?;
    let r = residual_map(x, f)?;
    Ok(s.scale(-1.0).exp().mul(r)?.add(s.scale(2.0))?.mean())
}

/// `mean_i [ s_hat_i r_i ]` with `s_hat` already shifted.
pub fn udl_var<'t>(x: Var<'t>, f: Var<'t>, s_hat: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, f, "udl_loss images")?;
    check_map(x, s_hat, "udl_loss uncertainty map")?;
    Ok(s_hat.mul(residual_map(x, f)?)?.mean())
}

pub fn l1_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(a, b, "l1_loss")?;
    Ok(a.sub(b)?.abs().mean())
}

pub fn perceptual_var<'t>(phi: &FeatureExtractor, hr: Var<'t>, sr: Var<'t>) -> Result<Var<'t>> {
    same_shape(hr, sr, "perceptual_loss")?;
    let tape = tape_of(hr);
    let a = phi.forward(tape, hr)?;
    let b = phi.forward(tape, sr)?;
    Ok(a.sub(b)?.square().mean())
}

fn tape_of<'t>(v: Var<'t>) -> &'t Tape {
    v.tape()
}

/// Squashed, clamped discriminator probabilities.
pub fn probabilities<'t>(logits: Var<'t>) -> Var<'t> {
    logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-(mean log D(real) + mean log(1 - D(fake)))`.
pub fn discriminator_var<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Result<Var<'t>> {
    let tape = tape_of(real_logits);
    let real = probabilities(real_logits).ln().mean();
    let fake = probabilities(fake_logits);
    let one = tape.constant(Tensor::full(&fake.shape(), 1.0));
    let fake = one.sub(fake)?.ln().mean();
    Ok(real.add(fake)?.scale(-1.0))
}

/// Non-saturating generator term `-mean log D(fake)`.
pub fn generator_var<'t>(fake_logits: Var<'t>) -> Var<'t> {
    probabilities(fake_logits).ln().mean().scale(-1.0)
}

/// Channel Gram matrices `[N,C,C]` normalised by `h * w`.
pub fn gram_var<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let s = z.shape();
    let tokens = to_tokens(z)?;
    Ok(tokens.transpose_last2()?.bmm(tokens)?.scale(1.0 / (s[2] * s[3]) as f64))
}

/// `beta * mean_cells |z - z_gt|^2 + alpha * mean_batch |G(z) - G(z_gt)|_F^2`.
pub fn codebook_var<'t>(z: Var<'t>, z_gt: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    same_shape(z, z_gt, "codebook_loss latents")?;
    let n = z.shape()[0] as f64;
    let l2 = z.sub(z_gt)?.square().sum_channels()?.mean();
    let gram = gram_var(z)?.sub(gram_var(z_gt)?)?.square().sum().scale(1.0 / n);
    l2.scale(weights.beta).add(gram.scale(weights.alpha))
}

fn eval<'t>(tape: &'t Tape, build: impl FnOnce(&'t Tape) -> Result<Var<'t>>) -> Result<f64> {
    let v = build(tape)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss value"));
    }
    Ok(v)
}

fn map_tensor(s: &UncertaintyMap) -> Tensor {
    s.image().to_tensor()
}

pub fn esu_loss(x: &ImagePatch, f: &ImagePatch, s: &UncertaintyMap) -> Result<f64> {
    eval(&Tape::new(), |t| esu_var(t.constant(x.to_tensor()), t.constant(f.to_tensor()), t.constant(map_tensor(s))))
}

/// UDL with `s` shifted internally by its minimum.
pub fn udl_loss(x: &ImagePatch, f: &ImagePatch, s: &UncertaintyMap) -> Result<f64> {
    let s_hat = s.shifted();
    eval(&Tape::new(), |t| {
        udl_var(t.constant(x.to_tensor()), t.constant(f.to_tensor()), t.constant(map_tensor(&s_hat)))
    })
}

pub fn l1_loss(hr: &ImagePatch, sr: &ImagePatch) -> Result<f64> {
    eval(&Tape::new(), |t| l1_var(t.constant(hr.to_tensor()), t.constant(sr.to_tensor())))
}

pub fn perceptual_loss(hr: &ImagePatch, sr: &ImagePatch, phi: &FeatureExtractor) -> Result<f64> {
    eval(&Tape::new(), |t| perceptual_var(phi, t.constant(hr.to_tensor()), t.constant(sr.to_tensor())))
}

/// Generator and discriminator losses from per-patch probabilities.
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; values outside
/// `(0, 1)` are rejected.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidArgument("empty discriminator output".into()));
    }
    if let Some(&p) = d_real.iter().chain(d_fake).find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Probability(p));
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&p| f(clamp(p))).sum::<f64>() / xs.len() as f64;
    let gen = -mean(d_fake, &math::ln);
    let disc = -(mean(d_real, &math::ln) + mean(d_fake, &|p| math::ln(1.0 - p)));
    Ok((gen, disc))
}

pub fn codebook_loss(z: &LatentGrid, z_gt: &LatentGrid, weights: &LossWeights) -> Result<f64> {
    if (z.height(), z.width(), z.dim()) != (z_gt.height(), z_gt.width(), z_gt.dim()) {
        return Err(shape_err(
            "codebook_loss latents",
            &[z_gt.height(), z_gt.width(), z_gt.dim()],
            &[z.height(), z.width(), z.dim()],
        ));
    }
    eval(&Tape::new(), |t| codebook_var(t.constant(z.to_nchw()), t.constant(z_gt.to_nchw()), weights))
}

/// Gaussian negative log-likelihood with per-pixel variance,
/// `mean_i [ |x_i - f_i|^2 / (2 sigma2_i) + ln(sigma2_i) / 2 ]`. Kept as a
/// reference point for the ESU loss; no training phase uses it.
pub fn gaussian_nll_reference(x: &[f64], f: &[f64], sigma2: &[f64]) -> Result<f64> {
    if x.len() != f.len() || x.len() != sigma2.len() || x.is_empty() {
        return Err(shape_err("gaussian_nll_reference", &[x.len()], &[f.len(), sigma2.len()]));
    }
    if sigma2.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument("variance must be positive".into()));
    }
    let total: f64 =
        x.iter().zip(f).zip(sigma2).map(|((a, b), v)| (a - b) * (a - b) / (2.0 * v) + 0.5 * math::ln(*v)).sum();
    Ok(total / x.len() as f64)
}

/// Uncertainty term of a stage objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Codebook + L1 + perceptual + adversarial + ESU.
    Stage1,
    /// Codebook + L1 + perceptual + adversarial + UDL.
    Stage2,
    /// Stage 2 without the uncertainty term (ablation baseline).
    Stage2Plain,
}

impl Objective {
    pub fn for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Objective::Stage1),
            2 => Ok(Objective::Stage2),
            _ => Err(Error::InvalidArgument(alloc::format!("unknown stage {stage}"))),
        }
    }
}

/// Unweighted loss components; `None` marks an absent term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossComponents<T> {
    pub codebook: Option<T>,
    pub l1: Option<T>,
    pub perceptual: Option<T>,
    pub adversarial: Option<T>,
    pub esu: Option<T>,
    pub udl: Option<T>,
}

impl<T: Copy> LossComponents<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> LossComponents<U> {
        LossComponents {
            codebook: self.codebook.map(&f),
            l1: self.l1.map(&f),
            perceptual: self.perceptual.map(&f),
            adversarial: self.adversarial.map(&f),
            esu: self.esu.map(&f),
            udl: self.udl.map(&f),
        }
    }

    /// `(weight, term)` pairs of the objective, failing on a missing term.
    fn weighted(&self, objective: Objective, adversarial_weight: f64) -> Result<Vec<(f64, T)>> {
        let need = |v: Option<T>, name: &'static str| v.ok_or(Error::MissingComponent(name));
        let mut terms = alloc::vec![
            (1.0, need(self.codebook, "codebook")?),
            (1.0, need(self.l1, "l1")?),
            (1.0, need(self.perceptual, "perceptual")?),
            (adversarial_weight, need(self.adversarial, "adversarial")?),
        ];
        match objective {
            Objective::Stage1 => terms.push((1.0, need(self.esu, "esu")?)),
            Objective::Stage2 => terms.push((1.0, need(self.udl, "udl")?)),
            Objective::Stage2Plain => {}
        }
        Ok(terms)
    }
}

/// Weighted stage total of plain component values.
pub fn stage_total(objective: Objective, components: &LossComponents<f64>, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let total = components.weighted(objective, weights.adversarial)?.into_iter().map(|(w, v)| w * v).sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFinite("stage total"));
    }
    Ok(total)
}

/// Weighted stage total on the tape.
pub fn stage_total_var<'t>(
    objective: Objective,
    components: &LossComponents<Var<'t>>,
    adversarial_weight: f64,
) -> Result<Var<'t>> {
    let mut terms = components.weighted(objective, adversarial_weight)?.into_iter();
    let (w, first) = terms.next().expect("at least four terms");
    let mut total = first.scale(w);
    for (w, v) in terms {
        total = total.add(v.scale(w))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn px(v: &[f64]) -> ImagePatch {
        ImagePatch::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    fn map(v: &[f64]) -> UncertaintyMap {
        UncertaintyMap::from_values(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn esu_single_pixel_values() {
        let (x, f) = (px(&[0.5]), px(&[0.0]));
        assert!((esu_loss(&x, &f, &map(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let ln2 = core::f64::consts::LN_2;
        let want = 0.25 + 2.0 * ln2;
        assert!((esu_loss(&x, &f, &map(&[ln2])).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.6363).abs() < 1e-4);
    }

    #[test]
    fn esu_sums_channels_before_weighting() {
        let x = ImagePatch::from_vec(3, 1, 1, alloc::vec![0.1, 0.2, 0.3]).unwrap();
        let f = ImagePatch::new(3, 1, 1);
        let got = esu_loss(&x, &f, &map(&[0.0])).unwrap();
        assert!((got - 0.6).abs() < 1e-12);
    }

    #[test]
    fn udl_hand_example_and_constant_map() {
        let (x, f) = (px(&[1.0, 1.0]), px(&[0.0, 0.0]));
        assert_eq!(udl_loss(&x, &f, &map(&[0.0, 2.0])).unwrap(), 1.0);
        assert_eq!(udl_loss(&x, &f, &map(&[0.7, 0.7])).unwrap(), 0.0);
        assert_eq!(udl_loss(&x, &f, &map(&[3.0, 5.0])).unwrap(), 1.0);
    }

    #[test]
    fn shift_per_image_uses_each_minimum() {
        let s = Tensor::from_vec(&[2, 1, 1, 2], alloc::vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        assert_eq!(shift_per_image(&s).unwrap().data(), &[0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn l1_values() {
        let a = ImagePatch::filled(3, 4, 4, 0.3);
        let b = ImagePatch::filled(3, 4, 4, 0.4);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(l1_loss(&a, &ImagePatch::new(3, 4, 5)), Err(Error::Shape { .. })));
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_equal() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let phi = FeatureExtractor::seeded(7, [8, 16, 16]);
        let a = crate::textures::Texture::sample(&mut r, 8).render(8, 8);
        let b = crate::textures::Texture::sample(&mut r, 8).render(8, 8);
        assert_eq!(perceptual_loss(&a, &a, &phi).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &phi).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&b, &a, &phi).unwrap());
    }

    #[test]
    fn adversarial_reference_values() {
        let (_, d) = adversarial_losses(&[0.5], &[0.5]).unwrap();
        assert!((d - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let (_, d) = adversarial_losses(&[1.0 - 1e-12], &[1e-12]).unwrap();
        assert!(d.abs() < 4e-6);
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let (g, _) = adversarial_losses(&[0.5], &[p]).unwrap();
            assert!(g < prev);
            prev = g;
        }
        assert!(matches!(adversarial_losses(&[1.0], &[0.5]), Err(Error::Probability(_))));
    }

    #[test]
    fn adversarial_tape_matches_plain() {
        let tape = Tape::new();
        let real = tape.constant(Tensor::from_vec(&[1, 1, 1, 2], alloc::vec![0.3, -1.2]).unwrap());
        let fake = tape.constant(Tensor::from_vec(&[1, 1, 1, 2], alloc::vec![0.8, 2.0]).unwrap());
        let d = discriminator_var(real, fake).unwrap().item();
        let g = generator_var(fake).item();
        let p = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (pg, pd) = adversarial_losses(&[p(0.3), p(-1.2)], &[p(0.8), p(2.0)]).unwrap();
        assert!((d - pd).abs() < 1e-12 && (g - pg).abs() < 1e-12);
    }

    #[test]
    fn codebook_hand_example() {
        let z = LatentGrid::new(1, 1, 2, alloc::vec![1.0, 0.0]).unwrap();
        let gt = LatentGrid::new(1, 1, 2, alloc::vec![0.0, 1.0]).unwrap();
        let w = LossWeights::default();
        assert_eq!(codebook_loss(&z, &gt, &w).unwrap(), 2.5);
        assert_eq!(codebook_loss(&z, &z, &w).unwrap(), 0.0);
    }

    #[test]
    fn gram_ignores_cell_order() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let z = LatentGrid::random(2, 2, 3, &mut r);
        let gt = LatentGrid::random(2, 2, 3, &mut r);
        let mut perm = Vec::new();
        for cell in [3, 1, 0, 2] {
            perm.extend_from_slice(z.cell(cell));
        }
        let zp = LatentGrid::new(2, 2, 3, perm).unwrap();
        let gram_only = LossWeights { alpha: 1.0, beta: 0.0, adversarial: 0.0 };
        let a = codebook_loss(&z, &gt, &gram_only).unwrap();
        let b = codebook_loss(&zp, &gt, &gram_only).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stage_totals() {
        let zero = LossComponents {
            codebook: Some(0.0),
            l1: Some(0.0),
            perceptual: Some(0.0),
            adversarial: Some(0.0),
            esu: Some(0.0),
            udl: Some(0.0),
        };
        let w = LossWeights::default();
        assert_eq!(stage_total(Objective::Stage1, &zero, &w).unwrap(), 0.0);
        let c = LossComponents { adversarial: Some(2.0), esu: Some(0.7), udl: Some(0.2), ..zero };
        assert!((stage_total(Objective::Stage1, &c, &w).unwrap() - (0.2 + 0.7)).abs() < 1e-15);
        let d1 = stage_total(Objective::Stage1, &c, &w).unwrap() - stage_total(Objective::Stage2, &c, &w).unwrap();
        assert!((d1 - 0.5).abs() < 1e-15);
        let missing = LossComponents { esu: None, ..c };
        assert!(matches!(stage_total(Objective::Stage1, &missing, &w), Err(Error::MissingComponent("esu"))));
        assert!(stage_total(Objective::Stage2Plain, &missing, &w).is_ok());
    }

    #[test]
    fn gaussian_reference_at_unit_variance() {
        let v = gaussian_nll_reference(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }
}
