//! Toy-scale encoders, decoder, uncertainty head, fusion blocks,
//! discriminator and the frozen perceptual feature extractor.
//!
//! Every network is a function of a [`Binder`] so the same graph serves
//! training (trainable leaves) and inference (all constants). Parameter
//! names are `<component>.<layer>.{w,b}`.
//!
//! Shapes, for an HR canvas `H x W`:
//!
//! ```text
//! encoder   [N,3,H,W]        -> [N,n_z,H/4,W/4]
//! decoder   [N,n_z,H/4,W/4]  -> image [N,3,H,W], features [N,c,H,W]
//! head      [N,c,H,W]        -> s [N,1,H,W]
//! ```
//!
//! The LQ encoder sees the LR image bicubically upsampled to `H x W`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::codebook::{quantize_nearest, topk_candidates, Codebook, LatentGrid, MatchResult};
use crate::error::{shape_err, Error, Result};
use crate::image::ImagePatch;
use crate::math;
use crate::nn::{conv_weight, Binder, ParamStore};
use crate::resample;
use crate::tensor::Tensor;

/// Spatial reduction of both encoders.
pub const DOWNSAMPLE: usize = 4;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Encoder widths at full and half resolution.
    pub encoder_widths: [usize; 2],
    /// Decoder widths at latent and higher resolutions.
    pub decoder_widths: [usize; 2],
    pub uncertainty_hidden: usize,
    /// Align-Attention key dimension `d_k`.
    pub key_dim: usize,
    pub discriminator_widths: [usize; 2],
    pub feature_widths: [usize; 3],
    pub feature_seed: u64,
    pub scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            codebook_size: 64,
            latent_dim: 16,
            encoder_widths: [16, 32],
            decoder_widths: [32, 16],
            uncertainty_hidden: 8,
            key_dim: 32,
            discriminator_widths: [16, 32],
            feature_widths: [8, 16, 16],
            feature_seed: 0x5eed,
            scale: 2,
        }
    }
}

/// Lifecycle tag of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Pretrain,
    Stage1,
    Stage2,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Stage1 => 1,
            Phase::Stage2 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Phase> {
        match tag {
            0 => Some(Phase::Pretrain),
            1 => Some(Phase::Stage1),
            2 => Some(Phase::Stage2),
            _ => None,
        }
    }
}

/// Which stage-2 modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stage2Modules {
    /// `Some(k)` enables Top-k matching with candidate fusion.
    pub topk: Option<usize>,
    pub align_attention: bool,
}

fn conv<'t>(b: &Binder<'t, '_>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    x.conv2d(w, Some(bias), stride, pad)
}

fn insert_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) {
    store.insert(format!("{name}.w"), conv_weight(cout, cin, k, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn check_divisible(shape: &[usize], factor: usize) -> Result<()> {
    if !shape[2].is_multiple_of(factor) {
        return Err(Error::NotDivisible { dim: "height", value: shape[2], factor });
    }
    if !shape[3].is_multiple_of(factor) {
        return Err(Error::NotDivisible { dim: "width", value: shape[3], factor });
    }
    Ok(())
}

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
    let [w0, w1] = cfg.encoder_widths;
    insert_conv(store, &format!("{prefix}.conv0"), w0, 3, 3, rng);
    insert_conv(store, &format!("{prefix}.conv1"), w1, w0, 3, rng);
    insert_conv(store, &format!("{prefix}.conv2"), w1, w1, 3, rng);
    insert_conv(store, &format!("{prefix}.out"), cfg.latent_dim, w1, 1, rng);
}

/// `[N,3,H,W] -> [N,n_z,H/4,W/4]`.
pub fn encode<'t>(b: &Binder<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err("encoder input", &[s.first().copied().unwrap_or(0), 3, 0, 0], &s));
    }
    check_divisible(&s, DOWNSAMPLE)?;
    let h = conv(b, &format!("{prefix}.conv0"), x, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(b, &format!("{prefix}.conv1"), h, 2, 1)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(b, &format!("{prefix}.conv2"), h, 2, 1)?.leaky_relu(LEAKY_SLOPE);
    conv(b, &format!("{prefix}.out"), h, 1, 0)
}

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let [w0, w1] = cfg.decoder_widths;
    insert_conv(store, "dec.conv0", w0, cfg.latent_dim, 3, rng);
    insert_conv(store, "dec.conv1", w1, w0, 3, rng);
    insert_conv(store, "dec.conv2", w1, w1, 3, rng);
    insert_conv(store, "dec.out", 3, w1, 3, rng);
}

pub struct Decoded<'t> {
    pub image: Var<'t>,
    /// Last hidden activations at output resolution.
    pub features: Var<'t>,
}

/// `[N,n_z,h,w] -> [N,3,4h,4w]`.
pub fn decode<'t>(b: &Binder<'t, '_>, z: Var<'t>) -> Result<Decoded<'t>> {
    let h = conv(b, "dec.conv0", z, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(b, "dec.conv1", h.upsample2x()?, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    let features = conv(b, "dec.conv2", h.upsample2x()?, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    let image = conv(b, "dec.out", features, 1, 1)?;
    Ok(Decoded { image, features })
}

pub fn init_uncertainty_head<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    insert_conv(store, "unc_head.conv0", cfg.uncertainty_hidden, cfg.decoder_widths[1], 3, rng);
    insert_conv(store, "unc_head.out", 1, cfg.uncertainty_hidden, 3, rng);
    // Start near the optimum for small residuals instead of at s = 0.
    store.insert("unc_head.out.b", Tensor::full(&[1], -3.0));
    let w = store.get_mut("unc_head.out.w").expect("just inserted");
    *w = w.map(|v| 0.1 * v);
}

/// Decoder features to the per-pixel log-variance `s`.
pub fn uncertainty_head<'t>(b: &Binder<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
    let h = conv(b, "unc_head.conv0", features, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    conv(b, "unc_head.out", h, 1, 1)
}

/// 1x1 fusion weights that pass the quantised half of the concatenation.
pub fn init_concat_fusion(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) {
    let n = cfg.latent_dim;
    let mut w = Tensor::zeros(&[n, 2 * n, 1, 1]);
    for o in 0..n {
        w.data_mut()[o * 2 * n + n + o] = 1.0;
    }
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[n]));
}

/// 1x1 conv of `concat(lq, quantised)`.
pub fn concat_fusion<'t>(b: &Binder<'t, '_>, prefix: &str, lq: Var<'t>, quantised: Var<'t>) -> Result<Var<'t>> {
    conv(b, prefix, lq.concat(quantised)?, 1, 0)
}

/// `[N,C,H,W] -> [N,H*W,C]`.
pub fn to_tokens<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose_last2()
}

/// `[N,H*W,C] -> [N,C,H,W]`.
pub fn from_tokens<'t>(t: Var<'t>, height: usize, width: usize) -> Result<Var<'t>> {
    let s = t.shape();
    t.transpose_last2()?.reshape(&[s[0], s[2], height, width])
}

fn project<'t>(tokens: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let s = tokens.shape();
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != s[2] {
        return Err(shape_err("projection", &[s[2], 0], &ws));
    }
    tokens.reshape(&[s[0] * s[1], s[2]])?.matmul(w)?.reshape(&[s[0], s[1], ws[1]])
}

pub struct Attention<'t> {
    /// `[N, T, d_v]`.
    pub output: Var<'t>,
    /// `[N, T, S]`, rows sum to one.
    pub weights: Var<'t>,
}

/// `softmax((F_lq W_q)(F_hq W_k)^T / sqrt(d_k)) (F_hq W_v)` over token
/// sequences `f_lq: [N,T,C]` and `f_hq: [N,S,C]`.
pub fn align_attention<'t>(
    f_lq: Var<'t>,
    f_hq: Var<'t>,
    w_q: Var<'t>,
    w_k: Var<'t>,
    w_v: Var<'t>,
) -> Result<Attention<'t>> {
    let (sq, sk) = (f_lq.shape(), f_hq.shape());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(shape_err("align_attention tokens", &sq, &sk));
    }
    let d_k = w_k.shape()[1];
    if w_q.shape()[1] != d_k {
        return Err(shape_err("align_attention key dimension", &[sq[2], d_k], &w_q.shape()));
    }
    let q = project(f_lq, w_q)?;
    let k = project(f_hq, w_k)?;
    let v = project(f_hq, w_v)?;
    let weights = q.bmm(k.transpose_last2()?)?.scale(1.0 / math::sqrt(d_k as f64)).softmax_last();
    Ok(Attention { output: weights.bmm(v)?, weights })
}

/// Align-Attention projections plus a zero-initialised output projection
/// back to `n_z`, so the residual branch starts as an exact no-op.
pub fn init_align_attention<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let (c, d) = (cfg.latent_dim, cfg.key_dim);
    let std = 1.0 / math::sqrt(c as f64);
    store.insert("aa.wq", Tensor::randn(&[c, d], std, rng));
    store.insert("aa.wk", Tensor::randn(&[c, d], std, rng));
    store.insert("aa.wv", Tensor::randn(&[c, d], std, rng));
    store.insert("aa.wo", Tensor::zeros(&[d, c]));
}

/// Residual Align-Attention at the latent level: LQ latents query the
/// retrieved codes. Returns `[N,n_z,h,w]`.
pub fn align_residual<'t>(b: &Binder<'t, '_>, lq: Var<'t>, hq: Var<'t>) -> Result<Var<'t>> {
    let s = lq.shape();
    let att = align_attention(to_tokens(lq)?, to_tokens(hq)?, b.var("aa.wq")?, b.var("aa.wk")?, b.var("aa.wv")?)?;
    let out = project(att.output, b.var("aa.wo")?)?;
    from_tokens(out, s[2], s[3])
}

pub fn init_topk_fusion<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let c = cfg.latent_dim;
    let std = 1.0 / math::sqrt(c as f64);
    store.insert("topk.wq", Tensor::randn(&[c, c], std, rng));
    store.insert("topk.wk", Tensor::randn(&[c, c], std, rng));
    store.insert("topk.gate", Tensor::zeros(&[1]));
}

fn latent_grids(z: &Tensor) -> Result<Vec<LatentGrid>> {
    LatentGrid::unbatch(z)
}

/// Nearest-code quantisation of a latent batch with a straight-through
/// backward rule.
pub fn quantize_straight_through<'t>(z: Var<'t>, codebook: &Codebook) -> Result<(Var<'t>, Vec<MatchResult>)> {
    let grids = latent_grids(&z.value())?;
    let mut matches = Vec::with_capacity(grids.len());
    let mut quantised = Vec::with_capacity(grids.len());
    for g in &grids {
        let (m, q) = quantize_nearest(g, codebook)?;
        matches.push(m);
        quantised.push(q);
    }
    let zq = z.straight_through(LatentGrid::batch(&quantised)?)?;
    Ok((zq, matches))
}

/// Top-k retrieval, attention fusion of the candidates on the tape, and
/// re-quantisation of the fused vector. The straight-through rule routes
/// the gradient to both the LQ latent and the fusion parameters.
pub fn quantize_topk_straight_through<'t>(
    b: &Binder<'t, '_>,
    z: Var<'t>,
    codebook: &Codebook,
    k: usize,
) -> Result<(Var<'t>, Vec<MatchResult>)> {
    let tape = b.tape();
    let s = z.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cells = h * w;
    let m = n * cells;
    let grids = latent_grids(&z.value())?;
    let mut matches = Vec::with_capacity(n);
    let mut cands = Vec::with_capacity(m * k * c);
    let mut nearest = Vec::with_capacity(m * c);
    for g in &grids {
        let r = topk_candidates(g, codebook, k)?;
        for cell in 0..cells {
            for &j in r.candidates(cell) {
                cands.extend_from_slice(codebook.entry(j));
            }
            nearest.extend_from_slice(codebook.entry(r.candidates(cell)[0]));
        }
        matches.push(r);
    }
    let cands = tape.constant(Tensor::from_vec(&[m, k, c], cands)?);
    let nearest = tape.constant(Tensor::from_vec(&[m, c], nearest)?);
    let tokens = to_tokens(z)?.reshape(&[m, c])?;
    let q = tokens.matmul(b.var("topk.wq")?)?.reshape(&[m, 1, c])?;
    let keys = cands.reshape(&[m * k, c])?.matmul(b.var("topk.wk")?)?.reshape(&[m, k, c])?;
    let weights = q.bmm(keys.transpose_last2()?)?.scale(1.0 / math::sqrt(c as f64)).softmax_last();
    let attended = weights.bmm(cands)?.reshape(&[m, c])?;
    let gate = b.var("topk.gate")?.clamp_straight(0.0, 1.0);
    let fused = nearest.add(attended.sub(nearest)?.scale_by(gate)?)?;

    let mut codes = Vec::with_capacity(m * c);
    {
        let fv = fused.value();
        for (cell, f) in fv.data().chunks(c).enumerate() {
            let p = codebook.nearest(f).0;
            matches[cell / cells].indices[cell % cells] = p;
            codes.extend_from_slice(codebook.entry(p));
        }
    }
    let zq = tokens.add(fused)?.straight_through(Tensor::from_vec(&[m, c], codes)?)?;
    let zq = from_tokens(zq.reshape(&[n, cells, c])?, h, w)?;
    Ok((zq, matches))
}

pub fn init_discriminator<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let [w0, w1] = cfg.discriminator_widths;
    insert_conv(store, "disc.conv0", w0, 3, 4, rng);
    insert_conv(store, "disc.conv1", w1, w0, 4, rng);
    insert_conv(store, "disc.conv2", w1, w1, 3, rng);
    insert_conv(store, "disc.out", 1, w1, 3, rng);
}

/// Four-layer patch discriminator returning per-patch logits.
pub fn discriminate<'t>(b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    let h = conv(b, "disc.conv0", x, 2, 1)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(b, "disc.conv1", h, 2, 1)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(b, "disc.conv2", h, 1, 1)?.leaky_relu(LEAKY_SLOPE);
    conv(b, "disc.out", h, 1, 1)
}

/// Fixed random-weight convolutional feature extractor for the
/// perceptual loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    params: ParamStore,
}

impl FeatureExtractor {
    pub fn seeded(seed: u64, widths: [usize; 3]) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        insert_conv(&mut params, "phi.conv0", widths[0], 3, 3, &mut rng);
        insert_conv(&mut params, "phi.conv1", widths[1], widths[0], 3, &mut rng);
        insert_conv(&mut params, "phi.conv2", widths[2], widths[1], 3, &mut rng);
        FeatureExtractor { params }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::seeded(cfg.feature_seed, cfg.feature_widths)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let b = Binder::frozen(tape, &self.params);
        let h = conv(&b, "phi.conv0", x, 1, 1)?.leaky_relu(LEAKY_SLOPE);
        let h = conv(&b, "phi.conv1", h, 2, 1)?.leaky_relu(LEAKY_SLOPE);
        conv(&b, "phi.conv2", h, 2, 1)
    }
}

/// Matcher call counts, by route.
#[derive(Debug, Default)]
pub struct MatchCounters {
    nearest: AtomicU64,
    topk: AtomicU64,
}

impl MatchCounters {
    pub fn nearest(&self) -> u64 {
        self.nearest.load(Ordering::Relaxed)
    }

    pub fn topk(&self) -> u64 {
        self.topk.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.nearest.store(0, Ordering::Relaxed);
        self.topk.store(0, Ordering::Relaxed);
    }
}

impl Clone for MatchCounters {
    fn clone(&self) -> Self {
        MatchCounters { nearest: AtomicU64::new(self.nearest()), topk: AtomicU64::new(self.topk()) }
    }
}

/// Parameter prefixes of each component.
pub mod prefixes {
    pub const CODEBOOK: &str = "codebook";
    pub const ENCODER_HQ: &str = "enc_hq.";
    pub const ENCODER_LQ: &str = "enc_lq.";
    pub const DECODER: &str = "dec.";
    pub const FUSION: &str = "fuse.";
    pub const HEAD: &str = "unc_head.";
    /// Frozen stage-1 LQ encoder and fusion kept for stage-2 uncertainty maps.
    pub const BRANCH: &str = "unc.";
    pub const TOPK: &str = "topk.";
    pub const ALIGN: &str = "aa.";
    pub const DISCRIMINATOR: &str = "disc.";
}

pub struct SrGraph<'t> {
    pub sr: Var<'t>,
    /// Log-variance map; from the trainable head in stage 1 and from the
    /// frozen stage-1 branch in stage 2.
    pub s: Var<'t>,
    pub lq_latent: Var<'t>,
    pub matches: Vec<MatchResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrPrediction {
    pub sr: ImagePatch,
    pub s: ImagePatch,
    pub lq_latents: LatentGrid,
    pub matches: MatchResult,
}

/// Parameters and configuration of the full SR model.
#[derive(Debug, Clone)]
pub struct SrModel {
    pub config: ModelConfig,
    pub phase: Phase,
    pub modules: Stage2Modules,
    pub params: ParamStore,
    pub counters: MatchCounters,
}

impl SrModel {
    /// Fresh autoencoder (HQ encoder, codebook, decoder) for pretraining.
    pub fn new_autoencoder<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        init_encoder(&mut params, "enc_hq", &config, rng);
        init_decoder(&mut params, &config, rng);
        params.insert(prefixes::CODEBOOK, Codebook::random(config.codebook_size, config.latent_dim, rng).to_tensor());
        SrModel {
            config,
            phase: Phase::Pretrain,
            modules: Stage2Modules::default(),
            params,
            counters: MatchCounters::default(),
        }
    }

    pub fn from_params(config: ModelConfig, phase: Phase, modules: Stage2Modules, params: ParamStore) -> Self {
        SrModel { config, phase, modules, params, counters: MatchCounters::default() }
    }

    /// Adds the LQ encoder (copied from the HQ encoder), concat fusion,
    /// uncertainty head and discriminator.
    pub fn enter_stage1<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.require_phase(Phase::Pretrain)?;
        self.params.copy_prefix(prefixes::ENCODER_HQ, prefixes::ENCODER_LQ);
        init_concat_fusion(&mut self.params, "fuse", &self.config);
        init_uncertainty_head(&mut self.params, &self.config, rng);
        init_discriminator(&mut self.params, &self.config, rng);
        self.phase = Phase::Stage1;
        Ok(())
    }

    /// Snapshots the stage-1 branch and adds the enabled stage-2 modules.
    /// Without `warm_start` the LQ encoder and fusion restart from their
    /// stage-1 initial values.
    pub fn enter_stage2<R: Rng + ?Sized>(
        &mut self,
        modules: Stage2Modules,
        warm_start: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.require_phase(Phase::Stage1)?;
        self.params.copy_prefix(prefixes::ENCODER_LQ, "unc.enc_lq.");
        self.params.copy_prefix(prefixes::FUSION, "unc.fuse.");
        if !warm_start {
            self.params.copy_prefix(prefixes::ENCODER_HQ, prefixes::ENCODER_LQ);
            init_concat_fusion(&mut self.params, "fuse", &self.config);
        }
        if let Some(k) = modules.topk {
            if k == 0 || k > self.config.codebook_size {
                return Err(Error::InvalidArgument(format!("top-k with k = {k}")));
            }
            init_topk_fusion(&mut self.params, &self.config, rng);
        }
        if modules.align_attention {
            init_align_attention(&mut self.params, &self.config, rng);
        }
        self.modules = modules;
        self.phase = Phase::Stage2;
        Ok(())
    }

    pub fn require_phase(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::Phase { expected: expected.as_str(), found: self.phase.as_str() });
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::from_tensor(self.params.get(prefixes::CODEBOOK)?)
    }

    /// Bicubic upsampling of LR images to the HR canvas, as an NCHW batch.
    pub fn lq_input(&self, lrs: &[&ImagePatch]) -> Result<Tensor> {
        let ups = lrs.iter().map(|lr| resample::upscale(lr, self.config.scale)).collect::<Result<Vec<_>>>()?;
        ImagePatch::batch(&ups.iter().collect::<Vec<_>>())
    }

    /// Stage-1 style path: LQ encoder, nearest quantisation, concat fusion.
    fn stage1_path<'t>(
        &self,
        b: &Binder<'t, '_>,
        lq_input: Var<'t>,
        encoder: &str,
        fusion: &str,
        codebook: &Codebook,
    ) -> Result<(Var<'t>, Var<'t>, Vec<MatchResult>)> {
        let zl = encode(b, encoder, lq_input)?;
        let (zq, matches) = quantize_straight_through(zl, codebook)?;
        self.counters.nearest.fetch_add(1, Ordering::Relaxed);
        Ok((concat_fusion(b, fusion, zl, zq)?, zl, matches))
    }

    /// Uncertainty map of the frozen stage-1 branch.
    pub fn branch_uncertainty<'t>(
        &self,
        b: &Binder<'t, '_>,
        lq_input: Var<'t>,
        codebook: &Codebook,
    ) -> Result<Var<'t>> {
        self.require_phase(Phase::Stage2)?;
        let (fused, _, _) = self.stage1_path(b, lq_input, "unc.enc_lq", "unc.fuse", codebook)?;
        uncertainty_head(b, decode(b, fused)?.features)
    }

    /// Composed forward pass on an upsampled LQ batch `[N,3,H,W]`.
    pub fn graph<'t>(&self, b: &Binder<'t, '_>, lq_input: Var<'t>, stage: u8) -> Result<SrGraph<'t>> {
        let codebook = self.codebook()?;
        match stage {
            1 => {
                if self.phase < Phase::Stage1 {
                    return Err(Error::Phase { expected: "stage1", found: self.phase.as_str() });
                }
                let (fused, zl, matches) = self.stage1_path(b, lq_input, "enc_lq", "fuse", &codebook)?;
                let dec = decode(b, fused)?;
                let s = uncertainty_head(b, dec.features)?;
                Ok(SrGraph { sr: dec.image, s, lq_latent: zl, matches })
            }
            2 => {
                self.require_phase(Phase::Stage2)?;
                let zl = encode(b, "enc_lq", lq_input)?;
                let (zq, matches) = match self.modules.topk {
                    Some(k) => {
                        self.counters.topk.fetch_add(1, Ordering::Relaxed);
                        quantize_topk_straight_through(b, zl, &codebook, k)?
                    }
                    None => {
                        self.counters.nearest.fetch_add(1, Ordering::Relaxed);
                        quantize_straight_through(zl, &codebook)?
                    }
                };
                let mut fused = concat_fusion(b, "fuse", zl, zq)?;
                if self.modules.align_attention {
                    fused = fused.add(align_residual(b, zl, zq)?)?;
                }
                let dec = decode(b, fused)?;
                let s = self.branch_uncertainty(b, lq_input, &codebook)?;
                Ok(SrGraph { sr: dec.image, s, lq_latent: zl, matches })
            }
            _ => Err(Error::InvalidArgument(format!("unknown stage {stage}"))),
        }
    }

    /// Inference for one LR image. The SR output is clamped to `[0, 1]`.
    pub fn sr_forward(&self, lr: &ImagePatch, stage: u8) -> Result<SrPrediction> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let x = tape.constant(self.lq_input(&[lr])?);
        let mut g = self.graph(&b, x, stage)?;
        let sr = ImagePatch::from_tensor(&g.sr.value())?.clamped();
        let s = ImagePatch::from_tensor(&g.s.value())?;
        let lq_latents = LatentGrid::from_nchw(&g.lq_latent.value(), 0)?;
        if !sr.is_finite() || !s.is_finite() {
            return Err(Error::NonFinite("sr_forward output"));
        }
        Ok(SrPrediction { sr, s, lq_latents, matches: g.matches.remove(0) })
    }

    /// Current LQ-encoder latents of one LR image.
    pub fn lq_latents(&self, lr: &ImagePatch) -> Result<LatentGrid> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let z = encode(&b, "enc_lq", tape.constant(self.lq_input(&[lr])?))?;
        let v = z.value();
        LatentGrid::from_nchw(&v, 0)
    }

    /// HQ-encoder latents of one HR image.
    pub fn hq_latents(&self, hr: &ImagePatch) -> Result<LatentGrid> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let z = encode(&b, "enc_hq", tape.constant(hr.to_tensor()))?;
        let v = z.value();
        LatentGrid::from_nchw(&v, 0)
    }

    /// Ground-truth code indices and quantised latents of an HR image.
    pub fn ground_truth_codes(&self, hr: &ImagePatch) -> Result<(MatchResult, LatentGrid)> {
        quantize_nearest(&self.hq_latents(hr)?, &self.codebook()?)
    }

    /// Autoencoder reconstruction of an HR image through the codebook.
    pub fn reconstruct(&self, hr: &ImagePatch) -> Result<ImagePatch> {
        let (_, zq) = self.ground_truth_codes(hr)?;
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let dec = decode(&b, tape.constant(zq.to_nchw()))?;
        let v = dec.image.value();
        ImagePatch::from_tensor(&v)
    }

    /// Names of parameters that belong to `prefix_list`, for reporting.
    pub fn parameter_names(&self, prefix_list: &[&str]) -> Vec<String> {
        self.params.names().filter(|n| crate::nn::matches_any(n, prefix_list)).cloned().collect()
    }
}

/// Plain-tensor Align-Attention on one token set each: returns the output
/// `[T, d_k]` and the attention matrix `[T, S]`.
pub fn align_attention_tensors(
    f_lq: &Tensor,
    f_hq: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let lift = |t: &Tensor| -> Result<Var<'_>> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(shape_err("token matrix", &[0, 0], s));
        }
        tape.constant(t.clone()).reshape(&[1, s[0], s[1]])
    };
    let att = align_attention(
        lift(f_lq)?,
        lift(f_hq)?,
        tape.constant(w_q.clone()),
        tape.constant(w_k.clone()),
        tape.constant(w_v.clone()),
    )?;
    let out = att.output.to_tensor();
    let w = att.weights.to_tensor();
    let (t, s) = (w.shape()[1], w.shape()[2]);
    let d = out.numel() / t;
    Ok((out.reshape(&[t, d])?, w.reshape(&[t, s])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn stage1_model(seed: u64) -> SrModel {
        let mut r = rng(seed);
        let mut m = SrModel::new_autoencoder(ModelConfig::default(), &mut r);
        m.enter_stage1(&mut r).unwrap();
        m
    }

    fn textured_lr(seed: u64, size: usize) -> ImagePatch {
        let mut r = rng(seed);
        crate::textures::Texture::sample(&mut r, size).render(size, size)
    }

    #[test]
    fn encoder_shapes_and_divisibility() {
        let m = stage1_model(1);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &m.params);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert_eq!(encode(&b, "enc_hq", x).unwrap().shape(), vec![1, 16, 16, 16]);
        let bad = tape.constant(Tensor::zeros(&[1, 3, 30, 32]));
        assert!(matches!(encode(&b, "enc_hq", bad), Err(Error::NotDivisible { dim: "height", .. })));
    }

    #[test]
    fn zero_encoder_gives_zero_latents() {
        let mut m = stage1_model(2);
        let names: Vec<String> = m.parameter_names(&["enc_hq."]);
        for n in names {
            let t = m.params.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let z = m.hq_latents(&textured_lr(3, 32)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_stage1() {
        let m = stage1_model(3);
        let lr = ImagePatch::filled(3, 32, 32, 0.5);
        let p = m.sr_forward(&lr, 1).unwrap();
        assert_eq!(p.sr.dims(), (3, 64, 64));
        assert_eq!(p.s.dims(), (1, 64, 64));
        assert_eq!((p.lq_latents.height(), p.lq_latents.width()), (16, 16));
        assert!(matches!(m.sr_forward(&lr, 2), Err(Error::Phase { .. })));
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let m = stage1_model(4);
        let lr = textured_lr(5, 16);
        let a = m.sr_forward(&lr, 1).unwrap();
        let b = m.sr_forward(&lr, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage2_pass_through_matches_stage1() {
        let mut m = stage1_model(6);
        let lr = textured_lr(7, 16);
        let before = m.sr_forward(&lr, 1).unwrap();
        let mut r = rng(8);
        m.enter_stage2(Stage2Modules { topk: Some(3), align_attention: true }, true, &mut r).unwrap();
        m.counters.reset();
        let after = m.sr_forward(&lr, 2).unwrap();
        assert_eq!(before.sr, after.sr);
        assert_eq!(before.s, after.s);
        assert_eq!(m.counters.topk(), 1);
        assert_eq!(m.counters.nearest(), 1, "only the frozen branch matches by nearest code");
    }

    #[test]
    fn stage1_uses_nearest_only() {
        let m = stage1_model(9);
        m.counters.reset();
        m.sr_forward(&textured_lr(1, 16), 1).unwrap();
        assert_eq!((m.counters.nearest(), m.counters.topk()), (1, 0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng(10);
        for (t, s) in [(1, 1), (5, 3), (16, 16)] {
            let f_lq = Tensor::randn(&[t, 6], 1.0, &mut r);
            let f_hq = Tensor::randn(&[s, 6], 1.0, &mut r);
            let wq = Tensor::randn(&[6, 4], 1.0, &mut r);
            let wk = Tensor::randn(&[6, 4], 1.0, &mut r);
            let wv = Tensor::randn(&[6, 4], 1.0, &mut r);
            let (out, w) = align_attention_tensors(&f_lq, &f_hq, &wq, &wk, &wv).unwrap();
            assert_eq!(out.shape(), &[t, 4]);
            for row in w.data().chunks(s) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut r = rng(11);
        let v = Tensor::randn(&[1, 5], 1.0, &mut r);
        let wv = Tensor::randn(&[5, 3], 1.0, &mut r);
        let wq = Tensor::randn(&[5, 3], 1.0, &mut r);
        let wk = Tensor::randn(&[5, 3], 1.0, &mut r);
        let f_lq = Tensor::randn(&[4, 5], 1.0, &mut r);
        let (out, _) = align_attention_tensors(&f_lq, &v, &wq, &wk, &wv).unwrap();
        for row in out.data().chunks(3) {
            for (j, o) in row.iter().enumerate() {
                let expect: f64 = (0..5).map(|i| v.data()[i] * wv.data()[i * 3 + j]).sum();
                assert!((o - expect).abs() < 1e-12);
            }
        }
        let bad = Tensor::randn(&[2, 4], 1.0, &mut r);
        assert!(matches!(align_attention_tensors(&f_lq, &bad, &wq, &wk, &wv), Err(Error::Shape { .. })));
    }

    #[test]
    fn straight_through_reaches_encoder() {
        let m = stage1_model(12);
        let tape = Tape::new();
        let b = Binder::new(&tape, &m.params, &["enc_lq."]);
        let x = tape.constant(m.lq_input(&[&textured_lr(13, 16)]).unwrap());
        let g = m.graph(&b, x, 1).unwrap();
        let loss = g.sr.square().mean();
        let mut grads = tape.backward(loss).unwrap();
        let got = b.collect(&mut grads);
        let w = &got["enc_lq.conv0.w"];
        assert!(w.data().iter().any(|v| *v != 0.0));
    }
}
