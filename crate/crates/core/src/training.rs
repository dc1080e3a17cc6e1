//! The three training phases and their freezing schedule.
//!
//! | phase    | trainable                          | frozen                                   |
//! |----------|------------------------------------|------------------------------------------|
//! | pretrain | HQ encoder, decoder, codebook      | none                                     |
//! | stage1   | LQ encoder, fusion, head           | codebook, decoder, HQ encoder            |
//! | stage2   | LQ encoder, fusion, Top-k, AA      | codebook, decoder, HQ encoder, head, branch |
//!
//! The discriminator trains alongside stages 1 and 2 with its own optimiser.
//!
//! Step `t` of a phase draws its batch from an RNG seeded by
//! `(seed, phase, t)`, so a run resumed from a state saved after step `t`
//! continues exactly as the uninterrupted run.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::codebook::{hit_rate, quantize_nearest, Codebook, HitRateReport, LatentGrid};
use crate::dataset::{mix_seed, Sample};
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::losses::{
    codebook_var, discriminator_var, esu_var, generator_var, l1_var, perceptual_var, shift_per_image, stage_total_var,
    udl_var, LossComponents, LossWeights, Objective,
};
use crate::metrics::MetricReport;
use crate::networks::{
    decode, discriminate, encode, from_tokens, prefixes, to_tokens, FeatureExtractor, ModelConfig, Phase, SrModel,
    Stage2Modules,
};
use crate::nn::{Adam, AdamConfig, Binder};
use crate::tensor::Tensor;

/// Stage-2 ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    Baseline,
    Uncertainty,
    Top3,
    Top5,
    Aa,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::Uncertainty, Variant::Top3, Variant::Top5, Variant::Aa, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Uncertainty => "uncertainty",
            Variant::Top3 => "top3",
            Variant::Top5 => "top5",
            Variant::Aa => "aa",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn modules(self) -> Stage2Modules {
        match self {
            Variant::Baseline | Variant::Uncertainty => Stage2Modules { topk: None, align_attention: false },
            Variant::Top3 => Stage2Modules { topk: Some(3), align_attention: false },
            Variant::Top5 => Stage2Modules { topk: Some(5), align_attention: false },
            Variant::Aa => Stage2Modules { topk: None, align_attention: true },
            Variant::Full => Stage2Modules { topk: Some(3), align_attention: true },
        }
    }

    pub fn uses_uncertainty(self) -> bool {
        matches!(self, Variant::Uncertainty | Variant::Full)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// HR patch side; the dataset items are patches of this size.
    pub patch_size: usize,
    pub pretrain_steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Generator learning rate for pretraining.
    pub pretrain_lr: f64,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub discriminator_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Fraction of a stage over which the adversarial weight ramps from 0.
    pub adversarial_warmup: f64,
    /// Commitment weight of the pretraining quantiser.
    pub commitment: f64,
    /// Pretraining steps between dead-code restarts; 0 disables them.
    pub dead_code_interval: u64,
    /// Items whose latents seed the codebook and restarts.
    pub probe_items: usize,
    pub warm_start_stage2: bool,
    pub variant: Variant,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 8,
            patch_size: 32,
            pretrain_steps: 1200,
            stage1_steps: 300,
            stage2_steps: 300,
            pretrain_lr: 2e-3,
            stage1_lr: 1e-3,
            stage2_lr: 2e-4,
            discriminator_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weights: LossWeights::default(),
            adversarial_warmup: 0.1,
            commitment: 0.25,
            dead_code_interval: 50,
            probe_items: 64,
            warm_start_stage2: true,
            variant: Variant::Full,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = self.model.scale * crate::networks::DOWNSAMPLE;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(factor) {
            return Err(Error::NotDivisible { dim: "patch_size", value: self.patch_size, factor });
        }
        if self.pretrain_steps == 0 || self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::InvalidArgument("step budgets must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !matches!(self.model.scale, 2 | 4) {
            return Err(Error::InvalidArgument(format!("scale {} not in {{2, 4}}", self.model.scale)));
        }
        self.weights.validate()
    }

    pub fn steps(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Pretrain => self.pretrain_steps,
            Phase::Stage1 => self.stage1_steps,
            Phase::Stage2 => self.stage2_steps,
        }
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() })
    }
}

/// Trainable and frozen prefixes of a phase.
pub fn trainable_prefixes(phase: Phase, modules: Stage2Modules) -> Vec<&'static str> {
    match phase {
        Phase::Pretrain => vec![prefixes::ENCODER_HQ, prefixes::DECODER, prefixes::CODEBOOK],
        Phase::Stage1 => vec![prefixes::ENCODER_LQ, prefixes::FUSION, prefixes::HEAD],
        Phase::Stage2 => {
            let mut p = vec![prefixes::ENCODER_LQ, prefixes::FUSION];
            if modules.topk.is_some() {
                p.push(prefixes::TOPK);
            }
            if modules.align_attention {
                p.push(prefixes::ALIGN);
            }
            p
        }
    }
}

pub fn frozen_prefixes(phase: Phase) -> Vec<&'static str> {
    match phase {
        Phase::Pretrain => vec![],
        Phase::Stage1 => vec![prefixes::CODEBOOK, prefixes::DECODER, prefixes::ENCODER_HQ],
        Phase::Stage2 => {
            vec![prefixes::CODEBOOK, prefixes::DECODER, prefixes::ENCODER_HQ, prefixes::HEAD, prefixes::BRANCH]
        }
    }
}

/// Everything needed to continue a phase bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SrModel,
    /// Completed steps of the current phase.
    pub step: u64,
    pub seed: u64,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
}

impl TrainState {
    pub fn phase(&self) -> Phase {
        self.model.phase
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub phase: Phase,
    pub step: u64,
    pub components: LossComponents<f64>,
    /// Pretraining quantiser terms (codebook + commitment).
    pub quantizer: Option<f64>,
    pub adversarial_weight: f64,
    pub discriminator: Option<f64>,
    pub total: f64,
}

/// Per-item tensors reused across steps.
struct ItemCache {
    hr: Vec<Tensor>,
    lq: Vec<Tensor>,
    z_gt: Vec<Tensor>,
}

impl ItemCache {
    fn build(model: &SrModel, items: &[Sample], with_targets: bool) -> Result<Self> {
        let mut hr = Vec::with_capacity(items.len());
        let mut lq = Vec::with_capacity(items.len());
        let mut z_gt = Vec::new();
        for s in items {
            hr.push(s.hr.to_tensor().index_outer(0));
            if model.phase >= Phase::Stage1 {
                lq.push(model.lq_input(&[&s.lr])?.index_outer(0));
            }
            if with_targets {
                z_gt.push(model.ground_truth_codes(&s.hr)?.1.to_nchw().index_outer(0));
            }
        }
        Ok(ItemCache { hr, lq, z_gt })
    }

    fn gather(list: &[Tensor], idx: &[usize]) -> Result<Tensor> {
        Tensor::stack(&idx.iter().map(|&i| list[i].clone()).collect::<Vec<_>>())
    }
}

fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x7061_7373 + phase.tag() as u64), step))
}

fn init_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1000 + phase.tag() as u64))
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn check_items(items: &[Sample], config: &TrainConfig) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for s in items {
        if s.hr.dims() != (3, config.patch_size, config.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "item {} is {:?}, expected 3x{p}x{p}",
                s.id,
                s.hr.dims(),
                p = config.patch_size
            )));
        }
    }
    Ok(())
}

fn diverged(step: u64, what: &str) -> Error {
    Error::Diverged { step, detail: format!("{what} is not finite") }
}

/// Latent vectors of the probe items under the HQ encoder.
fn probe_latents(model: &SrModel, items: &[Sample], count: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for s in items.iter().take(count.max(1)) {
        let z = model.hq_latents(&s.hr)?;
        for c in 0..z.cells() {
            out.push(z.cell(c).to_vec());
        }
    }
    Ok(out)
}

/// Replaces every code not selected by any probe latent with a random probe
/// latent plus small noise. Returns the number of restarted codes.
fn restart_dead_codes(model: &mut SrModel, items: &[Sample], probes: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let latents = probe_latents(model, items, probes)?;
    let codebook = model.codebook()?;
    let mut used = vec![false; codebook.size()];
    for v in &latents {
        used[codebook.nearest(v).0] = true;
    }
    let dim = codebook.dim();
    let cb = model.params.get_mut(prefixes::CODEBOOK)?;
    let mut restarted = 0;
    for (j, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
        let src = &latents[rng.random_range(0..latents.len())];
        for (d, v) in cb.data_mut()[j * dim..(j + 1) * dim].iter_mut().enumerate() {
            *v = src[d] + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        restarted += 1;
    }
    Ok(restarted)
}

/// Fresh autoencoder with codes initialised from encoder outputs.
pub fn begin_pretrain(config: &TrainConfig, train: &[Sample]) -> Result<TrainState> {
    config.validate()?;
    check_items(train, config)?;
    let mut rng = init_rng(config.seed, Phase::Pretrain);
    let mut model = SrModel::new_autoencoder(config.model.clone(), &mut rng);
    let latents = probe_latents(&model, train, config.probe_items)?;
    let k = config.model.codebook_size;
    let mut entries = Vec::with_capacity(k * config.model.latent_dim);
    for _ in 0..k {
        entries.extend_from_slice(&latents[rng.random_range(0..latents.len())]);
    }
    let cb = Codebook::new(k, config.model.latent_dim, entries)?;
    model.params.insert(prefixes::CODEBOOK, cb.to_tensor());
    Ok(TrainState {
        model,
        step: 0,
        seed: config.seed,
        generator_opt: config.adam(config.pretrain_lr),
        discriminator_opt: config.adam(config.discriminator_lr),
    })
}

/// Adds stage-1 components to a pretrained state.
pub fn begin_stage1(mut prev: TrainState, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    prev.model.require_phase(Phase::Pretrain)?;
    let mut rng = init_rng(config.seed, Phase::Stage1);
    prev.model.enter_stage1(&mut rng)?;
    Ok(TrainState {
        model: prev.model,
        step: 0,
        seed: config.seed,
        generator_opt: config.adam(config.stage1_lr),
        discriminator_opt: config.adam(config.discriminator_lr),
    })
}

/// Adds the stage-2 modules of `config.variant` to a stage-1 state. The
/// discriminator optimiser carries over.
pub fn begin_stage2(mut prev: TrainState, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    prev.model.require_phase(Phase::Stage1)?;
    let mut rng = init_rng(config.seed, Phase::Stage2);
    prev.model.enter_stage2(config.variant.modules(), config.warm_start_stage2, &mut rng)?;
    Ok(TrainState {
        model: prev.model,
        step: 0,
        seed: config.seed,
        generator_opt: config.adam(config.stage2_lr),
        discriminator_opt: prev.discriminator_opt,
    })
}

/// Runs a phase's remaining steps up to `until` (capped at the phase
/// budget), checking that frozen parameters never change.
pub struct PhaseRunner<'a> {
    config: &'a TrainConfig,
    train: &'a [Sample],
    cache: ItemCache,
    phi: FeatureExtractor,
}

impl<'a> PhaseRunner<'a> {
    pub fn new(state: &TrainState, config: &'a TrainConfig, train: &'a [Sample]) -> Result<Self> {
        config.validate()?;
        check_items(train, config)?;
        let with_targets = state.phase() != Phase::Pretrain;
        Ok(PhaseRunner {
            config,
            train,
            cache: ItemCache::build(&state.model, train, with_targets)?,
            phi: FeatureExtractor::from_config(&state.model.config),
        })
    }

    pub fn run(&self, state: &mut TrainState, until: u64, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        let phase = state.phase();
        let frozen = frozen_prefixes(phase);
        let snapshot = state.model.params.subset(&frozen);
        let end = until.min(self.config.steps(phase));
        while state.step < end {
            let entry = self.step(state)?;
            log(&entry);
        }
        let drift = state.model.params.bitwise_diff(&snapshot, &frozen);
        if let Some(name) = drift.into_iter().next() {
            return Err(Error::FrozenDrift(name));
        }
        Ok(())
    }

    /// One optimisation step; increments `state.step`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepLog> {
        let step = state.step + 1;
        let mut rng = step_rng(state.seed, state.phase(), step);
        let idx = batch_indices(&mut rng, self.train.len(), self.config.batch_size);
        let entry = match state.phase() {
            Phase::Pretrain => self.pretrain_step(state, &idx, step, &mut rng)?,
            Phase::Stage1 | Phase::Stage2 => self.sr_step(state, &idx, step)?,
        };
        state.step = step;
        Ok(entry)
    }

    fn pretrain_step(&self, state: &mut TrainState, idx: &[usize], step: u64, rng: &mut ChaCha8Rng) -> Result<StepLog> {
        let cfg = self.config;
        let grads = {
            let tape = Tape::new();
            let b =
                Binder::new(&tape, &state.model.params, &trainable_prefixes(Phase::Pretrain, Stage2Modules::default()));
            let x = tape.constant(ItemCache::gather(&self.cache.hr, idx)?);
            let z = encode(&b, "enc_hq", x)?;
            let s = z.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let m = n * h * w;
            let tokens = to_tokens(z)?.reshape(&[m, c])?;
            let codebook = state.model.codebook()?;
            let k = codebook.size();
            let mut onehot = Tensor::zeros(&[m, k]);
            {
                let tv = tokens.value();
                for (i, v) in tv.data().chunks(c).enumerate() {
                    onehot.data_mut()[i * k + codebook.nearest(v).0] = 1.0;
                }
            }
            let codes = tape.constant(onehot).matmul(b.var(prefixes::CODEBOOK)?)?;
            let z_const = tape.constant(tokens.to_tensor());
            let codes_const = tape.constant(codes.to_tensor());
            let quantiser = z_const
                .sub(codes)?
                .square()
                .mean()
                .add(tokens.sub(codes_const)?.square().mean().scale(cfg.commitment))?;
            let zq = tokens.straight_through(codes.to_tensor())?;
            let zq = from_tokens(zq.reshape(&[n, h * w, c])?, h, w)?;
            let recon = decode(&b, zq)?.image;
            let l1 = l1_var(x, recon)?;
            let total = l1.add(quantiser)?;
            let (l1v, qv, tv) = (l1.item(), quantiser.item(), total.item());
            if !tv.is_finite() {
                return Err(diverged(step, "pretraining loss"));
            }
            let mut g = tape.backward(total)?;
            let log = StepLog {
                phase: Phase::Pretrain,
                step,
                components: LossComponents { l1: Some(l1v), ..LossComponents::default() },
                quantizer: Some(qv),
                adversarial_weight: 0.0,
                discriminator: None,
                total: tv,
            };
            (b.collect(&mut g), log)
        };
        let (grads, log) = grads;
        state.generator_opt.step(&mut state.model.params, &grads)?;
        if cfg.dead_code_interval > 0 && step.is_multiple_of(cfg.dead_code_interval) && step < cfg.pretrain_steps {
            restart_dead_codes(&mut state.model, self.train, cfg.probe_items, rng)?;
        }
        Ok(log)
    }

    fn adversarial_weight(&self, phase: Phase, step: u64) -> f64 {
        let ramp = self.config.adversarial_warmup * self.config.steps(phase) as f64;
        let factor = if ramp <= 0.0 { 1.0 } else { (step as f64 / ramp).min(1.0) };
        self.config.weights.adversarial * factor
    }

    fn objective(&self, phase: Phase) -> Objective {
        match phase {
            Phase::Stage1 => Objective::Stage1,
            _ if self.config.variant.uses_uncertainty() => Objective::Stage2,
            _ => Objective::Stage2Plain,
        }
    }

    fn sr_step(&self, state: &mut TrainState, idx: &[usize], step: u64) -> Result<StepLog> {
        let phase = state.phase();
        let stage = if phase == Phase::Stage1 { 1 } else { 2 };
        let adv_w = self.adversarial_weight(phase, step);
        let objective = self.objective(phase);
        let (grads, sr_value, mut log) = {
            let tape = Tape::new();
            let b = Binder::new(&tape, &state.model.params, &trainable_prefixes(phase, state.model.modules));
            let hr = tape.constant(ItemCache::gather(&self.cache.hr, idx)?);
            let lq = tape.constant(ItemCache::gather(&self.cache.lq, idx)?);
            let z_gt = tape.constant(ItemCache::gather(&self.cache.z_gt, idx)?);
            let g = state.model.graph(&b, lq, stage)?;
            let mut comps = LossComponents {
                codebook: Some(codebook_var(g.lq_latent, z_gt, &self.config.weights)?),
                l1: Some(l1_var(hr, g.sr)?),
                perceptual: Some(perceptual_var(&self.phi, hr, g.sr)?),
                adversarial: Some(generator_var(discriminate(&b, g.sr)?)),
                esu: None,
                udl: None,
            };
            match objective {
                Objective::Stage1 => comps.esu = Some(esu_var(hr, g.sr, g.s)?),
                Objective::Stage2 => {
                    let s_hat = shift_per_image(&g.s.to_tensor())?;
                    let s_hat = tape.constant(s_hat);
                    comps.udl = Some(udl_var(hr, g.sr, s_hat)?);
                }
                Objective::Stage2Plain => {}
            }
            let total = stage_total_var(objective, &comps, adv_w)?;
            let tv = total.item();
            if !tv.is_finite() {
                return Err(diverged(step, "stage loss"));
            }
            let mut gr = tape.backward(total)?;
            let log = StepLog {
                phase,
                step,
                components: comps.map(|v| v.item()),
                quantizer: None,
                adversarial_weight: adv_w,
                discriminator: None,
                total: tv,
            };
            (b.collect(&mut gr), g.sr.to_tensor(), log)
        };
        state.generator_opt.step(&mut state.model.params, &grads)?;

        let (dgrads, dloss) = {
            let tape = Tape::new();
            let b = Binder::new(&tape, &state.model.params, &[prefixes::DISCRIMINATOR]);
            let real = discriminate(&b, tape.constant(ItemCache::gather(&self.cache.hr, idx)?))?;
            let fake = discriminate(&b, tape.constant(sr_value))?;
            let loss = discriminator_var(real, fake)?;
            let v = loss.item();
            if !v.is_finite() {
                return Err(diverged(step, "discriminator loss"));
            }
            let mut gr = tape.backward(loss)?;
            (b.collect(&mut gr), v)
        };
        state.discriminator_opt.step(&mut state.model.params, &dgrads)?;
        log.discriminator = Some(dloss);
        Ok(log)
    }

    /// Stage objective on a fixed item list without updating anything.
    /// The adversarial weight is the full `lambda_adv`.
    pub fn evaluate_objective(&self, state: &TrainState, items: &[Sample]) -> Result<StepLog> {
        let phase = state.phase();
        if phase == Phase::Pretrain {
            return Err(Error::Phase { expected: "stage1", found: "pretrain" });
        }
        let cache = ItemCache::build(&state.model, items, true)?;
        let idx: Vec<usize> = (0..items.len()).collect();
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &state.model.params);
        let hr = tape.constant(ItemCache::gather(&cache.hr, &idx)?);
        let lq = tape.constant(ItemCache::gather(&cache.lq, &idx)?);
        let z_gt = tape.constant(ItemCache::gather(&cache.z_gt, &idx)?);
        let stage = if phase == Phase::Stage1 { 1 } else { 2 };
        let g = state.model.graph(&b, lq, stage)?;
        let objective = self.objective(phase);
        let mut comps = LossComponents {
            codebook: Some(codebook_var(g.lq_latent, z_gt, &self.config.weights)?),
            l1: Some(l1_var(hr, g.sr)?),
            perceptual: Some(perceptual_var(&self.phi, hr, g.sr)?),
            adversarial: Some(generator_var(discriminate(&b, g.sr)?)),
            esu: None,
            udl: None,
        };
        match objective {
            Objective::Stage1 => comps.esu = Some(esu_var(hr, g.sr, g.s)?),
            Objective::Stage2 => {
                let s_hat = shift_per_image(&g.s.to_tensor())?;
                let s_hat = tape.constant(s_hat);
                comps.udl = Some(udl_var(hr, g.sr, s_hat)?);
            }
            Objective::Stage2Plain => {}
        }
        let total = stage_total_var(objective, &comps, self.config.weights.adversarial)?;
        Ok(StepLog {
            phase,
            step: state.step,
            components: comps.map(|v| v.item()),
            quantizer: None,
            adversarial_weight: self.config.weights.adversarial,
            discriminator: None,
            total: total.item(),
        })
    }
}

/// Full pretraining phase.
pub fn pretrain_codebook(config: &TrainConfig, train: &[Sample], log: &mut dyn FnMut(&StepLog)) -> Result<TrainState> {
    let mut state = begin_pretrain(config, train)?;
    PhaseRunner::new(&state, config, train)?.run(&mut state, u64::MAX, log)?;
    Ok(state)
}

pub fn train_stage1(
    pretrained: TrainState,
    config: &TrainConfig,
    train: &[Sample],
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainState> {
    let mut state = begin_stage1(pretrained, config)?;
    PhaseRunner::new(&state, config, train)?.run(&mut state, u64::MAX, log)?;
    Ok(state)
}

pub fn train_stage2(
    stage1: TrainState,
    config: &TrainConfig,
    train: &[Sample],
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainState> {
    let mut state = begin_stage2(stage1, config)?;
    PhaseRunner::new(&state, config, train)?.run(&mut state, u64::MAX, log)?;
    Ok(state)
}

/// Mean squared reconstruction error of the autoencoder over `items`.
pub fn reconstruction_mse(model: &SrModel, items: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in items {
        let r = model.reconstruct(&s.hr)?;
        total += r.data().iter().zip(s.hr.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += r.data().len();
    }
    Ok(total / count as f64)
}

/// Fraction of codes selected at least once by the HQ latents of `items`.
pub fn code_usage(model: &SrModel, items: &[Sample]) -> Result<f64> {
    let codebook = model.codebook()?;
    let mut used = vec![false; codebook.size()];
    for s in items {
        let (m, _) = quantize_nearest(&model.hq_latents(&s.hr)?, &codebook)?;
        for i in m.indices {
            used[i] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count() as f64 / used.len() as f64)
}

/// Hit rates of the LQ encoder's latents against the HQ ground-truth codes.
pub fn hit_rates(model: &SrModel, items: &[Sample], ks: &[usize]) -> Result<Vec<HitRateReport>> {
    let codebook = model.codebook()?;
    let mut reports: Vec<HitRateReport> = ks.iter().map(|&k| HitRateReport::empty(k)).collect();
    for s in items {
        let (gt, _) = model.ground_truth_codes(&s.hr)?;
        let lq: LatentGrid = model.lq_latents(&s.lr)?;
        for r in reports.iter_mut() {
            *r = r.merge(hit_rate(&lq, &gt.indices, &codebook, r.k)?)?;
        }
    }
    Ok(reports)
}

/// PSNR/SSIM of the model's SR outputs against HR.
pub fn evaluate_sr(model: &SrModel, stage: u8, items: &[Sample]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in items {
        let p = model.sr_forward(&s.lr, stage)?;
        report.push(s.id.clone(), &s.hr, &p.sr)?;
    }
    Ok(report)
}

/// PSNR/SSIM of bicubic upsampling against HR.
pub fn evaluate_bicubic(items: &[Sample], scale: usize) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in items {
        let up = crate::metrics::bicubic_baseline(&s.lr, scale)?.clamped();
        report.push(s.id.clone(), &s.hr, &up)?;
    }
    Ok(report)
}

/// Shifted uncertainty map of the phase-appropriate branch for one LR image.
pub fn uncertainty_map(model: &SrModel, lr: &ImagePatch) -> Result<ImagePatch> {
    let stage = if model.phase == Phase::Stage2 { 2 } else { 1 };
    let p = model.sr_forward(lr, stage)?;
    let t = shift_per_image(&p.s.to_tensor())?;
    ImagePatch::from_tensor(&t)
}

/// Per-phase names of trainable and frozen parameters, for reporting.
pub fn parameter_sets(model: &SrModel) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    out.insert("trainable".to_string(), model.parameter_names(&trainable_prefixes(model.phase, model.modules)));
    out.insert("frozen".to_string(), model.parameter_names(&frozen_prefixes(model.phase)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, DatasetConfig};

    fn tiny() -> (TrainConfig, Vec<Sample>) {
        let cfg = TrainConfig {
            batch_size: 2,
            patch_size: 16,
            pretrain_steps: 4,
            stage1_steps: 3,
            stage2_steps: 3,
            probe_items: 4,
            dead_code_interval: 2,
            ..TrainConfig::default()
        };
        let (train, _) = synth_dataset(&DatasetConfig { count: 6, size: 16, ..DatasetConfig::default() }).unwrap();
        (cfg, train)
    }

    #[test]
    fn phases_freeze_their_sets() {
        let (cfg, train) = tiny();
        let pre = pretrain_codebook(&cfg, &train, &mut |_| {}).unwrap();
        let before = pre.model.params.clone();
        let s1 = train_stage1(pre, &cfg, &train, &mut |_| {}).unwrap();
        assert!(s1.model.params.bitwise_diff(&before, &frozen_prefixes(Phase::Stage1)).is_empty());
        assert!(!s1.model.params.bitwise_diff(&before, &["enc_lq."]).is_empty());
        let head_before = s1.model.params.subset(&["unc_head."]);
        let s2 = train_stage2(s1, &cfg, &train, &mut |_| {}).unwrap();
        assert!(s2.model.params.bitwise_diff(&head_before, &["unc_head."]).is_empty());
        assert!(s2.model.params.bitwise_diff(&before, &["codebook", "dec."]).is_empty());
    }

    #[test]
    fn wrong_phase_is_rejected() {
        let (cfg, train) = tiny();
        let pre = begin_pretrain(&cfg, &train).unwrap();
        assert!(matches!(begin_stage2(pre, &cfg), Err(Error::Phase { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, train) = tiny();
        let mut a = begin_pretrain(&cfg, &train).unwrap();
        let runner = PhaseRunner::new(&a, &cfg, &train).unwrap();
        runner.run(&mut a, 2, &mut |_| {}).unwrap();
        let mut b = a.clone();
        runner.run(&mut a, 4, &mut |_| {}).unwrap();
        let runner_b = PhaseRunner::new(&b, &cfg, &train).unwrap();
        runner_b.run(&mut b, 4, &mut |_| {}).unwrap();
        assert!(a.model.params.bitwise_diff(&b.model.params, &[""]).is_empty());
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig { patch_size: 20, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::NotDivisible { .. })));
        let cfg = TrainConfig { stage1_steps: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
