//! Phase drivers that persist checkpoints, logs and reports in run directories.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use texvq_core::codebook::HitRateReport;
use texvq_core::metrics::MetricReport;
use texvq_core::networks::Phase;
use texvq_core::training::{
    begin_pretrain, begin_stage1, begin_stage2, code_usage, evaluate_bicubic, evaluate_sr, hit_rates,
    reconstruction_mse, PhaseRunner, StepLog, TrainState, Variant,
};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::formats::{encode_codebook, load_checkpoint, save_checkpoint, write_atomic};
use crate::run::{completed_artifact, RunDir, CHECKPOINT_FILE, COMPLETE_FILE};

/// Steps between checkpoints.
pub const CHECKPOINT_EVERY: u64 = 100;
/// Validation items used for the stage objective.
pub const VALIDATION_BATCH: usize = 16;

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step(&'a StepLog),
    Validation(&'a StepLog),
}

/// Validation objective before and after a stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveChange {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub initial_esu: Option<f64>,
    pub final_esu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub steps: u64,
    pub reconstruction_mse: Option<f64>,
    pub code_usage: Option<f64>,
    pub objective: Option<ObjectiveChange>,
    pub variant: Option<Variant>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub bicubic_psnr_db: Option<f64>,
    pub bicubic_ssim: Option<f64>,
}

impl PhaseSummary {
    fn new(phase: Phase, steps: u64) -> Self {
        PhaseSummary {
            phase,
            steps,
            reconstruction_mse: None,
            code_usage: None,
            objective: None,
            variant: None,
            psnr_db: None,
            ssim: None,
            bicubic_psnr_db: None,
            bicubic_ssim: None,
        }
    }
}

/// Loads the final checkpoint of a completed run.
pub fn load_run_state(run: &Path, phase: Phase, cfg: &RunConfig) -> anyhow::Result<TrainState> {
    let path = completed_artifact(run, CHECKPOINT_FILE)?;
    let (state, _) = load_checkpoint(&path, Some(phase), Some(&cfg.architecture_hash()))
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(state)
}

/// Phase of a completed run's checkpoint.
pub fn run_phase(run: &Path) -> anyhow::Result<Phase> {
    let path = completed_artifact(run, CHECKPOINT_FILE)?;
    let (state, _) = load_checkpoint(&path, None, None)?;
    Ok(state.phase())
}

/// Trains the phase of `begin()`'s state to its budget, resuming from the
/// run's checkpoint when one exists.
pub fn train_phase(
    run: &mut RunDir,
    cfg: &RunConfig,
    ds: &Dataset,
    phase: Phase,
    begin: impl FnOnce() -> anyhow::Result<TrainState>,
) -> anyhow::Result<(TrainState, Option<ObjectiveChange>)> {
    let hash = cfg.architecture_hash();
    let mut state = if run.checkpoint().exists() {
        load_checkpoint(&run.checkpoint(), Some(phase), Some(&hash))?.0
    } else {
        begin()?
    };
    let runner = PhaseRunner::new(&state, &cfg.train, &ds.train)?;
    let probe = &ds.val[..ds.val.len().min(VALIDATION_BATCH)];
    let validate = |state: &TrainState| -> anyhow::Result<Option<StepLog>> {
        if phase == Phase::Pretrain || probe.is_empty() {
            return Ok(None);
        }
        Ok(Some(runner.evaluate_objective(state, probe)?))
    };
    let initial = if state.step == 0 { validate(&state)? } else { None };
    if let Some(v) = &initial {
        run.log(&LogRecord::Validation(v));
    }
    let total = cfg.train.steps(phase);
    while state.step < total {
        let target = ((state.step / CHECKPOINT_EVERY + 1) * CHECKPOINT_EVERY).min(total);
        let mut logs = Vec::new();
        runner.run(&mut state, target, &mut |l| logs.push(l.clone()))?;
        for l in &logs {
            run.log(&LogRecord::Step(l));
        }
        save_checkpoint(&run.checkpoint(), &state, &hash)?;
        run.commit_log()?;
    }
    let last = validate(&state)?;
    if let Some(v) = &last {
        run.log(&LogRecord::Validation(v));
    }
    let change = match (initial, last) {
        (Some(a), Some(b)) => Some(ObjectiveChange {
            initial: a.total,
            final_: b.total,
            initial_esu: a.components.esu,
            final_esu: b.components.esu,
        }),
        _ => None,
    };
    Ok((state, change))
}

pub fn pretrain(out: &Path, cfg: &RunConfig, ds: &Dataset, overwrite: bool) -> anyhow::Result<PhaseSummary> {
    let mut run = RunDir::create(out, cfg, overwrite)?;
    let (state, _) = train_phase(&mut run, cfg, ds, Phase::Pretrain, || Ok(begin_pretrain(&cfg.train, &ds.train)?))?;
    write_atomic(&run.path("codebook.tvqc"), &encode_codebook(&state.model.codebook()?))?;
    let mut s = PhaseSummary::new(Phase::Pretrain, state.step);
    s.reconstruction_mse = Some(reconstruction_mse(&state.model, &ds.val)?);
    s.code_usage = Some(code_usage(&state.model, &ds.val)?);
    run.complete(&s)?;
    Ok(s)
}

pub fn stage1(from: &Path, out: &Path, cfg: &RunConfig, ds: &Dataset, overwrite: bool) -> anyhow::Result<PhaseSummary> {
    let pretrained = load_run_state(from, Phase::Pretrain, cfg)?;
    let mut run = RunDir::create(out, cfg, overwrite)?;
    let (state, change) = train_phase(&mut run, cfg, ds, Phase::Stage1, || Ok(begin_stage1(pretrained, &cfg.train)?))?;
    let mut s = PhaseSummary::new(Phase::Stage1, state.step);
    s.objective = change;
    write_hit_rate_csv(&run.path("hit_rate.csv"), &hit_rates(&state.model, &ds.val, &cfg.eval.hit_rate_k)?)?;
    fill_scores(&mut s, &run, &state, ds, cfg)?;
    run.complete(&s)?;
    Ok(s)
}

pub fn stage2(from: &Path, out: &Path, cfg: &RunConfig, ds: &Dataset, overwrite: bool) -> anyhow::Result<PhaseSummary> {
    let stage1_state = load_run_state(from, Phase::Stage1, cfg)?;
    let mut run = RunDir::create(out, cfg, overwrite)?;
    let (state, change) =
        train_phase(&mut run, cfg, ds, Phase::Stage2, || Ok(begin_stage2(stage1_state, &cfg.train)?))?;
    let mut s = PhaseSummary::new(Phase::Stage2, state.step);
    s.objective = change;
    s.variant = Some(cfg.train.variant);
    fill_scores(&mut s, &run, &state, ds, cfg)?;
    run.complete(&s)?;
    Ok(s)
}

fn fill_scores(
    s: &mut PhaseSummary,
    run: &RunDir,
    state: &TrainState,
    ds: &Dataset,
    cfg: &RunConfig,
) -> anyhow::Result<()> {
    let stage = if state.phase() == Phase::Stage2 { 2 } else { 1 };
    let sr = evaluate_sr(&state.model, stage, &ds.val)?;
    let bic = evaluate_bicubic(&ds.val, cfg.train.model.scale)?;
    write_metric_csv(&run.path("metrics.csv"), &sr)?;
    write_metric_csv(&run.path("bicubic.csv"), &bic)?;
    s.psnr_db = Some(sr.mean_psnr());
    s.ssim = Some(sr.mean_ssim());
    s.bicubic_psnr_db = Some(bic.mean_psnr());
    s.bicubic_ssim = Some(bic.mean_ssim());
    Ok(())
}

/// `image_id,psnr_db,ssim` rows followed by a `mean` row.
pub fn write_metric_csv(path: &Path, report: &MetricReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "psnr_db", "ssim"])?;
    for r in &report.rows {
        w.serialize((&r.image_id, r.psnr_db, r.ssim))?;
    }
    w.serialize(("mean", report.mean_psnr(), report.mean_ssim()))?;
    w.flush()?;
    Ok(())
}

/// `k,hits,total,rate`, one row per k.
pub fn write_hit_rate_csv(path: &Path, reports: &[HitRateReport]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "hits", "total", "rate"])?;
    for r in reports {
        w.serialize((r.k, r.hits, r.total, r.rate))?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub uncertainty: bool,
    pub topk: usize,
    pub align_attention: bool,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bicubic_psnr_db: f64,
}

impl AblationRow {
    pub fn new(variant: Variant, s: &PhaseSummary) -> Self {
        let m = variant.modules();
        AblationRow {
            variant: variant.name().into(),
            uncertainty: variant.uses_uncertainty(),
            topk: m.topk.unwrap_or(1),
            align_attention: m.align_attention,
            psnr_db: s.psnr_db.unwrap_or(f64::NAN),
            ssim: s.ssim.unwrap_or(f64::NAN),
            bicubic_psnr_db: s.bicubic_psnr_db.unwrap_or(f64::NAN),
        }
    }
}

/// Runs stage 2 once per variant under `out/<variant>` and tabulates them.
pub fn ablate(
    from: &Path,
    out: &Path,
    cfg: &RunConfig,
    ds: &Dataset,
    variants: &[Variant],
    overwrite: bool,
) -> anyhow::Result<Vec<AblationRow>> {
    let run = RunDir::create(out, cfg, overwrite)?;
    let mut rows = Vec::new();
    for &v in variants {
        let mut vcfg = cfg.clone();
        vcfg.train.variant = v;
        let dir = run.path(v.name());
        let done = dir.join(COMPLETE_FILE);
        let s = if done.exists() && !overwrite {
            serde_json::from_str(&std::fs::read_to_string(&done)?)?
        } else {
            stage2(from, &dir, &vcfg, ds, overwrite)?
        };
        rows.push(AblationRow::new(v, &s));
    }
    let mut w = csv::Writer::from_path(run.path("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    run.complete(&rows)?;
    Ok(rows)
}
