//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use texvq_core::networks::Phase;
use texvq_core::training::{evaluate_bicubic, evaluate_sr, hit_rates, uncertainty_map, Variant};

use crate::bench::{bench_matching, write_bench_csv};
use crate::config::{Overrides, RunConfig};
use crate::data::{read_image, write_dataset, write_png, Dataset};
use crate::formats::{encode_image, write_atomic};
use crate::pipeline::{self, load_run_state, run_phase, write_hit_rate_csv, write_metric_csv};
use crate::plot::chart_for;
use crate::run::{RunDir, CONFIG_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "texvq", version, about = "Codebook-prior blind super-resolution on procedural textures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config; defaults to the `--from` run's snapshot, then built-ins.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_parser = ["2", "4"])]
    pub scale: Option<String>,
    /// Replace a completed output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Dataset directory from `make-data`; synthesized in memory when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural HR/LR dataset.
    MakeData(Common),
    /// Train the HQ autoencoder and codebook.
    PretrainCodebook(Common),
    /// Train the LQ encoder and uncertainty head against a frozen codebook and decoder.
    TrainStage1 {
        /// Completed pretraining run.
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the uncertainty-guided SR model.
    TrainStage2 {
        /// Completed stage-1 run.
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[command(flatten)]
        common: Common,
    },
    /// Super-resolve one LR image and write its uncertainty map.
    Infer {
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        /// LR image (PNG or `.tvqf`).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a stage-1 or stage-2 run and bicubic on the validation split.
    Evaluate {
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Top-k hit rates of LQ latents against HQ codes.
    HitRate {
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        #[arg(long, num_args = 1.., value_name = "N")]
        k: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Time the top-k and global matchers against codebook size.
    BenchMatching {
        /// Codebook sizes.
        #[arg(long, num_args = 1.., value_name = "N")]
        k: Vec<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render an SVG chart from a benchmark or hit-rate CSV.
    Plot {
        #[arg(long, value_name = "CSV")]
        from: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run stage 2 for one variant, or for every variant when none is given.
    Ablate {
        /// Completed stage-1 run.
        #[arg(long, value_name = "RUN")]
        from: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self, from_run: Option<&Path>, variant: Option<Variant>) -> anyhow::Result<RunConfig> {
        let snapshot = from_run.map(|r| r.join(CONFIG_FILE)).filter(|p| p.exists());
        let path = self.config.clone().or(snapshot);
        let overrides =
            Overrides { seed: self.seed, scale: self.scale.as_deref().map(|s| s.parse()).transpose()?, variant };
        RunConfig::resolve(path.as_deref(), &overrides)
    }

    fn dataset(&self, cfg: &RunConfig) -> anyhow::Result<Dataset> {
        Dataset::resolve(self.data.as_deref(), &cfg.data)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn scored_stage(run: &Path) -> anyhow::Result<Phase> {
    match run_phase(run)? {
        Phase::Pretrain => bail!("{} is a pretraining run; it produces no SR output", run.display()),
        p => Ok(p),
    }
}

fn stage_number(p: Phase) -> u8 {
    if p == Phase::Stage2 {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeData(c) => {
            let cfg = c.resolve(None, None)?;
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let ds = Dataset::synthesize(&cfg.data)?;
            write_dataset(run.root(), &ds)?;
            println!("wrote {} train and {} val items to {}", ds.train.len(), ds.val.len(), c.out.display());
            run.complete(&cfg.data)
        }
        Command::PretrainCodebook(c) => {
            let cfg = c.resolve(None, None)?;
            print_json(&pipeline::pretrain(&c.out, &cfg, &c.dataset(&cfg)?, c.overwrite)?)
        }
        Command::TrainStage1 { from, common: c } => {
            let cfg = c.resolve(Some(&from), None)?;
            print_json(&pipeline::stage1(&from, &c.out, &cfg, &c.dataset(&cfg)?, c.overwrite)?)
        }
        Command::TrainStage2 { from, variant, common: c } => {
            let cfg = c.resolve(Some(&from), variant)?;
            print_json(&pipeline::stage2(&from, &c.out, &cfg, &c.dataset(&cfg)?, c.overwrite)?)
        }
        Command::Infer { from, input, common: c } => {
            let cfg = c.resolve(Some(&from), None)?;
            let phase = scored_stage(&from)?;
            let state = load_run_state(&from, phase, &cfg)?;
            let lr = read_image(&input)?;
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let pred = state.model.sr_forward(&lr, stage_number(phase))?;
            let s_hat = uncertainty_map(&state.model, &lr)?;
            write_atomic(&run.path("sr.tvqf"), &encode_image(&pred.sr))?;
            write_png(&run.path("sr.png"), &pred.sr)?;
            write_atomic(&run.path("uncertainty.tvqf"), &encode_image(&s_hat))?;
            let peak = s_hat.data().iter().cloned().fold(0.0, f64::max);
            let scaled = s_hat.data().iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
            let (_, h, w) = s_hat.dims();
            write_png(&run.path("uncertainty.png"), &texvq_core::image::ImagePatch::from_vec(1, h, w, scaled)?)?;
            run.complete(&serde_json::json!({ "input": input, "phase": phase }))
        }
        Command::Evaluate { from, common: c } => {
            let cfg = c.resolve(Some(&from), None)?;
            let phase = scored_stage(&from)?;
            let state = load_run_state(&from, phase, &cfg)?;
            let ds = c.dataset(&cfg)?;
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let sr = evaluate_sr(&state.model, stage_number(phase), &ds.val)?;
            let bic = evaluate_bicubic(&ds.val, cfg.train.model.scale)?;
            write_metric_csv(&run.path("metrics.csv"), &sr)?;
            write_metric_csv(&run.path("bicubic.csv"), &bic)?;
            let summary = serde_json::json!({
                "images": sr.rows.len(),
                "psnr_db": sr.mean_psnr(),
                "ssim": sr.mean_ssim(),
                "bicubic_psnr_db": bic.mean_psnr(),
                "bicubic_ssim": bic.mean_ssim(),
            });
            print_json(&summary)?;
            run.complete(&summary)
        }
        Command::HitRate { from, k, common: c } => {
            let cfg = c.resolve(Some(&from), None)?;
            let ks = if k.is_empty() { cfg.eval.hit_rate_k.clone() } else { k };
            let phase = scored_stage(&from)?;
            let state = load_run_state(&from, phase, &cfg)?;
            let ds = c.dataset(&cfg)?;
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let reports = hit_rates(&state.model, &ds.val, &ks)?;
            write_hit_rate_csv(&run.path("hit_rate.csv"), &reports)?;
            for r in &reports {
                println!("k={} hits={} total={} rate={:.4}", r.k, r.hits, r.total, r.rate);
            }
            run.complete(&ks)
        }
        Command::BenchMatching { k, repetitions, common: c } => {
            let mut cfg = c.resolve(None, None)?;
            if !k.is_empty() {
                cfg.bench.codebook_sizes = k;
            }
            if let Some(r) = repetitions {
                cfg.bench.repetitions = r;
            }
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let rows = bench_matching(&cfg.bench, cfg.train.seed)?;
            write_bench_csv(&run.path("bench.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:>6} K={:<5} {:.3e}s slope {:.3}",
                    r.matcher.name(),
                    r.codebook_size,
                    r.median_seconds,
                    r.slope
                );
            }
            run.complete(&cfg.bench)
        }
        Command::Plot { from, common: c } => {
            let cfg = c.resolve(None, None)?;
            let svg = chart_for(&from)?.render()?;
            let run = RunDir::create(&c.out, &cfg, c.overwrite)?;
            let stem = from.file_stem().and_then(|s| s.to_str()).unwrap_or("chart");
            let path = run.path(&format!("{stem}.svg"));
            std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
            run.complete(&serde_json::json!({ "from": from }))
        }
        Command::Ablate { from, variant, common: c } => {
            let cfg = c.resolve(Some(&from), variant)?;
            let variants = match variant {
                Some(v) => vec![v],
                None => Variant::ALL.to_vec(),
            };
            let rows = pipeline::ablate(&from, &c.out, &cfg, &c.dataset(&cfg)?, &variants, c.overwrite)?;
            print_json(&rows)
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
