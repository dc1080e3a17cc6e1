//! Wall-clock scaling of the two matchers against codebook size.
//!
//! `topk` runs candidate retrieval, fusion and re-quantisation per cell,
//! which costs `O(cells * K * n_z)`. `global` runs one softmax attention
//! layer over the joint sequence of cells and codes, `O((cells + K)^2 * n_z)`.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use texvq_core::codebook::{quantize_topk, Codebook, FusionParams, GlobalMatcher, LatentGrid};
use texvq_core::dataset::mix_seed;

use crate::config::BenchConfig;

pub const LATENT_DIM: usize = 16;
/// Each timed sample repeats the workload until it lasts at least this long.
const MIN_SAMPLE_SECONDS: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Topk,
    Global,
}

impl Matcher {
    pub const ALL: [Matcher; 2] = [Matcher::Topk, Matcher::Global];

    pub fn name(self) -> &'static str {
        match self {
            Matcher::Topk => "topk",
            Matcher::Global => "global",
        }
    }
}

/// One CSV row: `matcher,K,median_seconds,slope`. `slope` is the log-log
/// fit over all rows of the same matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub matcher: Matcher,
    #[serde(rename = "K")]
    pub codebook_size: usize,
    pub median_seconds: f64,
    pub slope: f64,
}

struct Workload {
    latents: LatentGrid,
    codebook: Codebook,
    fusion: FusionParams,
    global: GlobalMatcher,
    k: usize,
}

impl Workload {
    fn new(cfg: &BenchConfig, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, size as u64));
        let mut fusion = FusionParams::identity_gate(LATENT_DIM, cfg.k, &mut rng);
        fusion.gate = 0.5;
        Workload {
            latents: LatentGrid::random(cfg.grid, cfg.grid, LATENT_DIM, &mut rng),
            codebook: Codebook::random(size, LATENT_DIM, &mut rng),
            fusion,
            global: GlobalMatcher::random(LATENT_DIM, &mut rng),
            k: cfg.k,
        }
    }

    fn run(&self, m: Matcher) -> usize {
        match m {
            Matcher::Topk => quantize_topk(&self.latents, &self.codebook, self.k, &self.fusion).unwrap().0.indices[0],
            Matcher::Global => self.global.match_indices(&self.latents, &self.codebook).unwrap()[0],
        }
    }

    fn time(&self, m: Matcher, inner: usize) -> f64 {
        let start = Instant::now();
        let mut sink = 0usize;
        for _ in 0..inner {
            sink = sink.wrapping_add(std::hint::black_box(self.run(m)));
        }
        std::hint::black_box(sink);
        start.elapsed().as_secs_f64() / inner as f64
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Median per-call seconds for every matcher and codebook size.
pub fn bench_matching(cfg: &BenchConfig, seed: u64) -> anyhow::Result<Vec<BenchRow>> {
    anyhow::ensure!(cfg.codebook_sizes.len() >= 2, "need at least two codebook sizes");
    anyhow::ensure!(cfg.repetitions >= 1 && cfg.grid >= 1, "repetitions and grid must be positive");
    anyhow::ensure!(
        cfg.codebook_sizes.iter().all(|&s| s >= cfg.k),
        "every codebook size must be at least k = {}",
        cfg.k
    );
    let workloads: Vec<Workload> = cfg.codebook_sizes.iter().map(|&s| Workload::new(cfg, s, seed)).collect();
    let mut rows = Vec::new();
    for m in Matcher::ALL {
        // Calibrate the repeat count on the smallest codebook and keep it fixed.
        let probe = workloads[0].time(m, 1).max(1e-9);
        let inner = ((MIN_SAMPLE_SECONDS / probe).ceil() as usize).clamp(1, 100_000);
        let mut points = Vec::new();
        for (w, &size) in workloads.iter().zip(&cfg.codebook_sizes) {
            w.time(m, inner);
            let mut samples: Vec<f64> = (0..cfg.repetitions).map(|_| w.time(m, inner)).collect();
            points.push((size as f64, median(&mut samples)));
        }
        let slope = log_log_slope(&points);
        rows.extend(points.into_iter().map(|(k, t)| BenchRow {
            matcher: m,
            codebook_size: k as usize,
            median_seconds: t,
            slope,
        }));
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv(path: &Path) -> anyhow::Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<BenchRow>, _>>()?)
}

/// Fitted slope of a matcher's rows.
pub fn slope_of(rows: &[BenchRow], m: Matcher) -> Option<f64> {
    rows.iter().find(|r| r.matcher == m).map(|r| r.slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0].iter().map(|&k| (k, 3.0 * k * k)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_header_matches_contract() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("bench.csv");
        let rows = vec![BenchRow { matcher: Matcher::Topk, codebook_size: 64, median_seconds: 1e-5, slope: 1.0 }];
        write_bench_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("matcher,K,median_seconds,slope\n"));
        assert_eq!(read_bench_csv(&p).unwrap(), rows);
    }
}
