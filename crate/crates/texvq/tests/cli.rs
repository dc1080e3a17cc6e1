//! Command-line behaviour on a tiny configuration.

use std::path::{Path, PathBuf};

use texvq::cli::{dispatch, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use texvq::formats::{decode_checkpoint, encode_checkpoint, FormatError};
use texvq_core::networks::Phase;

const TINY: &str = r#"
[data]
count = 40

[train]
batch_size = 4
pretrain_steps = 20
stage1_steps = 10
stage2_steps = 10
probe_items = 8
dead_code_interval = 10
"#;

fn texvq(args: &[&str]) -> i32 {
    let mut argv = vec!["texvq"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Runs {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Runs {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Runs { _tmp: tmp, root, config }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Pretraining, stage 1 and stage 2 (full variant).
    fn train(&self) -> (PathBuf, PathBuf, PathBuf) {
        let (pre, s1, s2) = (self.dir("pre"), self.dir("s1"), self.dir("s2"));
        assert_eq!(texvq(&["pretrain-codebook", "--config", s(&self.config), "--out", s(&pre)]), EXIT_OK);
        assert_eq!(texvq(&["train-stage1", "--from", s(&pre), "--out", s(&s1)]), EXIT_OK);
        assert_eq!(texvq(&["train-stage2", "--from", s(&s1), "--variant", "full", "--out", s(&s2)]), EXIT_OK);
        (pre, s1, s2)
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(texvq(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(texvq(&["pretrain-codebook"]), EXIT_USAGE);
    assert_eq!(texvq(&["pretrain-codebook", "--out", "x", "--scale", "3"]), EXIT_USAGE);
    assert_eq!(texvq(&["train-stage2", "--from", "a", "--out", "b", "--variant", "bogus"]), EXIT_USAGE);
    assert_eq!(texvq(&["--help"]), EXIT_OK);
}

#[test]
fn training_chain_and_reports() {
    let runs = Runs::new();
    let (pre, s1, s2) = runs.train();

    // A completed run is protected unless --overwrite is given.
    assert_eq!(texvq(&["pretrain-codebook", "--config", s(&runs.config), "--out", s(&pre)]), EXIT_FAILURE);
    // Stage 2 refuses a pretraining run as its source.
    assert_eq!(texvq(&["train-stage2", "--from", s(&pre), "--out", s(&runs.dir("bad"))]), EXIT_FAILURE);

    let hr = runs.dir("hr");
    assert_eq!(texvq(&["hit-rate", "--from", s(&s1), "--k", "1", "3", "5", "--out", s(&hr)]), EXIT_OK);
    let table = std::fs::read_to_string(hr.join("hit_rate.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "k,hits,total,rate");
    assert_eq!(lines.len(), 4);

    let (e1, e2) = (runs.dir("e1"), runs.dir("e2"));
    assert_eq!(texvq(&["evaluate", "--from", s(&s2), "--out", s(&e1)]), EXIT_OK);
    assert_eq!(texvq(&["evaluate", "--from", s(&s2), "--out", s(&e2)]), EXIT_OK);
    let m1 = std::fs::read(e1.join("metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(e2.join("metrics.csv")).unwrap());
    let text = String::from_utf8(m1).unwrap();
    assert!(text.starts_with("image_id,psnr_db,ssim\n"));
    assert!(text.lines().last().unwrap().starts_with("mean,"));

    let lr = runs.dir("lr.tvqf");
    let ds = texvq::data::Dataset::synthesize(&texvq::config::RunConfig::load(&runs.config).unwrap().data).unwrap();
    std::fs::write(&lr, texvq::formats::encode_image(&ds.val[0].lr)).unwrap();
    let inf = runs.dir("infer");
    assert_eq!(texvq(&["infer", "--from", s(&s2), "--input", s(&lr), "--out", s(&inf)]), EXIT_OK);
    for f in ["sr.png", "sr.tvqf", "uncertainty.png", "uncertainty.tvqf"] {
        assert!(inf.join(f).exists(), "{f}");
    }

    let plot = runs.dir("plot");
    assert_eq!(texvq(&["plot", "--from", s(&hr.join("hit_rate.csv")), "--out", s(&plot)]), EXIT_OK);
    assert!(std::fs::read_to_string(plot.join("hit_rate.svg")).unwrap().starts_with("<svg"));

    // Checkpoints re-encode to identical bytes and reject the wrong phase or architecture.
    let bytes = std::fs::read(s2.join("checkpoint.tvqk")).unwrap();
    let (state, hash) = decode_checkpoint(&bytes, Some(Phase::Stage2), None).unwrap();
    assert_eq!(encode_checkpoint(&state, &hash), bytes);
    assert!(matches!(decode_checkpoint(&bytes, Some(Phase::Stage1), None), Err(FormatError::Phase { .. })));
    let mut other = hash;
    other[0] ^= 1;
    assert!(matches!(decode_checkpoint(&bytes, None, Some(&other)), Err(FormatError::ConfigHash { .. })));
}

#[test]
fn scale_override_conflicts_with_a_stage1_source() {
    let runs = Runs::new();
    let pre = runs.dir("pre");
    assert_eq!(texvq(&["pretrain-codebook", "--config", s(&runs.config), "--out", s(&pre)]), EXIT_OK);
    let out = runs.dir("s1x4");
    assert_eq!(texvq(&["train-stage1", "--from", s(&pre), "--scale", "4", "--out", s(&out)]), EXIT_FAILURE);
}

#[test]
fn bench_writes_a_plottable_table() {
    let runs = Runs::new();
    let out = runs.dir("bench");
    assert_eq!(texvq(&["bench-matching", "--k", "8", "16", "--repetitions", "1", "--out", s(&out)]), EXIT_OK);
    let csv = out.join("bench.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("matcher,K,median_seconds,slope\n"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(texvq(&["plot", "--from", s(&csv), "--out", s(&runs.dir("plot"))]), EXIT_OK);
}
