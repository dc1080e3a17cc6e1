//! Run directories.
//!
//! `config.toml` is written before any work starts. `complete.json` marks a
//! finished run; a finished run is never touched again unless the caller
//! passes `overwrite`. An unfinished run with the same config resumes from
//! its checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const COMPLETE_FILE: &str = "complete.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.tvqk";

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pending: Vec<String>,
}

impl RunDir {
    /// Opens `root` for a new or resumed run of `config`.
    pub fn create(root: &Path, config: &RunConfig, overwrite: bool) -> anyhow::Result<Self> {
        let snapshot = config.to_toml();
        if root.exists() {
            let complete = root.join(COMPLETE_FILE).exists();
            let existing = fs::read_to_string(root.join(CONFIG_FILE)).ok();
            let nonempty = fs::read_dir(root)?.next().is_some();
            if overwrite {
                if nonempty && existing.is_none() {
                    bail!("{} is not a run directory; refusing to overwrite it", root.display());
                }
                fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
            } else if complete {
                bail!("{} holds a completed run; pass --overwrite to replace it", root.display());
            } else if let Some(prev) = existing {
                if prev != snapshot {
                    bail!("{} holds an unfinished run with a different config; pass --overwrite", root.display());
                }
            } else if nonempty {
                bail!("{} exists and is not a run directory", root.display());
            }
        }
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        fs::write(root.join(CONFIG_FILE), snapshot)?;
        Ok(RunDir { root: root.to_path_buf(), pending: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path(CHECKPOINT_FILE)
    }

    /// Queues a log record; records reach disk on [`RunDir::commit_log`].
    pub fn log<T: Serialize>(&mut self, record: &T) {
        self.pending.push(serde_json::to_string(record).expect("log records serialise"));
    }

    /// Appends queued records. Called right after each checkpoint so the log
    /// never runs ahead of the state a resume would start from.
    pub fn commit_log(&mut self) -> anyhow::Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.path(LOG_FILE))?;
        for line in self.pending.drain(..) {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn complete<T: Serialize>(mut self, summary: &T) -> anyhow::Result<()> {
        self.commit_log()?;
        fs::write(self.path(COMPLETE_FILE), serde_json::to_string_pretty(summary)?)?;
        Ok(())
    }
}

/// Path of a completed run's artefact, failing if the run is unfinished.
pub fn completed_artifact(run: &Path, name: &str) -> anyhow::Result<PathBuf> {
    if !run.join(COMPLETE_FILE).exists() {
        bail!("{} is not a completed run", run.display());
    }
    let p = run.join(name);
    if !p.exists() {
        bail!("{} has no {name}", run.display());
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completed_runs_need_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let cfg = RunConfig::default();
        let run = RunDir::create(&root, &cfg, false).unwrap();
        run.complete(&"done").unwrap();
        let err = RunDir::create(&root, &cfg, false).unwrap_err();
        assert!(err.to_string().contains("--overwrite"));
        RunDir::create(&root, &cfg, true).unwrap();
        assert!(!root.join(COMPLETE_FILE).exists());
    }

    #[test]
    fn unfinished_runs_resume_only_with_same_config() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let cfg = RunConfig::default();
        RunDir::create(&root, &cfg, false).unwrap();
        RunDir::create(&root, &cfg, false).unwrap();
        let mut other = cfg.clone();
        other.train.stage1_steps += 1;
        assert!(RunDir::create(&root, &other, false).is_err());
    }

    #[test]
    fn foreign_directories_are_left_alone() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("notes.txt"), "x").unwrap();
        assert!(RunDir::create(tmp.path(), &RunConfig::default(), true).is_err());
        assert!(tmp.path().join("notes.txt").exists());
    }
}
