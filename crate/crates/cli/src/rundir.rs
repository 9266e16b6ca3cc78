//! Run directory layout and its summary record.

use std::fs;
use std::path::{Path, PathBuf};

use lqa_core::config::RunConfig;
use lqa_core::metrics::PerformanceMatrix;
use serde::{Deserialize, Serialize};

pub const SUMMARY: &str = "run.json";
pub const CONFIG: &str = "config.toml";
pub const LOSSES: &str = "losses.jsonl";
pub const MATRIX_CSV: &str = "matrix.csv";
pub const EVAL: &str = "eval.json";
pub const CHECKPOINTS: &str = "checkpoints";

/// Contents of `run.json`, rewritten after every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub variant: String,
    pub config: RunConfig,
    pub stream_sha256: String,
    pub stages_total: usize,
    /// Checkpoint digest after each completed stage.
    pub stage_digests: Vec<String>,
    pub matrix: PerformanceMatrix,
    pub a_n: Option<f64>,
    pub a_n_unseen: Option<f64>,
    pub f_n: Option<f64>,
}

impl RunSummary {
    pub fn complete(&self) -> bool {
        self.stage_digests.len() == self.stages_total
    }
}

pub fn stage_dir(run: &Path, stage: usize) -> PathBuf {
    run.join(CHECKPOINTS).join(format!("stage-{stage:02}"))
}

/// Checkpoint of the last completed stage.
pub fn latest_checkpoint(run: &Path) -> Option<PathBuf> {
    let s = read_summary(run).ok()?;
    let n = s.stage_digests.len();
    (n > 0).then(|| stage_dir(run, n))
}

pub fn read_summary(run: &Path) -> anyhow::Result<RunSummary> {
    let text = fs::read_to_string(run.join(SUMMARY))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_summary(run: &Path, s: &RunSummary) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    write_atomic(&run.join(SUMMARY), text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Run directories at or below `root`: every directory holding `run.json`,
/// sorted by path.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if root.join(SUMMARY).is_file() {
        out.push(root.to_path_buf());
    } else if let Ok(rd) = fs::read_dir(root) {
        let mut dirs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            out.extend(find_runs(&d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_dirs_sort_by_stage() {
        let a = stage_dir(Path::new("r"), 2);
        let b = stage_dir(Path::new("r"), 10);
        assert_eq!(a, Path::new("r/checkpoints/stage-02"));
        assert!(a < b);
    }

    #[test]
    fn runs_are_found_below_a_root() {
        let tmp = std::env::temp_dir().join(format!("lqa-rundir-{}", std::process::id()));
        for d in ["b/seed-1", "a/seed-2", "a/seed-1/checkpoints"] {
            fs::create_dir_all(tmp.join(d)).unwrap();
        }
        fs::write(tmp.join("b/seed-1").join(SUMMARY), "{}").unwrap();
        fs::write(tmp.join("a/seed-1").join(SUMMARY), "{}").unwrap();
        let found = find_runs(&tmp);
        fs::remove_dir_all(&tmp).unwrap();
        assert_eq!(found, vec![tmp.join("a/seed-1"), tmp.join("b/seed-1")]);
    }
}
