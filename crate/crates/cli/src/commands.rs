//! The `train`, `eval` and `gen-stream` commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lqa_core::config::{Baseline, RunConfig};
use lqa_core::experiment::{self, columns, Event};
use lqa_core::metrics::{
    avg_forget, avg_performance, detection_report, diversity, eval_task, locality, DetectionReport, PerformanceMatrix,
};
use lqa_core::taskgen::{gen_synthetic_stream, load_stream, write_stream, StreamSpec, TaskStream};
use lqa_core::trainer::Trainer;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::rundir::{self, RunSummary};
use crate::Invalid;

/// Z values for diversity and locality.
pub const Z_GRID: [usize; 4] = [2, 3, 5, 10];

pub fn stream_sha256(stream: &TaskStream) -> String {
    let mut buf = Vec::new();
    write_stream(stream, &mut buf).expect("writing to memory");
    checkpoint::sha256_hex(&buf)
}

pub struct TrainOptions {
    pub out: PathBuf,
    pub force: bool,
    pub resume: bool,
}

/// Fields of two configurations that differ, by name.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let ta = toml::Value::try_from(a).expect("config serializes");
    let tb = toml::Value::try_from(b).expect("config serializes");
    let (ta, tb) = (ta.as_table().cloned().unwrap_or_default(), tb.as_table().cloned().unwrap_or_default());
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| ta.get(*k) != tb.get(*k))
        .cloned()
        .collect()
}

fn summary_metrics(s: &mut RunSummary) {
    let rows = &s.matrix.rows;
    let n_seen = s.matrix.n_seen;
    if let Ok((a, u)) = avg_performance(rows, n_seen) {
        s.a_n = Some(a);
        s.a_n_unseen = u;
    }
    s.f_n = if s.config.baseline == Baseline::Multitask {
        None
    } else {
        avg_forget(rows, n_seen).ok()
    };
}

/// Trains one configuration into `opts.out`, writing a checkpoint, the
/// matrix and the summary after every stage. Returns the summary.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let stream = experiment::load_stream_for(cfg)?;
    let stream_sha = stream_sha256(&stream);
    let out = &opts.out;
    let existing = out.join(rundir::SUMMARY).exists();
    let mut resume_state = None;
    let mut summary = if existing && opts.resume {
        let s = rundir::read_summary(out)?;
        let diff = config_diff(&s.config, cfg);
        if !diff.is_empty() {
            return Err(Invalid(format!("cannot resume {}: config differs in {}", out.display(), diff.join(", "))).into());
        }
        if s.stream_sha256 != stream_sha {
            return Err(Invalid(format!("cannot resume {}: the task stream changed", out.display())).into());
        }
        if let Some(ck) = rundir::latest_checkpoint(out) {
            let found = checkpoint::digest_dir(&ck)?;
            let expected = s.stage_digests.last().cloned().unwrap_or_default();
            if found != expected {
                return Err(lqa_core::Error::DigestMismatch {
                    what: ck.display().to_string(),
                    expected,
                    found,
                }
                .into());
            }
            let trainer = checkpoint::load(&ck)?;
            resume_state = Some((trainer, s.matrix.clone()));
        }
        s
    } else {
        if out.exists() && fs::read_dir(out)?.next().is_some() {
            if !opts.force {
                return Err(Invalid(format!(
                    "{} is not empty; pass --force to overwrite or --resume to continue",
                    out.display()
                ))
                .into());
            }
            fs::remove_dir_all(out)?;
        }
        fs::create_dir_all(out)?;
        let cols = columns(cfg, &stream);
        RunSummary {
            variant: cfg.variant_name(),
            config: cfg.clone(),
            stream_sha256: stream_sha,
            stages_total: match cfg.baseline {
                Baseline::Multitask => 1,
                _ => stream.seen.len(),
            },
            stage_digests: Vec::new(),
            matrix: PerformanceMatrix::new(
                cols.iter().map(|t| t.id).collect(),
                cols.iter().map(|t| t.name.clone()).collect(),
                stream.seen.len(),
            ),
            a_n: None,
            a_n_unseen: None,
            f_n: None,
        }
    };
    fs::write(out.join(rundir::CONFIG), cfg.to_toml_string())?;

    // Keep log lines of completed stages only.
    let done = summary.stage_digests.len();
    let log_path = out.join(rundir::LOSSES);
    let kept: String = fs::read_to_string(&log_path)
        .unwrap_or_default()
        .lines()
        .filter(|l| {
            serde_json::from_str::<lqa_core::trainer::StepLog>(l)
                .map(|r| r.stage < done)
                .unwrap_or(false)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&log_path, kept)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;

    let outcome = experiment::run(cfg, &stream, resume_state, &mut |ev| {
        match ev {
            Event::Step(s) => {
                let line = serde_json::to_string(s).map_err(lqa_core::Error::from)?;
                writeln!(log, "{line}")?;
            }
            Event::Stage { trainer, matrix } => {
                let stage = trainer.stages;
                let digest = checkpoint::save(trainer, &rundir::stage_dir(out, stage))?;
                summary.stage_digests.push(digest);
                summary.matrix = matrix.clone();
                summary_metrics(&mut summary);
                fs::write(out.join(rundir::MATRIX_CSV), matrix.to_csv())?;
                rundir::write_summary(out, &summary).map_err(|e| lqa_core::Error::Checkpoint(e.to_string()))?;
                log::info!(
                    "{}: stage {stage}/{} done, seen mean {:.3}",
                    summary.variant,
                    summary.stages_total,
                    matrix.final_row().map(|r| r[..matrix.n_seen].iter().sum::<f64>() / matrix.n_seen as f64).unwrap_or(0.0)
                );
            }
        }
        Ok(())
    })?;
    log.flush()?;
    let report = eval_report(&outcome.trainer, &stream, Some(&summary.matrix))?;
    fs::write(out.join(rundir::EVAL), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub a_n: f64,
    pub a_n_unseen: Option<f64>,
    /// Absent for a single-stage run or without the training matrix.
    pub f_n: Option<f64>,
    pub finals: Vec<(String, f64)>,
    pub detection_open: DetectionReport,
    pub detection_closed: DetectionReport,
    /// `(Z, value)`; absent where memory or keys are too few.
    pub diversity: Vec<(usize, Option<f64>)>,
    pub locality: Vec<(usize, Option<f64>)>,
}

/// Full evaluation of a trained state. `history` supplies the earlier rows
/// of the performance matrix; its last row is replaced by a fresh one.
pub fn eval_report(
    trainer: &Trainer,
    stream: &TaskStream,
    history: Option<&PerformanceMatrix>,
) -> lqa_core::Result<EvalReport> {
    let cfg = &trainer.config;
    let cols = columns(cfg, stream);
    let n_seen = stream.seen.len();
    let final_row: Vec<f64> = cols.iter().map(|t| eval_task(trainer, t)).collect::<lqa_core::Result<_>>()?;
    let mut rows: Vec<Vec<f64>> = history
        .map(|m| m.rows[..m.rows.len().saturating_sub(1)].to_vec())
        .unwrap_or_default();
    rows.push(final_row.clone());
    let (a_n, a_n_unseen) = avg_performance(&rows, n_seen)?;
    let f_n = if cfg.baseline == Baseline::Multitask || history.is_none() {
        None
    } else {
        avg_forget(&rows, n_seen).ok()
    };
    let all: Vec<_> = stream
        .tasks()
        .flat_map(|t| t.test.iter().map(move |s| (s, t.id)))
        .collect();
    let seen: Vec<_> = stream
        .seen
        .iter()
        .flat_map(|t| t.test.iter().map(move |s| (s, t.id)))
        .collect();
    let keys: Vec<Vec<f64>> = (0..trainer.pool.meta_keys.len())
        .map(|i| trainer.pool.meta_key_f64(i))
        .collect();
    let mem: Vec<Vec<f64>> = trainer.memory.entries.iter().map(|e| e.query_f64()).collect();
    Ok(EvalReport {
        a_n,
        a_n_unseen,
        f_n,
        finals: cols.iter().map(|t| t.name.clone()).zip(final_row).collect(),
        detection_open: detection_report(trainer, &all, true)?,
        detection_closed: detection_report(trainer, &seen, false)?,
        diversity: Z_GRID.iter().map(|&z| (z, diversity(&keys, &mem, z).ok())).collect(),
        locality: Z_GRID.iter().map(|&z| (z, locality(&keys, &mem, z).ok())).collect(),
    })
}

/// Resolves a checkpoint argument: a checkpoint directory, or a run
/// directory (its latest checkpoint, with the training matrix).
pub fn resolve_checkpoint(path: &Path) -> anyhow::Result<(PathBuf, Option<RunSummary>)> {
    if path.join(checkpoint::MANIFEST).is_file() {
        return Ok((path.to_path_buf(), None));
    }
    if path.join(rundir::SUMMARY).is_file() {
        let s = rundir::read_summary(path)?;
        let ck = rundir::latest_checkpoint(path)
            .ok_or_else(|| Invalid(format!("{} has no completed stage", path.display())))?;
        let found = checkpoint::digest_dir(&ck)?;
        let expected = s.stage_digests.last().cloned().unwrap_or_default();
        if found != expected {
            return Err(lqa_core::Error::DigestMismatch {
                what: ck.display().to_string(),
                expected,
                found,
            }
            .into());
        }
        return Ok((ck, Some(s)));
    }
    Err(Invalid(format!("{} is neither a checkpoint nor a run directory", path.display())).into())
}

/// `--stream` accepts a stream file or a generator spec (`.toml`); without
/// it the stream is rebuilt from the checkpoint's configuration.
pub fn resolve_stream(arg: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<TaskStream> {
    let stream = match arg {
        None => experiment::load_stream_for(cfg)?,
        Some(p) if p.extension().is_some_and(|e| e == "toml") => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let spec: StreamSpec = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?;
            gen_synthetic_stream(&spec)?
        }
        Some(p) => load_stream(p)?,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn eval(ckpt: &Path, stream: Option<&Path>) -> anyhow::Result<EvalReport> {
    let (dir, summary) = resolve_checkpoint(ckpt)?;
    let trainer = checkpoint::load(&dir)?;
    let stream = resolve_stream(stream, &trainer.config)?;
    // Earlier rows only describe this stream if it is the training stream.
    let history = summary
        .as_ref()
        .filter(|s| s.stream_sha256 == stream_sha256(&stream))
        .map(|s| &s.matrix);
    Ok(eval_report(&trainer, &stream, history)?)
}

pub fn render_eval(r: &EvalReport) -> String {
    let mut s = String::new();
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    s.push_str(&format!("A_N   {}\n", pct(r.a_n)));
    match r.a_n_unseen {
        Some(v) => s.push_str(&format!("A_N'  {}\n", pct(v))),
        None => s.push_str("A_N'  n/a (no unseen tasks)\n"),
    }
    match r.f_n {
        Some(v) => s.push_str(&format!("F_N   {}\n", pct(v))),
        None => s.push_str("F_N   n/a (single stage or no training history)\n"),
    }
    s.push_str("final scores:\n");
    for (name, v) in &r.finals {
        s.push_str(&format!("  {name:<24} {}\n", pct(*v)));
    }
    let det = |name: &str, d: &DetectionReport| {
        let mut line = format!(
            "{name}: accuracy {} seen macro-F1 {}",
            pct(d.accuracy),
            pct(d.seen_macro_f1)
        );
        if let Some(u) = d.unseen_f1 {
            line.push_str(&format!(" unseen F1 {}", pct(u)));
        }
        line.push('\n');
        line
    };
    s.push_str(&det("detection (open world)", &r.detection_open));
    s.push_str(&det("detection (closed world)", &r.detection_closed));
    let grid = |name: &str, v: &[(usize, Option<f64>)]| {
        let cells: Vec<String> = v
            .iter()
            .map(|(z, x)| match x {
                Some(x) => format!("Z={z}: {x:.4}"),
                None => format!("Z={z}: n/a"),
            })
            .collect();
        format!("{name:<9} {}\n", cells.join("  "))
    };
    s.push_str(&grid("diversity", &r.diversity));
    s.push_str(&grid("locality", &r.locality));
    s
}

pub fn gen_stream(spec: Option<&Path>, out: &Path) -> anyhow::Result<TaskStream> {
    let spec: StreamSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?
        }
        None => StreamSpec::default(),
    };
    let stream = gen_synthetic_stream(&spec)?;
    lqa_core::taskgen::save_stream(&stream, out)?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_diff_names_changed_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert!(config_diff(&a, &b).is_empty());
        b.lr = 0.5;
        b.no_meta = true;
        b.order_seed = Some(3);
        let mut d = config_diff(&a, &b);
        d.sort();
        assert_eq!(d, ["lr", "no_meta", "order_seed"]);
    }

    #[test]
    fn stream_hash_tracks_content() {
        let spec = lqa_core::taskgen::StreamSpec {
            samples_per_split: 8,
            ..Default::default()
        };
        let s = gen_synthetic_stream(&spec).unwrap();
        let mut t = s.clone();
        assert_eq!(stream_sha256(&s), stream_sha256(&t));
        t.seen[0].test[0].answer.push('x');
        assert_ne!(stream_sha256(&s), stream_sha256(&t));
    }
}
