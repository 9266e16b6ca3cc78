//! Aggregation over completed runs: mean tables and plot-ready series.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lqa_core::config::RunConfig;
use lqa_core::trainer::StepLog;
use serde::{Deserialize, Serialize};

use crate::commands::config_diff;
use crate::rundir::{self, RunSummary};
use crate::Invalid;

/// Config fields allowed to differ between runs of one group.
const SEED_FIELDS: [&str; 3] = ["seed", "order_seed", "sampling_seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub variant: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub a_n: Option<f64>,
    pub a_n_unseen: Option<f64>,
    pub f_n: Option<f64>,
    pub task_names: Vec<String>,
    /// Cell-wise mean of the performance matrices.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub groups: Vec<GroupRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Config fields relevant for compatibility: all but seeds, and all but
/// variant switches when grouping by variant.
fn comparable(cfg: &RunConfig, by_variant: bool) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = 0;
    c.order_seed = None;
    c.sampling_seed = None;
    if by_variant {
        let base = RunConfig::default();
        c.baseline = base.baseline;
        c.no_memory = false;
        c.no_adb = false;
        c.no_meta = false;
        c.no_task_prompt = false;
        c.no_format_prompt = false;
        c.no_general_prompt = false;
        c.no_sched_sampling = false;
        c.no_gt_identity = false;
        c.no_neg_samples = false;
        c.no_sample_div = false;
        c.no_memory_div = false;
        c.no_cluster = false;
    }
    c
}

pub fn load_runs(paths: &[PathBuf]) -> anyhow::Result<Vec<(PathBuf, RunSummary)>> {
    let mut runs = Vec::new();
    for p in paths {
        let found = rundir::find_runs(p);
        if found.is_empty() {
            return Err(Invalid(format!("no run found under {}", p.display())).into());
        }
        for r in found {
            let s = rundir::read_summary(&r)?;
            if !s.complete() {
                return Err(Invalid(format!("run {} is incomplete", r.display())).into());
            }
            runs.push((r, s));
        }
    }
    Ok(runs)
}

/// Groups runs (by variant, or all together) and averages every cell.
/// Runs in a group must agree on everything but their seeds.
pub fn build(runs: &[(PathBuf, RunSummary)], by_variant: bool) -> anyhow::Result<Report> {
    let first = runs.first().ok_or_else(|| Invalid("no runs given".into()))?;
    let reference = comparable(&first.1.config, by_variant);
    for (p, s) in runs {
        let diff: Vec<String> = config_diff(&reference, &comparable(&s.config, by_variant))
            .into_iter()
            .filter(|f| !SEED_FIELDS.contains(&f.as_str()))
            .collect();
        if !diff.is_empty() {
            return Err(Invalid(format!(
                "run {} is incompatible with {}: fields differ: {}",
                p.display(),
                first.0.display(),
                diff.join(", ")
            ))
            .into());
        }
    }
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for (_, s) in runs {
        let key = if by_variant { s.variant.clone() } else { "all".to_string() };
        groups.entry(key).or_default().push(s);
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let shape = (members[0].matrix.rows.len(), members[0].matrix.task_ids.len());
        let mut cells = vec![vec![0.0; shape.1]; shape.0];
        let mut same_shape = true;
        for m in &members {
            if (m.matrix.rows.len(), m.matrix.task_ids.len()) != shape {
                same_shape = false;
                break;
            }
            for (i, r) in m.matrix.rows.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    cells[i][j] += v / members.len() as f64;
                }
            }
        }
        let collect = |f: fn(&RunSummary) -> Option<f64>| -> Option<f64> {
            let xs: Vec<f64> = members.iter().filter_map(|s| f(s)).collect();
            if xs.len() == members.len() {
                mean(&xs)
            } else {
                None
            }
        };
        let names_agree = members.iter().all(|m| m.matrix.task_names == members[0].matrix.task_names);
        out.push(GroupRow {
            variant: key,
            runs: members.len(),
            seeds: members.iter().map(|s| s.config.seed).collect(),
            a_n: collect(|s| s.a_n),
            a_n_unseen: collect(|s| s.a_n_unseen),
            f_n: collect(|s| s.f_n),
            // Different curricula permute the columns: only a positional mean.
            task_names: if names_agree {
                members[0].matrix.task_names.clone()
            } else {
                (1..=shape.1).map(|j| format!("col{j}")).collect()
            },
            matrix: if same_shape { cells } else { Vec::new() },
        });
    }
    Ok(Report { groups: out })
}

pub fn render(report: &Report) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "n/a".into());
    let mut s = String::from("| variant | runs | A_N | A_N' | F_N |\n|---|---|---|---|---|\n");
    for g in &report.groups {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            g.variant,
            g.runs,
            cell(g.a_n),
            cell(g.a_n_unseen),
            cell(g.f_n)
        ));
    }
    for g in &report.groups {
        if g.matrix.is_empty() {
            continue;
        }
        s.push_str(&format!("\nmean performance matrix, {}:\n", g.variant));
        s.push_str(&format!("| stage | {} |\n", g.task_names.join(" | ")));
        s.push_str(&format!("|---|{}\n", "---|".repeat(g.task_names.len())));
        for (i, r) in g.matrix.iter().enumerate() {
            let cells: Vec<String> = r.iter().map(|v| format!("{:.1}", v * 100.0)).collect();
            s.push_str(&format!("| {} | {} |\n", i + 1, cells.join(" | ")));
        }
    }
    s
}

#[derive(Serialize)]
struct ScheduleRow<'a> {
    run: &'a str,
    stage: usize,
    step: u64,
    global_step: u64,
    epsilon: f64,
    gold_fraction: f64,
    inferred_accuracy: Option<f64>,
    l_qa: f64,
    l_t: f64,
    l_m: f64,
    l_mem: f64,
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    run: &'a str,
    stage: usize,
    /// Mean score over the seen tasks learned so far.
    learned_mean: f64,
}

/// Writes `summary.md`, `summary.json`, `series_schedule.jsonl` and
/// `series_accuracy.jsonl` into `out`.
pub fn write(report: &Report, runs: &[(PathBuf, RunSummary)], out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.md"), render(report))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(report)? + "\n")?;
    let mut sched = String::new();
    let mut acc = String::new();
    for (p, s) in runs {
        let name = p.display().to_string();
        let text = fs::read_to_string(p.join(rundir::LOSSES)).unwrap_or_default();
        for line in text.lines() {
            let l: StepLog = serde_json::from_str(line)?;
            let row = ScheduleRow {
                run: &name,
                stage: l.stage,
                step: l.step,
                global_step: l.global_step,
                epsilon: l.epsilon,
                gold_fraction: l.gold as f64 / l.batch.max(1) as f64,
                inferred_accuracy: (l.inferred > 0).then(|| l.inferred_correct as f64 / l.inferred as f64),
                l_qa: l.l_qa,
                l_t: l.l_t,
                l_m: l.l_m,
                l_mem: l.l_mem,
            };
            sched.push_str(&serde_json::to_string(&row)?);
            sched.push('\n');
        }
        for (i, r) in s.matrix.rows.iter().enumerate() {
            let learned = if s.stages_total == 1 { s.matrix.n_seen } else { (i + 1).min(s.matrix.n_seen) };
            let row = AccuracyRow {
                run: &name,
                stage: i + 1,
                learned_mean: r[..learned].iter().sum::<f64>() / learned as f64,
            };
            acc.push_str(&serde_json::to_string(&row)?);
            acc.push('\n');
        }
    }
    fs::write(out.join("series_schedule.jsonl"), sched)?;
    fs::write(out.join("series_accuracy.jsonl"), acc)?;
    Ok(())
}
