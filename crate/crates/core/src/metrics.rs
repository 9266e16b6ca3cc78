//! Evaluation: per-task scores, the performance matrix and its summary
//! numbers, key-space diversity and locality, and routing reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::TaskChoice;
use crate::query::cosine_distance;
use crate::taskgen::{Sample, TaskDef};
use crate::trainer::Trainer;

/// Exact-match fraction on the task's test split. Multiple-choice answers
/// are option strings, so the same rule scores option accuracy.
pub fn eval_task(trainer: &Trainer, task: &TaskDef) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::EmptyTestSet(task.id));
    }
    let mut hits = 0usize;
    for s in &task.test {
        hits += trainer.is_correct(s)? as usize;
    }
    Ok(hits as f64 / task.test.len() as f64)
}

/// `rows[i][j]`: score on column task `j` after learning stage `i`. The
/// first `n_seen` columns are the seen tasks in learning order, the rest
/// the unseen tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub task_ids: Vec<u32>,
    pub task_names: Vec<String>,
    pub n_seen: usize,
    pub rows: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(task_ids: Vec<u32>, task_names: Vec<String>, n_seen: usize) -> Self {
        Self {
            task_ids,
            task_names,
            n_seen,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.task_ids.len() {
            return Err(Error::Validation(format!(
                "row has {} scores for {} tasks",
                row.len(),
                self.task_ids.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Comma-separated, header of task names, scores with six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = self.task_names.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }
}

/// `(A_N, A_N')`: means of the final row over seen and over unseen columns.
/// `A_N'` is `None` without unseen tasks.
pub fn avg_performance(rows: &[Vec<f64>], n_seen: usize) -> Result<(f64, Option<f64>)> {
    let last = rows.last().ok_or(Error::EmptyInput)?;
    if n_seen == 0 || n_seen > last.len() {
        return Err(Error::Validation(format!("{n_seen} seen columns in a row of {}", last.len())));
    }
    let seen = last[..n_seen].iter().sum::<f64>() / n_seen as f64;
    let rest = &last[n_seen..];
    let unseen = (!rest.is_empty()).then(|| rest.iter().sum::<f64>() / rest.len() as f64);
    Ok((seen, unseen))
}

/// Mean over the first `N - 1` seen columns of the largest drop from any
/// earlier row to the final row. Rows before a task was learned count too.
pub fn avg_forget(rows: &[Vec<f64>], n_seen: usize) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Validation("forgetting needs at least two stages".into()));
    }
    let last = &rows[n - 1];
    let cols = (n - 1).min(n_seen);
    if cols == 0 {
        return Err(Error::Validation("forgetting needs at least one earlier seen task".into()));
    }
    let mut total = 0.0;
    for j in 0..cols {
        let best = rows[..n - 1]
            .iter()
            .map(|r| r[j] - last[j])
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / (n - 1) as f64)
}

/// Indices of the `z` points nearest to `anchor`, ties by index.
pub fn nearest(anchor: &[f64], points: &[Vec<f64>], z: usize) -> Result<Vec<usize>> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| cosine_distance(anchor, p).map(|v| (v, i)))
        .collect::<Result<_>>()?;
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(z).map(|(_, i)| i).collect())
}

/// Share of distinct memory samples among the `z` nearest to each key.
pub fn diversity(keys: &[Vec<f64>], memory: &[Vec<f64>], z: usize) -> Result<f64> {
    if keys.is_empty() || z == 0 {
        return Err(Error::EmptyInput);
    }
    if memory.len() < z {
        return Err(Error::Validation(format!("memory holds {} samples, fewer than Z={z}", memory.len())));
    }
    let mut union = BTreeSet::new();
    for k in keys {
        union.extend(nearest(k, memory, z)?);
    }
    Ok(union.len() as f64 / (z * keys.len()) as f64)
}

/// Mean cosine similarity between each memory query and its `z` nearest
/// keys.
pub fn locality(keys: &[Vec<f64>], memory: &[Vec<f64>], z: usize) -> Result<f64> {
    if memory.is_empty() || z == 0 {
        return Err(Error::EmptyInput);
    }
    if keys.len() < z {
        return Err(Error::Validation(format!("{} keys, fewer than Z={z}", keys.len())));
    }
    let mut total = 0.0;
    for q in memory {
        for i in nearest(q, keys, z)? {
            total += 1.0 - cosine_distance(q, &keys[i])?;
        }
    }
    Ok(total / (z * memory.len()) as f64)
}

/// Identity class for routing reports; `None` is the unseen class.
pub type RouteClass = Option<u32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub accuracy: f64,
    pub seen_macro_f1: f64,
    /// Absent in closed-world mode.
    pub unseen_f1: Option<f64>,
    pub total: usize,
    /// `(gold, predicted, count)`, unseen encoded as `None`.
    pub confusion: Vec<(RouteClass, RouteClass, usize)>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Scores `(gold, predicted)` pairs. Seen classes are the gold task ids;
/// `open` adds the unseen class.
pub fn score_routes(pairs: &[(RouteClass, RouteClass)], open: bool) -> DetectionReport {
    let mut confusion: BTreeMap<(RouteClass, RouteClass), usize> = BTreeMap::new();
    for &p in pairs {
        *confusion.entry(p).or_default() += 1;
    }
    let correct = pairs.iter().filter(|(g, p)| g == p).count();
    let seen: BTreeSet<u32> = pairs.iter().filter_map(|(g, _)| *g).collect();
    let class_f1 = |c: RouteClass| {
        let tp = pairs.iter().filter(|(g, p)| *g == c && *p == c).count();
        let fp = pairs.iter().filter(|(g, p)| *g != c && *p == c).count();
        let fn_ = pairs.iter().filter(|(g, p)| *g == c && *p != c).count();
        f1(tp, fp, fn_)
    };
    let seen_macro_f1 = if seen.is_empty() {
        0.0
    } else {
        seen.iter().map(|&c| class_f1(Some(c))).sum::<f64>() / seen.len() as f64
    };
    DetectionReport {
        accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
        seen_macro_f1,
        unseen_f1: open.then(|| class_f1(None)),
        total: pairs.len(),
        confusion: confusion.into_iter().map(|((g, p), n)| (g, p, n)).collect(),
    }
}

/// Routes every sample and compares with its gold identity: the task id
/// for learned tasks, the unseen class otherwise. Closed-world mode skips
/// samples of unlearned tasks and never predicts unseen.
pub fn detection_report(trainer: &Trainer, samples: &[(&Sample, u32)], open: bool) -> Result<DetectionReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for &(s, task) in samples {
        let gold = trainer.learned.contains(&task).then_some(task);
        if !open && gold.is_none() {
            continue;
        }
        let route = if open {
            trainer.route(&s.context, &s.full_question())?
        } else {
            trainer.route_closed(&s.context, &s.full_question())?
        };
        let pred = match route.choice {
            TaskChoice::Gold(id) | TaskChoice::Inferred(id) => Some(id),
            TaskChoice::Unseen(_) => None,
        };
        pairs.push((gold, pred));
    }
    Ok(score_routes(&pairs, open))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn performance_examples() {
        assert_eq!(avg_performance(&[vec![1.0; 4]], 4).unwrap(), (1.0, None));
        let r = vec![vec![0.1, 0.2, 0.3], vec![0.8, 0.6, 0.5]];
        let (a, u) = avg_performance(&r, 2).unwrap();
        assert!(close(a, 0.7));
        assert!(close(u.unwrap(), 0.5));
    }

    #[test]
    fn forgetting_examples() {
        let r = vec![vec![0.8, 0.1], vec![0.7, 0.6]];
        assert!(close(avg_forget(&r, 2).unwrap(), 0.1));
        let flat = vec![vec![0.4, 0.5, 0.6]; 3];
        assert_eq!(avg_forget(&flat, 3).unwrap(), 0.0);
        assert!(avg_forget(&[vec![1.0]], 1).is_err());
        // Improving run: negative terms stay negative.
        let up = vec![vec![0.2, 0.0], vec![0.5, 0.9]];
        assert!(close(avg_forget(&up, 2).unwrap(), -0.3));
        // Zero-shot rows count.
        let zs = vec![vec![0.1, 0.9, 0.0], vec![0.9, 0.2, 0.0], vec![0.5, 0.5, 0.9]];
        assert!(close(avg_forget(&zs, 3).unwrap(), (0.4 + 0.4) / 2.0));
    }

    #[test]
    fn diversity_examples() {
        let mem: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).cos(), (i as f64).sin()]).collect();
        let same = vec![vec![1.0, 0.0]; 3];
        assert!(close(diversity(&same, &mem, 2).unwrap(), 1.0 / 3.0));
        let axes = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let m3 = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.1, 0.9, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.1, 0.9],
        ];
        assert!(close(diversity(&axes, &m3, 2).unwrap(), 1.0));
        assert!(diversity(&axes, &m3, 7).is_err());
    }

    #[test]
    fn locality_examples() {
        let keys = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        assert!(close(locality(&keys, &[vec![1.0, 0.0]], 2).unwrap(), 1.0));
        let ortho = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(close(locality(&ortho, &[vec![1.0, 0.0]], 2).unwrap(), 0.0));
        assert!(locality(&ortho, &[vec![1.0, 0.0]], 3).is_err());
    }

    #[test]
    fn route_scores() {
        let perfect = [(Some(1), Some(1)), (Some(2), Some(2)), (None, None)];
        let r = score_routes(&perfect, true);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.seen_macro_f1, 1.0);
        assert_eq!(r.unseen_f1, Some(1.0));
        let closed = score_routes(&perfect[..2], false);
        assert_eq!(closed.unseen_f1, None);
        let mixed = [(Some(1), Some(1)), (Some(1), None), (None, Some(1)), (None, None)];
        let r = score_routes(&mixed, true);
        assert!(close(r.accuracy, 0.5));
        assert!(close(r.seen_macro_f1, 0.5));
        assert!(close(r.unseen_f1.unwrap(), 0.5));
    }

    #[test]
    fn csv_layout() {
        let mut m = PerformanceMatrix::new(vec![0, 1], vec!["a".into(), "b".into()], 1);
        m.push_row(vec![0.5, 0.25]).unwrap();
        assert!(m.push_row(vec![1.0]).is_err());
        assert_eq!(m.to_csv(), "a,b\n0.500000,0.250000\n");
    }
}
