//! The prompt hierarchy: general, format, task, unseen-task and meta prompts,
//! with task and meta key vectors used for routing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Param};
use crate::query::{cosine_distance, QueryVector};
use crate::seed;
use crate::taskgen::Format;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiers {
    pub general: bool,
    pub format: bool,
    pub task: bool,
    pub meta: bool,
}

impl Default for Tiers {
    fn default() -> Self {
        Self {
            general: true,
            format: true,
            task: true,
            meta: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub general_len: usize,
    pub format_len: usize,
    pub task_len: usize,
    pub meta_len: usize,
    /// Size of the meta prompt pool.
    pub num_meta: usize,
    /// Meta prompts selected per sample.
    pub select_meta: usize,
    pub d_model: usize,
    pub query_dim: usize,
    pub tiers: Tiers,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            general_len: 20,
            format_len: 40,
            task_len: 40,
            meta_len: 20,
            num_meta: 30,
            select_meta: 5,
            d_model: 64,
            query_dim: 64,
            tiers: Tiers::default(),
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_meta == 0 {
            return Err(Error::field("num_meta", "must be at least 1"));
        }
        if self.select_meta == 0 || self.select_meta > self.num_meta {
            return Err(Error::field(
                "select_meta",
                format!("must be in 1..={} (the pool size)", self.num_meta),
            ));
        }
        if self.d_model == 0 || self.query_dim == 0 {
            return Err(Error::field("d_model", "dimensions must be positive"));
        }
        Ok(())
    }

    /// Rows of a composed prompt.
    pub fn composed_len(&self) -> usize {
        let t = &self.tiers;
        (t.general as usize) * self.general_len
            + (t.format as usize) * self.format_len
            + (t.task as usize) * self.task_len
            + (t.meta as usize) * self.meta_len * self.select_meta
    }
}

/// Which task-level prompt a sample uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum TaskChoice {
    Gold(u32),
    Inferred(u32),
    Unseen(Format),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSelection {
    /// Ascending.
    pub indices: Vec<usize>,
    /// Distance of each selected key to the query, aligned with `indices`.
    pub distances: Vec<f64>,
}

/// One contiguous block of a composed prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRef {
    General,
    Format(Format),
    Task(u32),
    Unseen(Format),
    Meta(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedPrompt {
    pub matrix: Matrix<f32>,
    /// Blocks in row order with their row counts.
    pub layout: Vec<(PromptRef, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub config: PoolConfig,
    pub seed: u64,
    pub general: Param<f32>,
    pub format: Vec<Param<f32>>,
    pub unseen: Vec<Param<f32>>,
    pub task: BTreeMap<u32, Param<f32>>,
    pub meta: Vec<Param<f32>>,
    pub task_keys: BTreeMap<u32, Param<f32>>,
    pub meta_keys: Vec<Param<f32>>,
}

fn prompt_param(rows: usize, d: usize, rng: &mut impl Rng) -> Param<f32> {
    Param::uniform(rows, d, 0.5 / (d as f64).sqrt(), rng)
}

fn unit(v: &[f32]) -> Vec<f64> {
    let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    let n = crate::query::norm(&x);
    x.into_iter().map(|a| a / n).collect()
}

impl PromptPool {
    pub fn new(config: PoolConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed_value, &[seed::stream::POOL_INIT]);
        let d = config.d_model;
        let general = prompt_param(config.general_len, d, &mut rng);
        let format = (0..3).map(|_| prompt_param(config.format_len, d, &mut rng)).collect();
        let unseen = (0..3).map(|_| prompt_param(config.task_len, d, &mut rng)).collect();
        let meta = (0..config.num_meta)
            .map(|_| prompt_param(config.meta_len, d, &mut rng))
            .collect();
        let meta_keys = (0..config.num_meta)
            .map(|_| {
                let g: Vec<f64> = (0..config.query_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = crate::query::norm(&g);
                Param::new(1, config.query_dim, g.iter().map(|x| (x / n) as f32).collect())
            })
            .collect();
        Ok(Self {
            config,
            seed: seed_value,
            general,
            format,
            unseen,
            task: BTreeMap::new(),
            meta,
            task_keys: BTreeMap::new(),
            meta_keys,
        })
    }

    /// Creates the task prompt and key on first use. The key starts at the
    /// task's first training query.
    pub fn ensure_task(&mut self, task_id: u32, first_query: &QueryVector) -> Result<()> {
        if first_query.values.len() != self.config.query_dim {
            return Err(Error::EncoderMismatch(format!(
                "query dimension {} differs from key dimension {}",
                first_query.values.len(),
                self.config.query_dim
            )));
        }
        if !self.task.contains_key(&task_id) {
            let mut rng = seed::rng(self.seed, &[seed::stream::TASK_PROMPT, task_id as u64]);
            self.task
                .insert(task_id, prompt_param(self.config.task_len, self.config.d_model, &mut rng));
        }
        self.task_keys
            .entry(task_id)
            .or_insert_with(|| Param::new(1, first_query.values.len(), first_query.values.clone()));
        Ok(())
    }

    pub fn learned_tasks(&self) -> Vec<u32> {
        self.task_keys.keys().copied().collect()
    }

    /// The `select_meta` keys nearest to `q`; ties go to the lower index.
    pub fn select_meta(&self, q: &[f64]) -> MetaSelection {
        self.select_meta_k(q, self.config.select_meta)
    }

    pub fn select_meta_k(&self, q: &[f64], k: usize) -> MetaSelection {
        let mut scored: Vec<(f64, usize)> = self
            .meta_keys
            .iter()
            .enumerate()
            .map(|(i, key)| (cosine_distance(&unit(&key.value), q).unwrap_or(2.0), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(k.min(scored.len()));
        scored.sort_by_key(|&(_, i)| i);
        MetaSelection {
            indices: scored.iter().map(|&(_, i)| i).collect(),
            distances: scored.iter().map(|&(d, _)| d).collect(),
        }
    }

    /// Distance from `q` to every task key, in task-id order.
    pub fn task_distances(&self, q: &[f64]) -> Vec<(u32, f64)> {
        self.task_keys
            .iter()
            .map(|(&id, key)| (id, cosine_distance(&unit(&key.value), q).unwrap_or(2.0)))
            .collect()
    }

    /// Nearest task key; ties go to the lower task id.
    pub fn infer_task(&self, q: &[f64]) -> Result<(u32, f64)> {
        self.task_distances(q)
            .into_iter()
            .fold(None, |best: Option<(u32, f64)>, (id, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((id, d)),
            })
            .ok_or(Error::NoTaskKeys)
    }

    /// Row-stacks the enabled tiers: general, format, task (or the unseen
    /// prompt of the format), then the selected meta prompts in ascending
    /// index order.
    pub fn compose(&self, format: Format, choice: TaskChoice, meta: &[usize]) -> Result<ComposedPrompt> {
        let tiers = self.config.tiers;
        let mut parts: Vec<&Param<f32>> = Vec::new();
        let mut layout = Vec::new();
        if tiers.general {
            parts.push(&self.general);
            layout.push((PromptRef::General, self.general.rows));
        }
        if tiers.format {
            parts.push(&self.format[format.index()]);
            layout.push((PromptRef::Format(format), self.config.format_len));
        }
        if tiers.task {
            let (p, r) = match choice {
                TaskChoice::Gold(id) | TaskChoice::Inferred(id) => (
                    self.task
                        .get(&id)
                        .ok_or_else(|| Error::MissingPrompt(format!("task {id}")))?,
                    PromptRef::Task(id),
                ),
                TaskChoice::Unseen(f) => (&self.unseen[f.index()], PromptRef::Unseen(f)),
            };
            parts.push(p);
            layout.push((r, self.config.task_len));
        }
        if tiers.meta {
            let mut sorted = meta.to_vec();
            sorted.sort_unstable();
            for i in sorted {
                let p = self
                    .meta
                    .get(i)
                    .ok_or_else(|| Error::MissingPrompt(format!("meta {i}")))?;
                parts.push(p);
                layout.push((PromptRef::Meta(i), self.config.meta_len));
            }
        }
        let d = self.config.d_model;
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(&p.value);
        }
        Ok(ComposedPrompt {
            matrix: Matrix::from_vec(rows, d, data),
            layout,
        })
    }

    fn prompt_mut(&mut self, r: PromptRef) -> Option<&mut Param<f32>> {
        match r {
            PromptRef::General => Some(&mut self.general),
            PromptRef::Format(f) => self.format.get_mut(f.index()),
            PromptRef::Task(id) => self.task.get_mut(&id),
            PromptRef::Unseen(f) => self.unseen.get_mut(f.index()),
            PromptRef::Meta(i) => self.meta.get_mut(i),
        }
    }

    /// Adds the gradient of a composed prompt back onto its source prompts.
    pub fn accumulate_prompt_grad(&mut self, layout: &[(PromptRef, usize)], grad: &Matrix<f32>) -> Result<()> {
        let d = self.config.d_model;
        let mut row = 0;
        for &(r, n) in layout {
            let p = self
                .prompt_mut(r)
                .ok_or_else(|| Error::MissingPrompt(format!("{r:?}")))?;
            for (g, &v) in p.grad.iter_mut().zip(&grad.data[row * d..(row + n) * d]) {
                *g += v;
            }
            row += n;
        }
        Ok(())
    }

    /// All prompt parameters (keys excluded) in a stable order.
    pub fn prompts_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = vec![&mut self.general];
        v.extend(self.format.iter_mut());
        v.extend(self.unseen.iter_mut());
        v.extend(self.task.values_mut());
        v.extend(self.meta.iter_mut());
        v
    }

    /// Scales every key back to unit length.
    pub fn renormalize_keys(&mut self) {
        for k in self.task_keys.values_mut().chain(self.meta_keys.iter_mut()) {
            let n = k.value.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                k.value.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
    }

    pub fn meta_key_f64(&self, i: usize) -> Vec<f64> {
        self.meta_keys[i].value.iter().map(|&x| x as f64).collect()
    }

    pub fn task_key_f64(&self, id: u32) -> Option<Vec<f64>> {
        self.task_keys
            .get(&id)
            .map(|k| k.value.iter().map(|&x| x as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PoolConfig {
        PoolConfig {
            general_len: 2,
            format_len: 3,
            task_len: 3,
            meta_len: 2,
            num_meta: 6,
            select_meta: 2,
            d_model: 4,
            query_dim: 4,
            tiers: Tiers::default(),
        }
    }

    fn set_key(p: &mut Param<f32>, v: &[f32]) {
        p.value = v.to_vec();
    }

    #[test]
    fn default_pool_shape() {
        let p = PromptPool::new(PoolConfig::default(), 1).unwrap();
        assert_eq!(p.format.len(), 3);
        assert_eq!(p.unseen.len(), 3);
        assert_eq!(p.meta.len(), 30);
        assert_eq!(p.meta_keys.len(), 30);
        assert!(p.task.is_empty() && p.task_keys.is_empty());
        assert_eq!(p.general.rows, 20);
        for k in &p.meta_keys {
            let n: f64 = k.value.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(PoolConfig::default().composed_len(), 200);
    }

    #[test]
    fn same_seed_same_pool_and_select_meta_bound() {
        assert_eq!(PromptPool::new(small(), 3).unwrap(), PromptPool::new(small(), 3).unwrap());
        let cfg = PoolConfig {
            num_meta: 30,
            select_meta: 31,
            ..PoolConfig::default()
        };
        assert!(matches!(PromptPool::new(cfg, 1), Err(Error::InvalidField { .. })));
    }

    #[test]
    fn select_meta_nearest_and_ties() {
        let mut p = PromptPool::new(small(), 1).unwrap();
        for (i, k) in p.meta_keys.iter_mut().enumerate() {
            let mut v = [0.0f32; 4];
            v[i % 4] = 1.0;
            if i == 4 {
                v = [0.0, 0.0, 0.0, 1.0];
            }
            set_key(k, &v);
        }
        let s = p.select_meta_k(&[0.0, 0.0, 0.0, 1.0], 1);
        assert_eq!(s.indices, vec![3]);
        for k in p.meta_keys.iter_mut() {
            set_key(k, &[1.0, 0.0, 0.0, 0.0]);
        }
        assert_eq!(p.select_meta_k(&[0.0, 1.0, 0.0, 0.0], 5).indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(p.select_meta_k(&[0.0, 1.0, 0.0, 0.0], 6).indices.len(), 6);
    }

    #[test]
    fn infer_task_cases() {
        let mut p = PromptPool::new(small(), 1).unwrap();
        let q = |v: [f32; 4]| QueryVector {
            values: v.to_vec(),
            source_hash: 0,
        };
        assert!(matches!(p.infer_task(&[1.0, 0.0, 0.0, 0.0]), Err(Error::NoTaskKeys)));
        p.ensure_task(1, &q([1.0, 0.0, 0.0, 0.0])).unwrap();
        p.ensure_task(2, &q([0.0, 1.0, 0.0, 0.0])).unwrap();
        let (id, d) = p.infer_task(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((id, d), (2, 0.0));
        // Equidistant: lower id wins.
        let s = 0.5f64.sqrt();
        assert_eq!(p.infer_task(&[s, s, 0.0, 0.0]).unwrap().0, 1);
    }

    #[test]
    fn compose_layout_and_unseen_rows() {
        let mut p = PromptPool::new(small(), 1).unwrap();
        let c = p.compose(Format::Extractive, TaskChoice::Unseen(Format::Abstractive), &[4, 1]).unwrap();
        assert_eq!(c.matrix.rows, small().composed_len());
        let start = 2 + 3;
        assert_eq!(&c.matrix.data[start * 4..(start + 3) * 4], &p.unseen[1].value[..]);
        let meta_start = start + 3;
        assert_eq!(&c.matrix.data[meta_start * 4..(meta_start + 2) * 4], &p.meta[1].value[..]);
        assert!(matches!(
            p.compose(Format::Extractive, TaskChoice::Gold(9), &[0]),
            Err(Error::MissingPrompt(_))
        ));
        p.config.tiers.meta = false;
        let c = p.compose(Format::Extractive, TaskChoice::Unseen(Format::Extractive), &[0, 1]).unwrap();
        assert_eq!(c.matrix.rows, 8);
    }

    #[test]
    fn prompt_grad_reaches_selected_blocks_only() {
        let mut p = PromptPool::new(small(), 1).unwrap();
        let c = p.compose(Format::MultiChoice, TaskChoice::Unseen(Format::MultiChoice), &[0, 2]).unwrap();
        let grad = Matrix::from_vec(c.matrix.rows, 4, vec![1.0; c.matrix.rows * 4]);
        p.accumulate_prompt_grad(&c.layout, &grad).unwrap();
        for (i, m) in p.meta.iter().enumerate() {
            assert_eq!(m.grad_is_zero(), i != 0 && i != 2, "meta {i}");
        }
        assert!(p.format[0].grad_is_zero() && !p.format[2].grad_is_zero());
        assert!(!p.unseen[2].grad_is_zero());
    }
}
