//! The training loop over a task curriculum and the inference pipeline.
//!
//! Per sample: pick a task prompt by scheduled sampling (with a small
//! probability of the unseen-task prompt of its format), select meta
//! prompts by key distance, compose, and accumulate the answer loss into
//! the model and the composed prompts. The task key of the sample's own
//! task gets the triplet loss against the hardest negative from memory;
//! the selected meta keys get the locality/diversity loss and, for memory
//! samples, the pull toward their cluster centroid. One optimizer step per
//! batch updates every parameter group.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adb;
use crate::backbone::Seq2SeqModel;
use crate::config::{Baseline, RunConfig};
use crate::error::{Error, Result};
use crate::keyspace::{cluster_memory, memory_meta_loss, meta_key_loss, mine_negative, task_key_loss};
use crate::memory::{select_for_memory, MemoryBuffer, MemoryEntry};
use crate::nn::{AdamW, Param};
use crate::pool::{MetaSelection, PromptPool, TaskChoice};
use crate::query::{QueryEncoder, QueryVector};
use crate::seed;
use crate::taskgen::{encode_input, infer_format, normalize_answer, serialize_sample, Format, Sample, TaskDef};
use crate::vocab::Vocab;

/// `max(0, alpha - k * beta)`, exactly zero from `k = alpha / beta` on.
pub fn epsilon_schedule(k: u64, alpha: f64, beta: f64) -> f64 {
    let e = alpha - k as f64 * beta;
    if e <= 1e-12 {
        0.0
    } else {
        e
    }
}

/// Scheduled task-prompt choice for one training sample, given its two
/// uniform draws `zeta` and `eps`. Falls back to the gold task when no task
/// key exists yet.
#[allow(clippy::too_many_arguments)]
pub fn choose_task_prompt(
    gold: u32,
    format: Format,
    epsilon_k: f64,
    omega: f64,
    pool: &PromptPool,
    q: &[f64],
    zeta: f64,
    eps: f64,
) -> TaskChoice {
    if zeta < omega {
        TaskChoice::Unseen(format)
    } else if eps < epsilon_k {
        TaskChoice::Gold(gold)
    } else {
        match pool.infer_task(q) {
            Ok((id, _)) => TaskChoice::Inferred(id),
            Err(_) => TaskChoice::Gold(gold),
        }
    }
}

/// One line of the loss log: means over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: usize,
    /// Task learned in this stage; 0 for a joint multitask stage.
    pub task: u32,
    /// Optimizer step within the stage.
    pub step: u64,
    pub global_step: u64,
    pub epsilon: f64,
    pub l_qa: f64,
    pub l_t: f64,
    pub l_m: f64,
    pub l_mem: f64,
    pub batch: usize,
    pub gold: usize,
    pub inferred: usize,
    pub unseen: usize,
    /// Inferred choices that matched the gold task.
    pub inferred_correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub choice: TaskChoice,
    pub meta: MetaSelection,
    pub format: Format,
}

pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub encoder: QueryEncoder,
    pub model: Seq2SeqModel<f32>,
    pub pool: PromptPool,
    pub memory: MemoryBuffer,
    /// Learned boundary per task; empty when the fixed boundary applies.
    pub boundaries: BTreeMap<u32, f64>,
    /// Task ids in learning order.
    pub learned: Vec<u32>,
    /// Completed stages.
    pub stages: usize,
    pub global_step: u64,
}

struct Item<'a> {
    sample: &'a Sample,
    query: Vec<f64>,
    task: u32,
    memory_index: Option<usize>,
    input: Vec<usize>,
    target: Vec<usize>,
}

#[derive(Default)]
struct BatchStats {
    l_qa: f64,
    l_t: f64,
    l_m: f64,
    l_mem: f64,
    gold: usize,
    inferred: usize,
    unseen: usize,
    inferred_correct: usize,
}

fn add_grad(p: &mut Param<f32>, g: &[f64], scale: f64) {
    for (a, &b) in p.grad.iter_mut().zip(g) {
        *a += (b * scale) as f32;
    }
}

impl Trainer {
    pub fn new(config: RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder();
        let model = Seq2SeqModel::new(
            config.model_config(vocab.len()),
            seed::derive(config.seed, &[seed::stream::MODEL_INIT]),
        )?;
        let pool = PromptPool::new(config.pool_config(), seed::derive(config.seed, &[seed::stream::POOL_INIT]))?;
        Ok(Self {
            config,
            vocab,
            encoder,
            model,
            pool,
            memory: MemoryBuffer::default(),
            boundaries: BTreeMap::new(),
            learned: Vec::new(),
            stages: 0,
            global_step: 0,
        })
    }

    pub fn encode(&self, sample: &Sample) -> Result<QueryVector> {
        self.encoder.encode(&sample.context, &sample.full_question())
    }

    /// Learns one task (one stage of the curriculum).
    pub fn train_task(&mut self, task: &TaskDef, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        self.train_stage(&[task], log)
    }

    /// Learns the given tasks jointly in one stage; a single task is the
    /// usual sequential case.
    pub fn train_stage(&mut self, tasks: &[&TaskDef], log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        let cfg = self.config.clone();
        if tasks.is_empty() {
            return Err(Error::NoTasks);
        }
        for t in tasks {
            if t.train.is_empty() {
                return Err(Error::Validation(format!("task {} has no training samples", t.id)));
            }
            if self.learned.contains(&t.id) {
                return Err(Error::Validation(format!("task {} was already learned", t.id)));
            }
        }
        let stage = self.stages;
        let stage_task = if tasks.len() == 1 { tasks[0].id } else { 0 };

        // Current data, with task prompts and keys created on first use.
        let mut items: Vec<Item> = Vec::new();
        for t in tasks {
            for (i, s) in t.train.iter().enumerate() {
                let q = self.encode(s)?;
                if i == 0 {
                    self.pool.ensure_task(t.id, &q)?;
                }
                let (input, target) = serialize_sample(s, &self.vocab);
                items.push(Item {
                    sample: s,
                    query: q.as_f64(),
                    task: t.id,
                    memory_index: None,
                    input,
                    target,
                });
            }
        }
        let memory_on = cfg.uses_memory() && !self.memory.is_empty();
        let mem_queries: Vec<Vec<f64>> = self.memory.entries.iter().map(|e| e.query_f64()).collect();
        let mem_tasks: Vec<u32> = self.memory.entries.iter().map(|e| e.task_id).collect();
        let memory_samples: Vec<Sample> = self.memory.entries.iter().map(|e| e.sample.clone()).collect();
        if memory_on {
            for (i, s) in memory_samples.iter().enumerate() {
                let (input, target) = serialize_sample(s, &self.vocab);
                items.push(Item {
                    sample: s,
                    query: mem_queries[i].clone(),
                    task: mem_tasks[i],
                    memory_index: Some(i),
                    input,
                    target,
                });
            }
        }

        let centroids = if memory_on && !cfg.no_memory_div && !cfg.no_cluster && !cfg.no_meta {
            let b = cfg.cluster_factor * (self.learned.len() + tasks.len());
            Some(cluster_memory(
                &mem_queries,
                b,
                seed::derive(cfg.seed, &[seed::stream::CLUSTER, stage as u64]),
            )?)
        } else {
            None
        };

        let (alpha, beta) = cfg.schedule();
        let tiers = self.pool.config.tiers;
        let model_opt = cfg.model_optimizer();
        let key_opt = cfg.key_optimizer();
        let mut sampling = seed::rng(cfg.sampling_seed(), &[seed::stream::SAMPLING, stage as u64]);
        let mut k: u64 = 0;
        let mut order: Vec<usize> = (0..items.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut order_rng = seed::rng(cfg.seed, &[seed::stream::DATA_ORDER, stage as u64, epoch as u64]);
            order.sort_unstable();
            order.shuffle(&mut order_rng);
            for batch in order.chunks(cfg.batch_size) {
                let eps_k = epsilon_schedule(k, alpha, beta);
                let w = 1.0 / batch.len() as f64;
                let mut st = BatchStats::default();
                for &ix in batch {
                    let it = &items[ix];
                    let zeta: f64 = sampling.gen();
                    let eps: f64 = sampling.gen();
                    let format = it.sample.format;
                    let choice = if cfg.uses_keys() {
                        choose_task_prompt(it.task, format, eps_k, cfg.omega, &self.pool, &it.query, zeta, eps)
                    } else {
                        TaskChoice::Gold(it.task)
                    };
                    match choice {
                        TaskChoice::Gold(_) => st.gold += 1,
                        TaskChoice::Inferred(id) => {
                            st.inferred += 1;
                            st.inferred_correct += (id == it.task) as usize;
                        }
                        TaskChoice::Unseen(_) => st.unseen += 1,
                    }
                    let meta = if tiers.meta {
                        self.pool.select_meta(&it.query)
                    } else {
                        MetaSelection {
                            indices: Vec::new(),
                            distances: Vec::new(),
                        }
                    };
                    let composed = self.pool.compose(format, choice, &meta.indices)?;
                    let qa = self.model.forward_loss(&composed.matrix, &it.input, &it.target, w)?;
                    if !qa.value.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("answer loss at stage {stage} step {k}"),
                        });
                    }
                    st.l_qa += qa.value * w;
                    self.pool.accumulate_prompt_grad(&composed.layout, &qa.prompt_grad)?;

                    if !cfg.uses_keys() {
                        continue;
                    }
                    if !matches!(choice, TaskChoice::Unseen(_)) {
                        let key = self
                            .pool
                            .task_key_f64(it.task)
                            .ok_or_else(|| Error::MissingPrompt(format!("task key {}", it.task)))?;
                        let neg = if memory_on && !cfg.no_neg_samples {
                            let cands: Vec<usize> = (0..mem_queries.len()).filter(|&i| mem_tasks[i] != it.task).collect();
                            mine_negative(cands.iter().map(|&i| mem_queries[i].as_slice()), &key).map(|j| cands[j])
                        } else {
                            None
                        };
                        let r = task_key_loss(&it.query, &key, neg.map(|i| mem_queries[i].as_slice()))?;
                        st.l_t += r.value * w;
                        let p = self.pool.task_keys.get_mut(&it.task).expect("key exists");
                        add_grad(p, &r.grads[0], w);
                    }
                    if tiers.meta {
                        let keys: Vec<Vec<f64>> = meta.indices.iter().map(|&i| self.pool.meta_key_f64(i)).collect();
                        let gamma = if cfg.no_sample_div { 0.0 } else { cfg.gamma };
                        let r = meta_key_loss(&keys, &it.query, cfg.eta, gamma)?;
                        st.l_m += r.value * w;
                        for (&i, g) in meta.indices.iter().zip(&r.grads) {
                            add_grad(&mut self.pool.meta_keys[i], g, w);
                        }
                        if let (Some(mi), false) = (it.memory_index, cfg.no_memory_div) {
                            let centroid = match &centroids {
                                Some(c) => &c.centroids[c.assignment[mi]],
                                None => &it.query,
                            };
                            let r = memory_meta_loss(&keys, centroid, cfg.eta)?;
                            st.l_mem += r.value * w;
                            for (&i, g) in meta.indices.iter().zip(&r.grads) {
                                add_grad(&mut self.pool.meta_keys[i], g, w);
                            }
                        }
                    }
                }
                self.apply_updates(&model_opt, &key_opt)?;
                log(&StepLog {
                    stage,
                    task: stage_task,
                    step: k,
                    global_step: self.global_step,
                    epsilon: eps_k,
                    l_qa: st.l_qa,
                    l_t: st.l_t,
                    l_m: st.l_m,
                    l_mem: st.l_mem,
                    batch: batch.len(),
                    gold: st.gold,
                    inferred: st.inferred,
                    unseen: st.unseen,
                    inferred_correct: st.inferred_correct,
                });
                k += 1;
                self.global_step += 1;
            }
        }

        for t in tasks {
            if cfg.uses_memory() {
                self.update_memory(t)?;
            }
            self.learned.push(t.id);
        }
        self.stages += 1;
        self.fit_boundaries()?;
        Ok(())
    }

    /// One optimizer step for every parameter group, then key
    /// renormalization. Gradients are checked before anything changes.
    pub fn apply_updates(&mut self, model_opt: &AdamW, key_opt: &AdamW) -> Result<()> {
        for (name, p) in self.model.params() {
            AdamW::check_finite(&name, p)?;
        }
        for p in self.pool.prompts_mut() {
            AdamW::check_finite("prompt", p)?;
        }
        for p in self.pool.task_keys.values().chain(&self.pool.meta_keys) {
            AdamW::check_finite("key", p)?;
        }
        for p in self.model.params_mut() {
            model_opt.step(p);
        }
        for p in self.pool.prompts_mut() {
            model_opt.step(p);
        }
        for p in self.pool.task_keys.values_mut().chain(self.pool.meta_keys.iter_mut()) {
            key_opt.step(p);
        }
        self.pool.renormalize_keys();
        Ok(())
    }

    /// Appends the task's most representative training samples, chosen by
    /// the meta keys, to memory.
    pub fn update_memory(&mut self, task: &TaskDef) -> Result<()> {
        let queries: Vec<QueryVector> = task.train.iter().map(|s| self.encode(s)).collect::<Result<_>>()?;
        let q64: Vec<Vec<f64>> = queries.iter().map(QueryVector::as_f64).collect();
        let keys: Vec<Vec<f64>> = (0..self.pool.meta_keys.len()).map(|i| self.pool.meta_key_f64(i)).collect();
        for i in select_for_memory(&q64, &keys, self.config.memory_per_task) {
            self.memory.entries.push(MemoryEntry {
                sample: task.train[i].clone(),
                query: queries[i].clone(),
                task_id: task.id,
            });
        }
        Ok(())
    }

    /// Refits the boundary of every learned task from its memory samples.
    pub fn fit_boundaries(&mut self) -> Result<()> {
        self.boundaries.clear();
        if !self.config.uses_adb() {
            return Ok(());
        }
        for &id in &self.learned {
            let key = self
                .pool
                .task_key_f64(id)
                .ok_or_else(|| Error::MissingPrompt(format!("task key {id}")))?;
            let d: Vec<f64> = self
                .memory
                .of_task(id)
                .map(|e| crate::query::cosine_distance(&e.query_f64(), &key))
                .collect::<Result<_>>()?;
            let delta = adb::fit_boundary(id, &d, self.config.adb_mode, self.config.adb_lr, self.config.adb_steps)?;
            self.boundaries.insert(id, delta);
        }
        Ok(())
    }

    pub fn boundary(&self, task: u32) -> f64 {
        self.boundaries.get(&task).copied().unwrap_or(self.config.fixed_boundary)
    }

    /// Test-time routing: unseen when the query lies outside every task's
    /// boundary, otherwise the nearest task.
    pub fn route(&self, context: &str, question: &str) -> Result<Route> {
        self.route_with(context, question, true)
    }

    /// Routing without the unseen option.
    pub fn route_closed(&self, context: &str, question: &str) -> Result<Route> {
        self.route_with(context, question, false)
    }

    fn route_with(&self, context: &str, question: &str, open: bool) -> Result<Route> {
        if self.learned.is_empty() {
            return Err(Error::Untrained);
        }
        let format = infer_format(context, question);
        let q = self.encoder.encode(context, question)?.as_f64();
        let meta = if self.pool.config.tiers.meta {
            self.pool.select_meta(&q)
        } else {
            MetaSelection {
                indices: Vec::new(),
                distances: Vec::new(),
            }
        };
        if !self.config.uses_keys() {
            return Ok(Route {
                choice: TaskChoice::Unseen(format),
                meta,
                format,
            });
        }
        let dists = self.pool.task_distances(&q);
        let outside = dists.iter().all(|&(id, d)| d > self.boundary(id));
        let choice = if open && outside {
            TaskChoice::Unseen(format)
        } else {
            TaskChoice::Inferred(self.pool.infer_task(&q)?.0)
        };
        Ok(Route { choice, meta, format })
    }

    /// Answers a `(context, full question)` pair by routing, composing and
    /// greedy decoding.
    pub fn answer(&self, context: &str, question: &str) -> Result<String> {
        let route = self.route(context, question)?;
        let composed = self.pool.compose(route.format, route.choice, &route.meta.indices)?;
        let input = encode_input(&self.vocab, route.format, context, question);
        let out = self
            .model
            .greedy_decode(&composed.matrix, &input, self.config.max_answer_len + 1)?;
        Ok(self.vocab.decode(&out))
    }

    pub fn answer_sample(&self, sample: &Sample) -> Result<String> {
        self.answer(&sample.context, &sample.full_question())
    }

    pub fn is_correct(&self, sample: &Sample) -> Result<bool> {
        Ok(normalize_answer(&self.answer_sample(sample)?) == normalize_answer(&sample.answer))
    }

    pub fn baseline(&self) -> Baseline {
        self.config.baseline
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::PoolConfig;

    #[test]
    fn schedule_values() {
        assert_eq!(epsilon_schedule(0, 0.9, 3e-4), 0.9);
        assert_eq!(epsilon_schedule(3000, 0.9, 3e-4), 0.0);
        assert!((epsilon_schedule(1000, 0.9, 3e-4) - 0.6).abs() < 1e-12);
        for k in [0, 10, 10_000] {
            assert_eq!(epsilon_schedule(k, 0.0, 3e-4), 0.0);
        }
    }

    #[test]
    fn choice_branches() {
        let mut pool = PromptPool::new(
            PoolConfig {
                query_dim: 2,
                d_model: 4,
                num_meta: 2,
                select_meta: 1,
                ..PoolConfig::default()
            },
            1,
        )
        .unwrap();
        let q = [1.0, 0.0];
        let f = Format::Extractive;
        assert_eq!(choose_task_prompt(3, f, 0.9, 0.05, &pool, &q, 0.01, 0.0), TaskChoice::Unseen(f));
        assert_eq!(choose_task_prompt(3, f, 0.9, 0.05, &pool, &q, 0.5, 0.1), TaskChoice::Gold(3));
        // No keys yet: falls back to gold.
        assert_eq!(choose_task_prompt(3, f, 0.9, 0.05, &pool, &q, 0.5, 0.95), TaskChoice::Gold(3));
        pool.ensure_task(
            7,
            &QueryVector {
                values: vec![1.0, 0.0],
                source_hash: 0,
            },
        )
        .unwrap();
        assert_eq!(choose_task_prompt(3, f, 0.9, 0.05, &pool, &q, 0.5, 0.95), TaskChoice::Inferred(7));
    }
}
