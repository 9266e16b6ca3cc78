use std::collections::BTreeSet;

use lqa_core::config::RunConfig;
use lqa_core::keyspace::{memory_meta_loss, meta_key_loss, task_key_loss};
use lqa_core::memory::select_for_memory;
use lqa_core::metrics::{avg_performance, diversity, locality};
use lqa_core::nn::Matrix;
use lqa_core::pool::{PoolConfig, PromptPool, PromptRef, TaskChoice};
use lqa_core::query::{cosine_distance, norm, QueryEncoder};
use lqa_core::taskgen::{gen_synthetic_stream, infer_format, Format, StreamSpec};
use lqa_core::trainer::{epsilon_schedule, Trainer};
use proptest::prelude::*;

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("nonzero", |v| norm(v) > 0.1)
        .prop_map(|v| {
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
}

fn fd(f: &dyn Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..at.len())
        .map(|i| {
            let mut p = at.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff <= tol * norm(a).max(norm(b)).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_key_gradient(q in unit_vec(6), key in unit_vec(6), neg in unit_vec(6)) {
        let margin = 1.0 - cosine_distance(&neg, &key).unwrap();
        prop_assume!(margin.abs() > 1e-3);
        let g = task_key_loss(&q, &key, Some(&neg)).unwrap().grads.remove(0);
        let n = fd(&|k| task_key_loss(&q, k, Some(&neg)).unwrap().value, &key);
        prop_assert!(close(&g, &n, 1e-5), "{g:?} vs {n:?}");
    }

    #[test]
    fn meta_key_gradients(q in unit_vec(5), keys in prop::collection::vec(unit_vec(5), 2..5), eta in 0.05f64..0.9, gamma in 0.05f64..0.9) {
        let kinks = keys.iter().any(|k| (cosine_distance(k, &q).unwrap() - eta).abs() < 1e-3)
            || keys.iter().enumerate().any(|(i, a)| keys[i + 1..].iter().any(|b| (gamma - cosine_distance(a, b).unwrap()).abs() < 1e-3));
        prop_assume!(!kinks);
        let r = meta_key_loss(&keys, &q, eta, gamma).unwrap();
        prop_assert_eq!(r.grads.len(), keys.len());
        for i in 0..keys.len() {
            let f = |k: &[f64]| {
                let mut ks = keys.clone();
                ks[i] = k.to_vec();
                meta_key_loss(&ks, &q, eta, gamma).unwrap().value
            };
            prop_assert!(close(&r.grads[i], &fd(&f, &keys[i]), 1e-5));
        }
    }

    #[test]
    fn memory_meta_gradients(c in unit_vec(5), keys in prop::collection::vec(unit_vec(5), 1..5), eta in 0.05f64..0.9) {
        prop_assume!(keys.iter().all(|k| (cosine_distance(k, &c).unwrap() - eta).abs() > 1e-3));
        let r = memory_meta_loss(&keys, &c, eta).unwrap();
        prop_assert!(r.value >= 0.0);
        for i in 0..keys.len() {
            let f = |k: &[f64]| {
                let mut ks = keys.clone();
                ks[i] = k.to_vec();
                memory_meta_loss(&ks, &c, eta).unwrap().value
            };
            prop_assert!(close(&r.grads[i], &fd(&f, &keys[i]), 1e-5));
        }
    }

    #[test]
    fn average_performance_ignores_column_order(row in prop::collection::vec(0.0f64..1.0, 4..10), split in 1usize..4, rot in 0usize..10) {
        let n_seen = split.min(row.len());
        let (a, u) = avg_performance(std::slice::from_ref(&row), n_seen).unwrap();
        let mut seen = row[..n_seen].to_vec();
        seen.rotate_left(rot % n_seen);
        let mut unseen = row[n_seen..].to_vec();
        if !unseen.is_empty() {
            let len = unseen.len();
            unseen.rotate_left(rot % len);
        }
        seen.extend(unseen);
        let (b, v) = avg_performance(&[seen], n_seen).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert_eq!(u.is_some(), v.is_some());
        if let (Some(x), Some(y)) = (u, v) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_and_locality_ranges(keys in prop::collection::vec(unit_vec(4), 10..20), mem in prop::collection::vec(unit_vec(4), 10..30), z in 1usize..10) {
        let d = diversity(&keys, &mem, z).unwrap();
        prop_assert!(d >= 1.0 / keys.len() as f64 - 1e-12 && d <= 1.0 + 1e-12);
        let l = locality(&keys, &mem, z).unwrap();
        prop_assert!((-1.0..=1.0).contains(&l));
    }

    #[test]
    fn memory_selection_size(n in 0usize..60, m in 1usize..12, cap in 1usize..40, seed in 0u64..1000) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            let v: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let s = norm(&v);
            v.into_iter().map(|x| x / s).collect()
        };
        let q: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
        let k: Vec<Vec<f64>> = (0..m).map(|_| draw()).collect();
        let sel = select_for_memory(&q, &k, cap);
        prop_assert_eq!(sel.len(), cap.min(n));
        prop_assert_eq!(sel.iter().collect::<BTreeSet<_>>().len(), sel.len());
    }

    #[test]
    fn epsilon_is_clamped_and_nonincreasing(k in 0u64..10_000, alpha in 0.0f64..1.0, beta in 1e-5f64..1e-2) {
        let e = epsilon_schedule(k, alpha, beta);
        prop_assert!((0.0..=alpha).contains(&e));
        prop_assert!(epsilon_schedule(k + 1, alpha, beta) <= e);
    }

    #[test]
    fn query_vectors_are_unit_and_deterministic(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
        let enc = QueryEncoder::new(16, 3).unwrap();
        let c = words.join(" ");
        let a = enc.encode(&c, "what ?").unwrap();
        let b = enc.encode(&c, "what ?").unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((norm(&a.as_f64()) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn stream_invariants() {
    let spec = StreamSpec {
        samples_per_split: 64,
        ..StreamSpec::default()
    };
    let s = gen_synthetic_stream(&spec).unwrap();
    let ids: Vec<u32> = s.tasks().map(|t| t.id).collect();
    assert_eq!(ids, (1..=(spec.n_seen + spec.n_unseen) as u32).collect::<Vec<_>>());
    let formats: BTreeSet<Format> = s.seen.iter().map(|t| t.format).collect();
    assert_eq!(formats.len(), 3);
    let mut seen_samples = BTreeSet::new();
    for t in s.tasks() {
        for x in t.samples() {
            assert!(!x.answer.is_empty());
            assert_eq!(x.format, t.format);
            assert_eq!(infer_format(&x.context, &x.full_question()), t.format);
            if let Some(opts) = &x.options {
                assert!(opts.len() >= 2);
                assert_eq!(opts.iter().filter(|o| **o == x.answer).count(), 1);
            }
            let key = (x.context.clone(), x.question.clone(), x.answer.clone());
            assert!(seen_samples.insert(key), "sample repeated in task {}", t.id);
        }
    }
}

/// Prompt gradients reach exactly the blocks a composed prompt was built from.
#[test]
fn prompt_gradients_follow_the_composition() {
    let cfg = PoolConfig {
        general_len: 2,
        format_len: 3,
        task_len: 3,
        meta_len: 2,
        num_meta: 6,
        select_meta: 2,
        d_model: 4,
        query_dim: 4,
        ..PoolConfig::default()
    };
    let mut pool = PromptPool::new(cfg, 1).unwrap();
    let q = QueryEncoder::new(4, 0).unwrap().encode("a b", "c ?").unwrap();
    pool.ensure_task(1, &q).unwrap();
    pool.ensure_task(2, &q).unwrap();
    for choice in [TaskChoice::Gold(2), TaskChoice::Unseen(Format::Abstractive)] {
        for p in pool.prompts_mut() {
            p.zero_grad();
        }
        let c = pool.compose(Format::Extractive, choice, &[4, 1]).unwrap();
        assert_eq!(c.matrix.rows, 2 + 3 + 3 + 2 * 2);
        let refs: Vec<PromptRef> = c.layout.iter().map(|l| l.0).collect();
        let task_ref = match choice {
            TaskChoice::Unseen(f) => PromptRef::Unseen(f),
            _ => PromptRef::Task(2),
        };
        assert_eq!(
            refs,
            vec![PromptRef::General, PromptRef::Format(Format::Extractive), task_ref, PromptRef::Meta(1), PromptRef::Meta(4)]
        );
        let ones = Matrix::from_vec(c.matrix.rows, 4, vec![1.0f32; c.matrix.rows * 4]);
        pool.accumulate_prompt_grad(&c.layout, &ones).unwrap();
        let touched = |g: &[f32]| g.iter().all(|&x| x == 1.0);
        let untouched = |g: &[f32]| g.iter().all(|&x| x == 0.0);
        assert!(touched(&pool.general.grad));
        assert!(touched(&pool.format[0].grad) && untouched(&pool.format[1].grad) && untouched(&pool.format[2].grad));
        assert!(touched(&pool.meta[1].grad) && touched(&pool.meta[4].grad));
        for i in [0, 2, 3, 5] {
            assert!(untouched(&pool.meta[i].grad));
        }
        assert!(untouched(&pool.task[&1].grad));
        match choice {
            TaskChoice::Unseen(_) => {
                assert!(untouched(&pool.task[&2].grad) && touched(&pool.unseen[1].grad));
            }
            _ => {
                assert!(touched(&pool.task[&2].grad));
                assert!(pool.unseen.iter().all(|u| untouched(&u.grad)));
            }
        }
    }
}

#[test]
fn trainer_state_after_each_stage() {
    let cfg = RunConfig {
        n_seen: 3,
        n_unseen: 1,
        samples_per_split: 24,
        epochs: 1,
        memory_per_task: 6,
        num_meta: 8,
        ..RunConfig::desk()
    };
    let stream = gen_synthetic_stream(&cfg.stream_spec()).unwrap();
    let mut t = Trainer::new(cfg.clone(), stream.vocab()).unwrap();
    for (i, task) in stream.seen.iter().enumerate() {
        let mut steps = Vec::new();
        t.train_task(task, &mut |l| steps.push(l.step)).unwrap();
        // The step index restarts with every task.
        assert_eq!(steps[0], 0);
        assert_eq!(steps, (0..steps.len() as u64).collect::<Vec<_>>());
        assert_eq!(t.learned.len(), i + 1);
        for k in t.pool.task_keys.values().chain(&t.pool.meta_keys) {
            let n: f64 = k.value.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for &id in &t.learned {
            assert!(t.memory.of_task(id).count() <= cfg.memory_per_task);
            assert!(t.boundaries.contains_key(&id));
        }
        for e in &t.memory.entries {
            assert_eq!(e.query, t.encode(&e.sample).unwrap());
        }
    }
    assert_eq!(t.pool.task.len(), 3);
}

/// Query vectors alone tell the tasks apart: a nearest-centroid classifier
/// on training samples identifies most of them.
#[test]
fn tasks_are_separable_by_query() {
    let s = gen_synthetic_stream(&StreamSpec::default()).unwrap();
    let enc = RunConfig::default().encoder();
    let encoded: Vec<(u32, Vec<Vec<f64>>)> = s
        .tasks()
        .map(|t| {
            let qs = t.train.iter().chain(&t.test).map(|x| enc.encode(&x.context, &x.full_question()).unwrap().as_f64()).collect();
            (t.id, qs)
        })
        .collect();
    let centroids: Vec<(u32, Vec<f64>)> = encoded
        .iter()
        .map(|(id, qs)| {
            let mut c = vec![0.0; qs[0].len()];
            for q in qs {
                c.iter_mut().zip(q).for_each(|(a, b)| *a += b);
            }
            (*id, c)
        })
        .collect();
    let (mut hit, mut total) = (0, 0);
    for (id, qs) in &encoded {
        for q in qs {
            let best = centroids
                .iter()
                .min_by(|a, b| cosine_distance(q, &a.1).unwrap().total_cmp(&cosine_distance(q, &b.1).unwrap()))
                .unwrap();
            hit += (best.0 == *id) as usize;
            total += 1;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc > 0.8, "nearest-centroid identity accuracy {acc:.3}");
}
