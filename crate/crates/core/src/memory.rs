//! Replay memory and the per-task sample selection that fills it.

use crate::query::{cosine_distance, QueryVector};
use crate::taskgen::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub sample: Sample,
    pub query: QueryVector,
    pub task_id: u32,
}

impl MemoryEntry {
    pub fn query_f64(&self) -> Vec<f64> {
        self.query.as_f64()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    pub entries: Vec<MemoryEntry>,
}

impl MemoryBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of_task(&self, task_id: u32) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(move |e| e.task_id == task_id)
    }

    pub fn tasks(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.entries.iter().map(|e| e.task_id).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Indices of the samples to remember for one task, best first.
///
/// Each meta key nominates its `ceil(capacity / keys)` nearest samples;
/// duplicates keep their smallest distance; candidates are ranked by that
/// distance (ties by sample index) and the top `capacity` kept. When
/// nominations overlap so much that fewer than `min(capacity, n)` distinct
/// candidates remain, the per-key quota grows one step at a time until
/// enough are available.
pub fn select_for_memory(queries: &[Vec<f64>], meta_keys: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    let n = queries.len();
    let want = capacity.min(n);
    if want == 0 || meta_keys.is_empty() {
        return Vec::new();
    }
    // Per key: samples ordered by distance, ties by index.
    let ranked: Vec<Vec<(f64, usize)>> = meta_keys
        .iter()
        .map(|k| {
            let mut v: Vec<(f64, usize)> = queries
                .iter()
                .enumerate()
                .map(|(i, q)| (cosine_distance(k, q).unwrap_or(2.0), i))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v
        })
        .collect();
    let mut quota = capacity.div_ceil(meta_keys.len());
    loop {
        let mut best = vec![f64::INFINITY; n];
        for r in &ranked {
            for &(d, i) in r.iter().take(quota) {
                if d < best[i] {
                    best[i] = d;
                }
            }
        }
        let mut cands: Vec<(f64, usize)> = best
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(i, &d)| (d, i))
            .collect();
        if cands.len() >= want || quota >= n {
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            return cands.into_iter().take(want).map(|(_, i)| i).collect();
        }
        quota += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_vecs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s = crate::query::norm(&v);
                v.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn default_quota_keeps_capacity() {
        let q = unit_vecs(120, 8, 1);
        let k = unit_vecs(30, 8, 2);
        let sel = select_for_memory(&q, &k, 50);
        assert_eq!(sel.len(), 50);
        let mut s = sel.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 50);
    }

    #[test]
    fn small_task_is_stored_whole() {
        let q = unit_vecs(20, 8, 3);
        let k = unit_vecs(30, 8, 4);
        let mut sel = select_for_memory(&q, &k, 50);
        sel.sort_unstable();
        assert_eq!(sel, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn identical_queries_keep_first_in_order() {
        let q = vec![vec![1.0, 0.0]; 80];
        let k = unit_vecs(30, 2, 5);
        assert_eq!(select_for_memory(&q, &k, 50), (0..50).collect::<Vec<_>>());
    }
}
