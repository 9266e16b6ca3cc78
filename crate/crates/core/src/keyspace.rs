//! Key-space objectives with closed-form gradients, hardest-negative mining
//! and k-means clustering of memory queries.
//!
//! All distances are cosine distances. Hinges use a zero subgradient at
//! the kink. Gradients are taken with respect to unnormalized keys, so they
//! remain exact for finite differences taken off the unit sphere.

use rand::Rng;

use crate::error::{Error, Result};
use crate::query::{cosine_distance, norm};
use crate::seed;

/// A loss value and one gradient per key, aligned with the keys passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Gradient of `1 - cos(k, x)` with respect to `k`.
pub fn cosine_distance_grad(k: &[f64], x: &[f64]) -> Vec<f64> {
    let (nk, nx) = (norm(k), norm(x));
    let dot: f64 = k.iter().zip(x).map(|(a, b)| a * b).sum();
    k.iter()
        .zip(x)
        .map(|(&ki, &xi)| -(xi / (nk * nx) - dot * ki / (nk * nk * nk * nx)))
        .collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(())
}

/// `exp(d(q, key) + max(1 - d(neg, key), 0))`, or `exp(d(q, key))` without a
/// negative. The only gradient is with respect to `key`.
pub fn task_key_loss(q: &[f64], key: &[f64], neg: Option<&[f64]>) -> Result<LossReport> {
    check_unit(q)?;
    check_unit(key)?;
    let dp = cosine_distance(q, key)?;
    let mut grad = cosine_distance_grad(key, q);
    let mut exponent = dp;
    if let Some(n) = neg {
        check_unit(n)?;
        let margin = 1.0 - cosine_distance(n, key)?;
        if margin > 0.0 {
            exponent += margin;
            axpy(&mut grad, -1.0, &cosine_distance_grad(key, n));
        }
    }
    let value = exponent.exp();
    grad.iter_mut().for_each(|g| *g *= value);
    Ok(LossReport {
        value,
        grads: vec![grad],
    })
}

/// Locality and pairwise diversity of the selected meta keys:
/// `sum_i max(0, d(k_i, q) - eta) + sum_{i != j} max(0, gamma - d(k_i, k_j)) / m^2`
/// with ordered pairs and `m = keys.len()`.
pub fn meta_key_loss(keys: &[Vec<f64>], q: &[f64], eta: f64, gamma: f64) -> Result<LossReport> {
    let m = keys.len();
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; q.len()]; m];
    for (i, k) in keys.iter().enumerate() {
        let d = cosine_distance(k, q)?;
        if d - eta > 0.0 {
            value += d - eta;
            axpy(&mut grads[i], 1.0, &cosine_distance_grad(k, q));
        }
    }
    let scale = 1.0 / (m * m) as f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = cosine_distance(&keys[i], &keys[j])?;
            if gamma - d > 0.0 {
                // Both ordered pairs (i, j) and (j, i).
                value += 2.0 * (gamma - d) * scale;
                let gi = cosine_distance_grad(&keys[i], &keys[j]);
                let gj = cosine_distance_grad(&keys[j], &keys[i]);
                axpy(&mut grads[i], -2.0 * scale, &gi);
                axpy(&mut grads[j], -2.0 * scale, &gj);
            }
        }
    }
    Ok(LossReport { value, grads })
}

/// `sum_i max(0, d(k_i, centroid) - eta)`.
pub fn memory_meta_loss(keys: &[Vec<f64>], centroid: &[f64], eta: f64) -> Result<LossReport> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(keys.len());
    for k in keys {
        let d = cosine_distance(k, centroid)?;
        if d - eta > 0.0 {
            value += d - eta;
            grads.push(cosine_distance_grad(k, centroid));
        } else {
            grads.push(vec![0.0; k.len()]);
        }
    }
    Ok(LossReport { value, grads })
}

/// Index of the candidate nearest to `key` (earliest on ties), or `None`
/// when there are no candidates.
pub fn mine_negative<'a>(candidates: impl IntoIterator<Item = &'a [f64]>, key: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.into_iter().enumerate() {
        let d = cosine_distance(c, key).unwrap_or(f64::INFINITY);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    /// Unit-length centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Centroid index of each point.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means with k-means++ seeding. `b` is clamped to the number of points.
/// Stops after 50 iterations or when inertia changes by less than a
/// relative 1e-6; centroids are then projected onto the unit sphere and
/// points reassigned to the nearest one.
pub fn cluster_memory(points: &[Vec<f64>], b: usize, seed_value: u64) -> Result<CentroidSet> {
    if points.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let b = b.clamp(1, points.len());
    let mut rng = seed::rng(seed_value, &[seed::stream::CLUSTER, b as u64]);
    let mut chosen = vec![false; points.len()];
    let first = rng.gen_range(0..points.len());
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < b {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            chosen.iter().position(|c| !c).expect("b <= number of points")
        };
        chosen[next] = true;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
        centroids.push(points[next].clone());
    }

    let dim = points[0].len();
    let mut assignment = vec![0; points.len()];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < 50 {
        iterations += 1;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; b];
        let mut counts = vec![0usize; b];
        for (p, &c) in points.iter().zip(&assignment) {
            axpy(&mut sums[c], 1.0, p);
            counts[c] += 1;
        }
        for c in 0..b {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let change = (prev_inertia - inertia).abs();
        if change <= 1e-6 * prev_inertia.max(f64::MIN_POSITIVE) || inertia == 0.0 {
            break;
        }
        prev_inertia = inertia;
    }
    for c in centroids.iter_mut() {
        let n = norm(c);
        if n > 0.0 {
            c.iter_mut().for_each(|x| *x /= n);
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(p, &centroids).0;
    }
    Ok(CentroidSet {
        centroids,
        assignment,
        iterations,
    })
}
