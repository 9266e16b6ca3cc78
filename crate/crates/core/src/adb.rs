//! Per-task decision boundaries on the key-to-query distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdbMode {
    /// Gradient descent on the absolute-deviation boundary objective.
    Learned,
    /// 95th percentile of the distances.
    Quantile,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sum_s |d_s - delta|`, the boundary objective.
pub fn boundary_objective(distances: &[f64], delta: f64) -> f64 {
    distances.iter().map(|d| (d - delta).abs()).sum()
}

/// Fits `delta = softplus(rho)` with Adam, starting at the mean distance.
/// Samples outside the boundary push it out, samples inside pull it in.
/// Returns the visited boundary with the lowest objective, since the
/// sign-valued gradient keeps the last iterate oscillating.
pub fn fit_learned(distances: &[f64], lr: f64, steps: usize) -> f64 {
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    let mut rho = inv_softplus(mean.max(1e-6));
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    let mut best = (f64::INFINITY, softplus(rho));
    for t in 1..=steps + 1 {
        let delta = softplus(rho);
        let obj = boundary_objective(distances, delta);
        if obj < best.0 {
            best = (obj, delta);
        }
        if t > steps {
            break;
        }
        let g_delta: f64 = distances
            .iter()
            .map(|&d| if d > delta { -1.0 } else { 1.0 })
            .sum::<f64>()
            / distances.len() as f64;
        let g = g_delta * sigmoid(rho);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        rho -= lr * mh / (vh.sqrt() + eps);
    }
    best.1
}

/// Linear-interpolated quantile, `p` in `[0, 1]`.
pub fn quantile(distances: &[f64], p: f64) -> f64 {
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn fit_boundary(task_id: u32, distances: &[f64], mode: AdbMode, lr: f64, steps: usize) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::NoMemoryForTask(task_id));
    }
    Ok(match mode {
        AdbMode::Learned => fit_learned(distances, lr, steps),
        AdbMode::Quantile => quantile(distances, 0.95),
    })
}
