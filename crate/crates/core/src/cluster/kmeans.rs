//! Lloyd's algorithm with k-means++ seeding and best-of-restarts selection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 30,
            restarts: 10,
            max_iterations: 300,
            seed: 0,
        }
    }
}

/// One restart: the inertia after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub inertia: Vec<f64>,
    pub converged: bool,
}

/// Best restart of a fit, in raw (unpermuted) cluster indices.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub d: usize,
    /// Row-major `k * d`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub best_restart: usize,
    pub traces: Vec<RestartTrace>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(centroids: &[f64], d: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(c, x);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn plus_plus_init(data: &[f64], n: usize, d: usize, k: usize, r: &mut rng::Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(&data[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centroids[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // Never pick a zero-weight point through rounding at the tail.
            if dist[chosen] == 0.0 {
                chosen = dist.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = &data[pick * d..(pick + 1) * d];
        centroids.extend_from_slice(c);
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(&data[i * d..(i + 1) * d], c));
        }
    }
    centroids
}

struct RestartResult {
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    trace: RestartTrace,
}

fn lloyd(data: &[f64], n: usize, d: usize, k: usize, max_iter: usize, seed: u64, restart: usize) -> RestartResult {
    let mut r = rng::derive(seed, "kmeans", restart as u64);
    let mut centroids = plus_plus_init(data, n, d, k, &mut r);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (j, dist) = nearest(&centroids, d, &data[i * d..(i + 1) * d]);
            dists[i] = dist;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        trace.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(&data[i * d..(i + 1) * d]) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed at the point farthest from its own centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .map(|i| {
                        let c = assignments[i];
                        (i, sq_dist(&data[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d]))
                    })
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                taken[far] = true;
                centroids[j * d..(j + 1) * d].copy_from_slice(&data[far * d..(far + 1) * d]);
            }
        }
    }
    let inertia = *trace.last().expect("at least one iteration");
    RestartResult {
        centroids,
        assignments,
        inertia,
        trace: RestartTrace {
            inertia: trace,
            converged,
        },
    }
}

/// Fits k-means to `n = data.len() / d` row-major points.
pub fn kmeans_fit(data: &[f64], d: usize, config: &KMeansConfig, exec: Exec) -> Result<KMeansFit> {
    if d == 0 || data.len() % d != 0 {
        return Err(Error::Shape {
            expected: format!("a multiple of {d} values"),
            actual: format!("{}", data.len()),
        });
    }
    let n = data.len() / d;
    let k = config.k;
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} points cannot form {k} clusters")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature values".into()));
    }
    let restarts = config.restarts.max(1);
    let results = exec.map_range(restarts, |r| {
        lloyd(data, n, d, k, config.max_iterations, config.seed, r)
    });
    let best = results
        .iter()
        .enumerate()
        .fold(0, |b, (i, res)| if res.inertia < results[b].inertia { i } else { b });
    let traces = results.iter().map(|r| r.trace.clone()).collect();
    let winner = &results[best];
    Ok(KMeansFit {
        k,
        d,
        centroids: winner.centroids.clone(),
        assignments: winner.assignments.clone(),
        inertia: winner.inertia,
        best_restart: best,
        traces,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().map(|&v| c2(v)).sum();
    let sum_a: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_equals_k_gives_zero_inertia() {
        let data = [0.0, 0.0, 5.0, 1.0, -3.0, 2.0];
        let cfg = KMeansConfig { k: 3, ..KMeansConfig::default() };
        let fit = kmeans_fit(&data, 2, &cfg, Exec::Sequential).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut a = fit.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn identical_points_single_cluster() {
        let data = [1.5, -2.0].repeat(5);
        let cfg = KMeansConfig { k: 1, ..KMeansConfig::default() };
        let fit = kmeans_fit(&data, 2, &cfg, Exec::Sequential).unwrap();
        assert_eq!(fit.centroids, vec![1.5, -2.0]);
    }

    #[test]
    fn duplicate_points_with_more_clusters_still_fit() {
        let data = [1.0; 6];
        let cfg = KMeansConfig { k: 3, ..KMeansConfig::default() };
        let fit = kmeans_fit(&data, 1, &cfg, Exec::Sequential).unwrap();
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn errors() {
        let cfg = KMeansConfig { k: 3, ..KMeansConfig::default() };
        assert!(kmeans_fit(&[1.0, 2.0], 1, &cfg, Exec::Sequential).is_err());
        assert!(kmeans_fit(&[1.0, f64::NAN, 2.0], 1, &KMeansConfig { k: 1, ..cfg.clone() }, Exec::Sequential).is_err());
        assert!(kmeans_fit(&[1.0, 2.0, 3.0], 2, &cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn ari_cases() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        // Contingency [[1,1],[0,2]]: index 1, expected 2*3/6, max 2.5.
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert!(v.abs() < 1e-12);
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        // index 2, sums 6 and 3 over 15 pairs: (2 - 1.2) / (4.5 - 1.2).
        assert!((v - 0.8 / 3.3).abs() < 1e-12);
    }

    #[test]
    fn modes_agree() {
        let mut r = rng::from_seed(1);
        let data: Vec<f64> = (0..200).map(|_| r.random_range(-1.0..1.0)).collect();
        let cfg = KMeansConfig { k: 4, ..KMeansConfig::default() };
        let a = kmeans_fit(&data, 2, &cfg, Exec::Sequential).unwrap();
        let b = kmeans_fit(&data, 2, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
