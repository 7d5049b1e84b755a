//! Cluster discovery over the feature store and the per-cluster statistics.
//!
//! Cluster indices exposed outside [`kmeans`] are in visual-acuity order:
//! index 0 is the cluster with the best median acuity (reported as C1).

mod io;
pub mod kmeans;
mod stats;

pub use io::{write_conditional_tsv, write_stats_tsv};
pub use kmeans::{adjusted_rand_index, kmeans_fit, KMeansConfig, KMeansFit, RestartTrace};
pub use stats::{
    cluster_summaries, conditional_probabilities, median, reorder_by_va, CiMethod, ClusterStats,
    ConditionalMatrix,
};

use crate::error::{Error, Result};
use kmeans::{nearest, sq_dist};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    /// Raw k-means order, row-major `k * d`.
    pub centroids: Vec<f64>,
    /// `permutation[raw] = ordered` index.
    pub permutation: Vec<usize>,
    pub feature_fingerprint: String,
    /// Default similarity temperature: median inter-centroid distance.
    pub temperature: f64,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn new(fit: &KMeansFit, permutation: Vec<usize>, feature_fingerprint: String) -> Result<Self> {
        let model = Self {
            k: fit.k,
            d: fit.d,
            temperature: median_centroid_distance(&fit.centroids, fit.d),
            centroids: fit.centroids.clone(),
            permutation,
            feature_fingerprint,
            inertia: fit.inertia,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.len() != self.k * self.d || self.permutation.len() != self.k {
            return Err(Error::Shape {
                expected: format!("{} centroids of dimension {}", self.k, self.d),
                actual: format!("{} values, {} labels", self.centroids.len(), self.permutation.len()),
            });
        }
        let mut seen = vec![false; self.k];
        for &p in &self.permutation {
            if p >= self.k || seen[p] {
                return Err(Error::invalid("cluster permutation is not a bijection"));
            }
            seen[p] = true;
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }

    /// `inverse[ordered] = raw` index.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.k];
        for (raw, &ord) in self.permutation.iter().enumerate() {
            inv[ord] = raw;
        }
        inv
    }

    /// Centroid of the cluster at VA-ordered index `ordered`.
    pub fn centroid(&self, ordered: usize) -> &[f64] {
        let raw = self.inverse_permutation()[ordered];
        &self.centroids[raw * self.d..(raw + 1) * self.d]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Shape {
                expected: format!("{}-dimensional feature", self.d),
                actual: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    /// VA-ordered index of the nearest centroid; ties go to the lowest raw index.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        self.check_dim(x)?;
        Ok(self.permutation[nearest(&self.centroids, self.d, x).0])
    }

    /// `softmax(-distance / temperature)` over the centroids, in VA order.
    pub fn similarity_vector(&self, x: &[f64], temperature: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        let mut dist = vec![0.0; self.k];
        for raw in 0..self.k {
            let c = &self.centroids[raw * self.d..(raw + 1) * self.d];
            dist[self.permutation[raw]] = sq_dist(c, x).sqrt();
        }
        Ok(softmax_neg(&dist, temperature))
    }
}

/// `softmax(-d / t)`, shifted by the minimum distance for stability.
pub fn softmax_neg(dist: &[f64], t: f64) -> Vec<f64> {
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dist.iter().map(|d| (-(d - min) / t).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Median pairwise Euclidean distance between centroids; 1 when undefined or zero.
pub fn median_centroid_distance(centroids: &[f64], d: usize) -> f64 {
    let k = centroids.len() / d.max(1);
    let mut dists = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            dists.push(sq_dist(&centroids[i * d..(i + 1) * d], &centroids[j * d..(j + 1) * d]).sqrt());
        }
    }
    match median(&mut dists) {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;

    fn model(centroids: Vec<f64>, d: usize, permutation: Vec<usize>) -> ClusterModel {
        let k = permutation.len();
        let fit = KMeansFit {
            k,
            d,
            centroids,
            assignments: vec![],
            inertia: 0.0,
            best_restart: 0,
            traces: vec![],
        };
        ClusterModel::new(&fit, permutation, "ab".repeat(32)).unwrap()
    }

    #[test]
    fn assign_maps_through_permutation() {
        let m = model(vec![0.0, 10.0, 20.0], 1, vec![2, 0, 1]);
        assert_eq!(m.assign(&[10.0]).unwrap(), 0);
        assert_eq!(m.assign(&[19.0]).unwrap(), 1);
        // Equidistant to raw 0 and raw 1: raw 0 wins.
        assert_eq!(m.assign(&[5.0]).unwrap(), 2);
        assert!(m.assign(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn similarity_cases() {
        let m = model(vec![0.0, 3.0], 1, vec![0, 1]);
        let w = m.similarity_vector(&[1.0], 1.0).unwrap();
        let (a, b) = ((-1.0f64).exp(), (-2.0f64).exp());
        assert!((w[0] - a / (a + b)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        let u = m.similarity_vector(&[1.5], 0.7).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12);
        let sharp = m.similarity_vector(&[1.0], 1e-3).unwrap();
        assert!(sharp[0] > 1.0 - 1e-12);
        assert!(m.similarity_vector(&[1.0], 0.0).is_err());
        assert_eq!(m.temperature, 3.0);
    }

    #[test]
    fn permutation_must_be_bijection() {
        let fit = kmeans_fit(&[0.0, 1.0, 5.0], 1, &KMeansConfig { k: 2, ..Default::default() }, Exec::Sequential).unwrap();
        assert!(ClusterModel::new(&fit, vec![0, 0], "ab".repeat(32)).is_err());
        let m = ClusterModel::new(&fit, vec![1, 0], "ab".repeat(32)).unwrap();
        let inv = m.inverse_permutation();
        for raw in 0..2 {
            assert_eq!(inv[m.permutation[raw]], raw);
        }
    }
}
