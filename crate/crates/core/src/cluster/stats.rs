//! Acuity ordering, conditional label probabilities and per-cluster summaries.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::GradingLabel;

/// Median, averaging the two central values for even counts. Sorts in place.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Permutation `raw -> ordered` sorting clusters by descending median VA.
/// Ties keep raw order; clusters without any VA come last.
pub fn reorder_by_va(raw_assignments: &[usize], va: &[Option<f64>], k: usize) -> Result<Vec<usize>> {
    if raw_assignments.len() != va.len() {
        return Err(Error::Shape {
            expected: format!("{} acuity values", raw_assignments.len()),
            actual: format!("{}", va.len()),
        });
    }
    if raw_assignments.is_empty() {
        return Err(Error::invalid("all clusters are empty"));
    }
    let mut per = vec![Vec::new(); k];
    for (&c, v) in raw_assignments.iter().zip(va) {
        if c >= k {
            return Err(Error::invalid(format!("cluster index {c} out of range for k = {k}")));
        }
        if let Some(v) = v {
            per[c].push(*v);
        }
    }
    let medians: Vec<Option<f64>> = per.iter_mut().map(|v| median(v)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| match (medians[a], medians[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let mut perm = vec![0; k];
    for (ordered, &raw) in order.iter().enumerate() {
        perm[raw] = ordered;
    }
    Ok(perm)
}

/// `P(label | cluster)` over labelled images. Clusters without labelled
/// images have `None` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMatrix {
    pub labels: Vec<GradingLabel>,
    pub counts: Vec<Vec<usize>>,
    pub rows: Vec<Option<Vec<f64>>>,
}

pub fn conditional_probabilities(
    assignments: &[usize],
    labels: &[Option<GradingLabel>],
    k: usize,
) -> Result<ConditionalMatrix> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", assignments.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let nl = GradingLabel::ALL.len();
    let mut counts = vec![vec![0usize; nl]; k];
    for (&c, l) in assignments.iter().zip(labels) {
        if c >= k {
            return Err(Error::invalid(format!("cluster index {c} out of range for k = {k}")));
        }
        if let Some(l) = l {
            counts[c][l.index()] += 1;
        }
    }
    let rows = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect();
    Ok(ConditionalMatrix {
        labels: GradingLabel::ALL.to_vec(),
        counts,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum CiMethod {
    /// `mean ± 1.96 sd / sqrt(n)` with the sample standard deviation.
    Normal,
    /// Percentile bootstrap of the mean.
    Bootstrap { resamples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// VA-ordered index, 0-based.
    pub cluster: usize,
    pub n_images: usize,
    pub n_patients: usize,
    pub ratio: Option<f64>,
    pub n_va: usize,
    pub median_va: Option<f64>,
    pub mean_va: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

fn mean_ci(values: &[f64], method: CiMethod, cluster: usize) -> Option<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    match method {
        CiMethod::Normal => {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let half = 1.96 * var.sqrt() / (n as f64).sqrt();
            Some((mean - half, mean + half))
        }
        CiMethod::Bootstrap { resamples, seed } => {
            let mut r = rng::derive(seed, "bootstrap", cluster as u64);
            let mut means: Vec<f64> = (0..resamples.max(1))
                .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect();
            means.sort_by(|a, b| a.total_cmp(b));
            let at = |q: f64| means[((q * (means.len() - 1) as f64).round()) as usize];
            Some((at(0.025), at(0.975)))
        }
    }
}

/// Counts and acuity summaries per VA-ordered cluster.
pub fn cluster_summaries(
    assignments: &[usize],
    patient_ids: &[&str],
    va: &[Option<f64>],
    k: usize,
    method: CiMethod,
) -> Result<Vec<ClusterStats>> {
    if assignments.len() != patient_ids.len() || assignments.len() != va.len() {
        return Err(Error::Shape {
            expected: format!("{} patient ids and acuity values", assignments.len()),
            actual: format!("{} and {}", patient_ids.len(), va.len()),
        });
    }
    let mut images = vec![0usize; k];
    let mut patients = vec![HashSet::new(); k];
    let mut values = vec![Vec::new(); k];
    for i in 0..assignments.len() {
        let c = assignments[i];
        if c >= k {
            return Err(Error::invalid(format!("cluster index {c} out of range for k = {k}")));
        }
        images[c] += 1;
        patients[c].insert(patient_ids[i]);
        if let Some(v) = va[i] {
            values[c].push(v);
        }
    }
    Ok((0..k)
        .map(|c| {
            let v = &mut values[c];
            let n_va = v.len();
            let mean_va = (n_va > 0).then(|| v.iter().sum::<f64>() / n_va as f64);
            let ci = mean_ci(v, method, c);
            ClusterStats {
                cluster: c,
                n_images: images[c],
                n_patients: patients[c].len(),
                ratio: (images[c] > 0).then(|| images[c] as f64 / patients[c].len() as f64),
                n_va,
                median_va: median(v),
                mean_va,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
            }
        })
        .collect())
}
