//! Cluster model persistence and table exports.
//!
//! Model file: one JSON header line followed by the raw-order centroids as
//! little-endian `f64`, row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClusterModel, ClusterStats, ConditionalMatrix};
use crate::error::{Error, Result};
use crate::features::atomic_write;

const MODEL_MAGIC: &str = "cluster-model";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    k: usize,
    d: usize,
    permutation: Vec<usize>,
    feature_fingerprint: String,
    temperature: f64,
    inertia: f64,
}

impl ClusterModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            format: MODEL_MAGIC.into(),
            version: 1,
            k: self.k,
            d: self.d,
            permutation: self.permutation.clone(),
            feature_fingerprint: self.feature_fingerprint.clone(),
            temperature: self.temperature,
            inertia: self.inertia,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header".into()))?;
        let h: ModelHeader = serde_json::from_slice(&bytes[..nl])?;
        if h.format != MODEL_MAGIC || h.version != 1 {
            return Err(corrupt("not a cluster model".into()));
        }
        let body = &bytes[nl + 1..];
        if body.len() != 8 * h.k * h.d {
            return Err(corrupt("centroid block has the wrong length".into()));
        }
        let model = Self {
            k: h.k,
            d: h.d,
            centroids: body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            permutation: h.permutation,
            feature_fingerprint: h.feature_fingerprint,
            temperature: h.temperature,
            inertia: h.inertia,
        };
        model.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

/// Table columns: cluster, #Images, #Patients, Ratio, then acuity summaries.
pub fn write_stats_tsv(stats: &[ClusterStats], path: &Path) -> Result<()> {
    let mut s = String::from("cluster\timages\tpatients\tratio\tva_n\tva_median\tva_mean\tva_ci_low\tva_ci_high\n");
    for c in stats {
        writeln!(
            s,
            "C{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.cluster + 1,
            c.n_images,
            c.n_patients,
            opt(c.ratio),
            c.n_va,
            opt(c.median_va),
            opt(c.mean_va),
            opt(c.ci_low),
            opt(c.ci_high)
        )
        .expect("string write");
    }
    atomic_write(path, s.as_bytes())
}

/// Rows are clusters in acuity order, columns grading labels.
pub fn write_conditional_tsv(m: &ConditionalMatrix, path: &Path) -> Result<()> {
    let mut s = String::from("cluster\tlabelled");
    for l in &m.labels {
        s.push('\t');
        s.push_str(l.name());
    }
    s.push('\n');
    for (c, row) in m.rows.iter().enumerate() {
        let labelled: usize = m.counts[c].iter().sum();
        write!(s, "C{}\t{}", c + 1, labelled).expect("string write");
        for j in 0..m.labels.len() {
            s.push('\t');
            s.push_str(&opt(row.as_ref().map(|r| r[j])));
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::exec::Exec;

    #[test]
    fn model_roundtrip() {
        let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let fit = kmeans_fit(&data, 2, &KMeansConfig { k: 3, ..Default::default() }, Exec::Sequential).unwrap();
        let m = ClusterModel::new(&fit, vec![2, 0, 1], "cd".repeat(32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        m.save(&p).unwrap();
        let back = ClusterModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
        let bytes = std::fs::read(&p).unwrap();
        assert!(ClusterModel::from_bytes(&bytes[..bytes.len() - 1], &p).is_err());
    }
}
