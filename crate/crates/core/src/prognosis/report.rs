//! Benchmark report and its text and tab-separated renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Family;
use crate::synth::Target;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub target: Target,
    pub family: Family,
    /// One MAE per seed, in seed order.
    pub scores: Vec<f64>,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds.
    pub std: Option<f64>,
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub clusters: usize,
    pub cells: Vec<ReportCell>,
}

/// Reference MAE (mean, std) reported on the clinical cohort, indexed
/// `[family][target]` in [`Family::ALL`] and [`Target::ALL`] order. Not
/// reproducible on synthetic data; shown for orientation only.
pub const REFERENCE_MAE: [[(f64, f64); 4]; 4] = [
    [(0.76, 0.01), (0.82, 0.01), (0.70, 0.03), (19.1, 0.35)],
    [(0.76, 0.01), (0.82, 0.01), (0.69, 0.04), (18.4, 0.40)],
    [(0.75, 0.01), (0.78, 0.02), (0.63, 0.05), (11.5, 0.25)],
    [(0.71, 0.02), (0.73, 0.01), (0.61, 0.03), (10.0, 0.20)],
];

/// `sqrt((a^2 + b^2) / 2)`.
pub fn pooled_std(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

impl EvalReport {
    pub fn cell(&self, target: Target, family: Family) -> &ReportCell {
        self.cells
            .iter()
            .find(|c| c.target == target && c.family == family)
            .expect("report holds every cell")
    }

    /// Grid of `mean ± std`, rows are families and columns targets.
    pub fn to_text(&self) -> String {
        let width = 24;
        let col = 24;
        let mut s = String::new();
        write!(s, "{:<width$}", "System").unwrap();
        for t in Target::ALL {
            write!(s, "| {:<col$}", t.title()).unwrap();
        }
        s.push('\n');
        write!(s, "{:<width$}", "").unwrap();
        for t in Target::ALL {
            write!(s, "| {:<col$}", format!("(MAE {})", t.unit())).unwrap();
        }
        s.push('\n');
        s.push_str(&"-".repeat(width + 4 * (col + 2)));
        s.push('\n');
        for f in Family::ALL {
            write!(s, "{:<width$}", f.title()).unwrap();
            for t in Target::ALL {
                let c = self.cell(t, f);
                let v = match (c.mean, c.std) {
                    (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                    _ => "unavailable".into(),
                };
                write!(s, "| {v:<col$}").unwrap();
            }
            s.push('\n');
        }
        writeln!(
            s,
            "\n{} seeds x {} patient-wise folds, k = {} clusters.",
            self.seeds.len(),
            self.folds,
            self.clusters
        )
        .unwrap();
        s.push_str("\nReference values reported on a clinical cohort (not comparable to synthetic data):\n");
        for (fi, f) in Family::ALL.into_iter().enumerate() {
            write!(s, "{:<width$}", f.title()).unwrap();
            for ti in 0..Target::ALL.len() {
                let (m, sd) = REFERENCE_MAE[fi][ti];
                write!(s, "| {:<col$}", format!("{m:.2} ± {sd:.2}")).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("target\tfamily\tunit\tmae_mean\tmae_std\tn_seeds\treference_mean\treference_std\tnote\n");
        for c in &self.cells {
            let fi = Family::ALL.iter().position(|&f| f == c.family).expect("known family");
            let ti = Target::ALL.iter().position(|&t| t == c.target).expect("known target");
            let (rm, rs) = REFERENCE_MAE[fi][ti];
            let fmt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"));
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{rm}\t{rs}\t{}",
                c.target.title(),
                c.family.title(),
                c.target.unit(),
                fmt(c.mean),
                fmt(c.std),
                c.scores.len(),
                c.unavailable.as_deref().unwrap_or("")
            )
            .unwrap();
        }
        s
    }

    /// One row per (seed, target, family) with the raw MAE.
    pub fn raw_scores_tsv(&self) -> String {
        let mut s = String::from("seed\ttarget\tfamily\tmae\n");
        for c in &self.cells {
            for (seed, v) in self.seeds.iter().zip(&c.scores) {
                writeln!(s, "{seed}\t{}\t{}\t{v:.9}", c.target.title(), c.family.title()).unwrap();
            }
        }
        s
    }
}
