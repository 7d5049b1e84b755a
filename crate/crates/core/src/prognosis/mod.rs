//! Prognostic benchmark: four input families regressed onto four outcome
//! targets under patient-wise cross-validation, repeated over seeds.

mod learners;
mod report;

pub use learners::{lasso, linear_svr, LinearFit};
pub use report::{pooled_std, EvalReport, ReportCell, REFERENCE_MAE};

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::digest;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureMatrix;
use crate::rng;
use crate::synth::{derive_outcome_targets, CohortManifest, GradingLabel, Sex, Target};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffles the distinct patient ids and cuts them into `k` groups whose
/// sizes differ by at most one; fold `i` tests group `i`.
pub fn patientwise_kfold(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    let mut patients: Vec<String> = unique.into_iter().cloned().collect();
    if k < 2 {
        return Err(Error::invalid("at least two folds are required"));
    }
    if patients.len() < k {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    patients.shuffle(&mut rng::derive(seed, "folds", k as u64));
    let n = patients.len();
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        groups.push(patients[start..start + size].to_vec());
        start += size;
    }
    let folds = (0..k)
        .map(|i| Fold {
            test: groups[i].clone(),
            train: groups
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect(),
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "mae needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    Ok(predictions.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Demographic,
    GradingSystem,
    Clusters,
    FullySupervised,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Demographic,
        Family::GradingSystem,
        Family::Clusters,
        Family::FullySupervised,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Family::Demographic => "Demographic",
            Family::GradingSystem => "Current grading system",
            Family::Clusters => "Clusters",
            Family::FullySupervised => "Fully supervised",
        }
    }

    pub fn learner(self) -> Learner {
        match self {
            Family::FullySupervised => Learner::LinearSvr,
            _ => Learner::Lasso,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Lasso,
    LinearSvr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Candidate Lasso alpha / SVR C values.
    pub grid: Vec<f64>,
    pub inner_folds: usize,
    pub svr_epsilon: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            inner_folds: 5,
            svr_epsilon: 0.1,
            max_epochs: 1000,
            tolerance: 1e-6,
        }
    }
}

impl LearnerConfig {
    fn fit(&self, learner: Learner, x: &[Vec<f64>], y: &[f64], hyper: f64) -> LinearFit {
        match learner {
            Learner::Lasso => lasso(x, y, hyper, self.max_epochs, self.tolerance),
            Learner::LinearSvr => linear_svr(x, y, hyper, self.svr_epsilon, self.max_epochs, self.tolerance),
        }
    }
}

/// Regression samples; `patient_ids[i]` owns row `i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub patient_ids: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Samples {
    fn subset(&self, rows: &[usize]) -> Samples {
        Samples {
            patient_ids: rows.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            inputs: rows.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldModel {
    pub fit: LinearFit,
    pub hyper: f64,
}

impl LinearFit {
    /// SHA-256 over the coefficient bytes.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for v in self.weights.iter().chain(std::iter::once(&self.intercept)) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        digest::fingerprint(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutOfFold {
    /// One prediction per sample row.
    pub predictions: Vec<f64>,
    pub folds: Vec<FoldModel>,
}

fn rows_by_patient(samples: &Samples, patients: &[String]) -> Vec<usize> {
    let set: HashSet<&str> = patients.iter().map(String::as_str).collect();
    (0..samples.targets.len())
        .filter(|&i| set.contains(samples.patient_ids[i].as_str()))
        .collect()
}

/// Picks the grid value with the lowest inner patient-wise CV MAE; ties
/// keep the earlier grid entry.
fn select_hyper(learner: Learner, train: &Samples, cfg: &LearnerConfig, seed: u64) -> f64 {
    let n_patients = train.patient_ids.iter().collect::<HashSet<_>>().len();
    let k = cfg.inner_folds.min(n_patients);
    let fallback = cfg.grid[cfg.grid.len() / 2];
    if k < 2 || cfg.grid.len() == 1 {
        return fallback;
    }
    let Ok(plan) = patientwise_kfold(&train.patient_ids, k, seed) else {
        return fallback;
    };
    let mut best = (fallback, f64::INFINITY);
    for &h in &cfg.grid {
        let mut abs_err = 0.0;
        let mut count = 0usize;
        for fold in &plan.folds {
            let tr = rows_by_patient(train, &fold.train);
            let te = rows_by_patient(train, &fold.test);
            if tr.is_empty() || te.is_empty() {
                continue;
            }
            let s = train.subset(&tr);
            let fit = cfg.fit(learner, &s.inputs, &s.targets, h);
            for &i in &te {
                abs_err += (fit.predict(&train.inputs[i]) - train.targets[i]).abs();
                count += 1;
            }
        }
        let err = if count > 0 { abs_err / count as f64 } else { f64::INFINITY };
        if err < best.1 {
            best = (h, err);
        }
    }
    best.0
}

/// Out-of-fold predictions: each fold fits on its training patients'
/// samples (hyperparameter chosen by inner CV on those samples only) and
/// predicts its test patients' samples.
pub fn fit_predict(learner: Learner, samples: &Samples, plan: &FoldPlan, cfg: &LearnerConfig) -> Result<OutOfFold> {
    let n = samples.targets.len();
    if samples.inputs.len() != n || samples.patient_ids.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} inputs and patient ids"),
            actual: format!("{} and {}", samples.inputs.len(), samples.patient_ids.len()),
        });
    }
    if cfg.grid.is_empty() || cfg.grid.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::invalid("hyperparameter grid must be non-empty and positive"));
    }
    let planned: HashSet<&str> = plan.folds.iter().flat_map(|f| f.test.iter().map(String::as_str)).collect();
    if let Some(p) = samples.patient_ids.iter().find(|p| !planned.contains(p.as_str())) {
        return Err(Error::invalid(format!("patient {p} is not in the fold plan")));
    }
    let mut predictions = vec![f64::NAN; n];
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let tr = rows_by_patient(samples, &fold.train);
        let te = rows_by_patient(samples, &fold.test);
        if tr.is_empty() {
            return Err(Error::invalid(format!("fold {i} has no training samples")));
        }
        let train = samples.subset(&tr);
        let hyper = select_hyper(learner, &train, cfg, rng::derive_seed(plan.seed, "inner", i as u64));
        let fit = cfg.fit(learner, &train.inputs, &train.targets, hyper);
        for &r in &te {
            predictions[r] = fit.predict(&samples.inputs[r]);
        }
        folds.push(FoldModel { fit, hyper });
    }
    Ok(OutOfFold { predictions, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub learner: LearnerConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: (0..7).collect(),
            folds: 10,
            clusters: 30,
            kmeans_restarts: 10,
            learner: LearnerConfig::default(),
        }
    }
}

/// Family inputs for each feature row, in feature-matrix order.
pub struct FamilyInputs {
    pub patient_ids: Vec<String>,
    pub demographic: Vec<Vec<f64>>,
    pub grading: Vec<Vec<f64>>,
    pub clusters: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl FamilyInputs {
    pub fn get(&self, family: Family) -> &[Vec<f64>] {
        match family {
            Family::Demographic => &self.demographic,
            Family::GradingSystem => &self.grading,
            Family::Clusters => &self.clusters,
            Family::FullySupervised => &self.features,
        }
    }
}

/// `[age, sex]` with sex coded female 0, male 1.
pub fn demographic_input(age: u32, sex: Sex) -> Vec<f64> {
    vec![age as f64, if sex == Sex::M { 1.0 } else { 0.0 }]
}

pub fn grading_input(label: GradingLabel) -> Vec<f64> {
    let mut v = vec![0.0; GradingLabel::ALL.len()];
    v[label.index()] = 1.0;
    v
}

/// Builds every family's inputs except `clusters`, which depends on the
/// per-seed cluster model.
pub fn family_inputs(manifest: &CohortManifest, features: &FeatureMatrix) -> Result<FamilyInputs> {
    let mut out = FamilyInputs {
        patient_ids: Vec::with_capacity(features.n),
        demographic: Vec::with_capacity(features.n),
        grading: Vec::with_capacity(features.n),
        clusters: Vec::new(),
        features: Vec::with_capacity(features.n),
    };
    for (i, id) in features.image_ids.iter().enumerate() {
        let visit = manifest
            .visit(id)
            .ok_or_else(|| Error::invalid(format!("image {id} is not in the manifest")))?;
        let patient = manifest
            .patient(&visit.patient_id)
            .ok_or_else(|| Error::invalid(format!("patient {} is not in the manifest", visit.patient_id)))?;
        out.patient_ids.push(visit.patient_id.clone());
        out.demographic.push(demographic_input(patient.age, patient.sex));
        out.grading.push(grading_input(visit.grading));
        out.features.push(features.row(i).iter().map(|&v| v as f64).collect());
    }
    Ok(out)
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per seed: refits k-means, rebuilds similarity vectors, redraws the fold
/// plan and scores every (target, family) cell.
pub fn run_benchmark(
    manifest: &CohortManifest,
    features: &FeatureMatrix,
    config: &BenchmarkConfig,
    exec: Exec,
) -> Result<EvalReport> {
    if config.seeds.is_empty() {
        return Err(Error::invalid("benchmark needs at least one seed"));
    }
    let mut inputs = family_inputs(manifest, features)?;
    let targets = derive_outcome_targets(manifest);
    let by_id: HashMap<&str, usize> = manifest
        .visits
        .iter()
        .enumerate()
        .map(|(i, v)| (v.image_id.as_str(), i))
        .collect();
    let target_rows: Vec<usize> = features.image_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let data = features.to_f64();
    let run_seed = |&seed: &u64| -> Result<Vec<std::result::Result<f64, String>>> {
        let km = KMeansConfig {
            k: config.clusters,
            restarts: config.kmeans_restarts,
            seed,
            ..KMeansConfig::default()
        };
        let fit = kmeans_fit(&data, features.d, &km, Exec::Sequential)?;
        let model = ClusterModel::new(&fit, (0..fit.k).collect(), features.encoder_fingerprint.clone())?;
        let sims: Vec<Vec<f64>> = inputs
            .features
            .iter()
            .map(|x| model.similarity_vector(x, model.temperature))
            .collect::<Result<_>>()?;
        let plan = patientwise_kfold(&inputs.patient_ids, config.folds, seed)?;
        let mut cells = Vec::new();
        for target in Target::ALL {
            let eligible: Vec<(usize, f64)> = target_rows
                .iter()
                .enumerate()
                .filter_map(|(i, &r)| targets.rows[r].get(target).map(|v| (i, v)))
                .collect();
            for family in Family::ALL {
                let source: &[Vec<f64>] = if family == Family::Clusters { &sims } else { inputs.get(family) };
                let samples = Samples {
                    patient_ids: eligible.iter().map(|&(i, _)| inputs.patient_ids[i].clone()).collect(),
                    inputs: eligible.iter().map(|&(i, _)| source[i].clone()).collect(),
                    targets: eligible.iter().map(|&(_, v)| v).collect(),
                };
                let cell = if samples.targets.is_empty() {
                    Err("no eligible images".to_owned())
                } else {
                    fit_predict(family.learner(), &samples, &plan, &config.learner)
                        .and_then(|oof| mae(&oof.predictions, &samples.targets))
                        .map_err(|e| e.to_string())
                };
                cells.push(cell);
            }
        }
        Ok(cells)
    };
    let per_seed = exec.map_slice(&config.seeds, run_seed);
    let per_seed: Vec<_> = per_seed.into_iter().collect::<Result<_>>()?;
    inputs.clusters.clear();

    let mut cells = Vec::new();
    for (ti, target) in Target::ALL.into_iter().enumerate() {
        for (fi, family) in Family::ALL.into_iter().enumerate() {
            let idx = ti * Family::ALL.len() + fi;
            let scores: std::result::Result<Vec<f64>, String> =
                per_seed.iter().map(|s| s[idx].clone()).collect();
            cells.push(match scores {
                Ok(scores) => ReportCell {
                    target,
                    family,
                    mean: Some(scores.iter().sum::<f64>() / scores.len() as f64),
                    std: Some(sample_std(&scores)),
                    scores,
                    unavailable: None,
                },
                Err(reason) => {
                    log::warn!("{} / {}: unavailable ({reason})", target.title(), family.title());
                    ReportCell {
                        target,
                        family,
                        scores: Vec::new(),
                        mean: None,
                        std: None,
                        unavailable: Some(reason),
                    }
                }
            });
        }
    }
    Ok(EvalReport {
        seeds: config.seeds.clone(),
        folds: config.folds,
        clusters: config.clusters,
        cells,
    })
}
