use std::collections::HashSet;

use biomarker_core::prognosis::{
    fit_predict, grading_input, mae, patientwise_kfold, Learner, LearnerConfig, Samples,
};
use biomarker_core::rng;
use biomarker_core::synth::GradingLabel;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Two images per patient.
fn samples(n_patients: usize, inputs: impl Fn(usize) -> Vec<f64>, target: impl Fn(&[f64]) -> f64) -> Samples {
    let mut s = Samples::default();
    for i in 0..2 * n_patients {
        let x = inputs(i);
        s.targets.push(target(&x));
        s.inputs.push(x);
        s.patient_ids.push(format!("p{:03}", i / 2));
    }
    s
}

fn simplex(seed: u64, i: usize, k: usize) -> Vec<f64> {
    let mut r = rng::derive(seed, "simplex", i as u64);
    let raw: Vec<f64> = (0..k).map(|_| -r.random::<f64>().ln()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}

#[test]
fn noiseless_linear_similarity_target_is_recovered() {
    let w = [70.0, 55.0, 40.0, 62.0, 20.0];
    let s = samples(60, |i| simplex(1, i, 5), |x| 10.0 + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    let plan = patientwise_kfold(&s.patient_ids, 10, 0).unwrap();
    let cfg = LearnerConfig {
        max_epochs: 100_000,
        tolerance: 1e-12,
        ..LearnerConfig::default()
    };
    let oof = fit_predict(Learner::Lasso, &s, &plan, &cfg).unwrap();
    let err = mae(&oof.predictions, &s.targets).unwrap();
    assert!(err < 1e-3, "MAE {err}");
}

#[test]
fn constant_target_is_predicted_exactly() {
    let s = samples(20, |i| vec![i as f64, (i % 3) as f64], |_| 42.5);
    let plan = patientwise_kfold(&s.patient_ids, 5, 1).unwrap();
    for learner in [Learner::Lasso, Learner::LinearSvr] {
        let oof = fit_predict(learner, &s, &plan, &LearnerConfig::default()).unwrap();
        assert!(mae(&oof.predictions, &s.targets).unwrap() < 1e-9);
    }
}

#[test]
fn demographic_inputs_give_one_prediction_per_patient() {
    // Both images of a patient share (age, sex) but not the target.
    let s = samples(
        30,
        |i| vec![50.0 + (i / 2) as f64, ((i / 2) % 2) as f64],
        |x| 0.3 * x[0],
    );
    let mut s = s;
    for (i, t) in s.targets.iter_mut().enumerate() {
        *t += if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let plan = patientwise_kfold(&s.patient_ids, 5, 2).unwrap();
    let oof = fit_predict(Learner::Lasso, &s, &plan, &LearnerConfig::default()).unwrap();
    for pair in oof.predictions.chunks(2) {
        assert_eq!(pair[0], pair[1]);
    }
}

#[test]
fn grading_family_has_five_coefficients() {
    let s = samples(
        25,
        |i| grading_input(GradingLabel::ALL[i % 5]),
        |x| x.iter().enumerate().map(|(j, v)| j as f64 * v).sum(),
    );
    let plan = patientwise_kfold(&s.patient_ids, 5, 0).unwrap();
    let oof = fit_predict(Learner::Lasso, &s, &plan, &LearnerConfig::default()).unwrap();
    assert!(oof.folds.iter().all(|f| f.fit.weights.len() == 5));
}

#[test]
fn permuting_test_labels_does_not_change_fits() {
    let s = samples(40, |i| simplex(3, i, 4), |x| 30.0 * x[0] - 12.0 * x[2]);
    let plan = patientwise_kfold(&s.patient_ids, 10, 4).unwrap();
    for learner in [Learner::Lasso, Learner::LinearSvr] {
        let base = fit_predict(learner, &s, &plan, &LearnerConfig::default()).unwrap();
        for (f, fold) in plan.folds.iter().enumerate() {
            let test: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
            let rows: Vec<usize> = (0..s.targets.len()).filter(|&i| test.contains(s.patient_ids[i].as_str())).collect();
            let mut shuffled = s.clone();
            let mut values: Vec<f64> = rows.iter().map(|&i| s.targets[i] + 100.0).collect();
            values.shuffle(&mut rng::from_seed(f as u64));
            for (&i, v) in rows.iter().zip(values) {
                shuffled.targets[i] = v;
            }
            let again = fit_predict(learner, &shuffled, &plan, &LearnerConfig::default()).unwrap();
            assert_eq!(again.folds[f].fit.digest(), base.folds[f].fit.digest());
        }
    }
}

#[test]
fn fold_order_does_not_change_scores() {
    let s = samples(30, |i| simplex(5, i, 3), |x| 20.0 * x[1]);
    let plan = patientwise_kfold(&s.patient_ids, 6, 7).unwrap();
    let mut reversed = plan.clone();
    reversed.folds.reverse();
    let a = fit_predict(Learner::Lasso, &s, &plan, &LearnerConfig::default()).unwrap();
    let b = fit_predict(Learner::Lasso, &s, &reversed, &LearnerConfig::default()).unwrap();
    assert_eq!(mae(&a.predictions, &s.targets).unwrap(), mae(&b.predictions, &s.targets).unwrap());
}

#[test]
fn fold_without_training_samples_is_an_error() {
    let s = samples(4, |i| vec![i as f64], |x| x[0]);
    let mut plan = patientwise_kfold(&s.patient_ids, 2, 0).unwrap();
    plan.folds[0].train.clear();
    assert!(fit_predict(Learner::Lasso, &s, &plan, &LearnerConfig::default()).is_err());
}

proptest! {
    #[test]
    fn fold_plans_partition_patients(n in 10usize..200, k in 2usize..11, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let plan = patientwise_kfold(&ids, k, seed).unwrap();
        let mut seen = HashSet::new();
        for f in &plan.folds {
            let test: HashSet<_> = f.test.iter().collect();
            prop_assert!(f.train.iter().all(|p| !test.contains(p)));
            prop_assert_eq!(f.train.len() + f.test.len(), n);
            prop_assert!(f.test.len() == n / k || f.test.len() == n / k + 1);
            for p in &f.test {
                prop_assert!(seen.insert(p.clone()));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }
}
