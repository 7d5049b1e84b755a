use std::fs;
use std::path::Path;

use biomarker_core::pipeline::{RunConfig, RunDir, Step};
use biomarker_core::{Error, Exec};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = 5;
    cfg.synth.n_patients = 12;
    cfg.synth.visits_per_eye = 2;
    cfg.synth.labelled_fraction = 1.0;
    cfg.train.steps = 3;
    cfg.train.batch_size = 4;
    cfg.cluster.k = 3;
    cfg.cluster.restarts = 2;
    cfg.attribute.limit = Some(4);
    cfg.evaluate.seeds = vec![0, 1];
    cfg.evaluate.folds = 3;
    cfg.evaluate.clusters = 3;
    cfg.evaluate.kmeans_restarts = 2;
    cfg.evaluate.learner.grid = vec![1e-2, 1.0];
    cfg.evaluate.learner.inner_folds = 2;
    cfg
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_chain_is_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_a = RunDir::new(a.path(), small_config(), Exec::Parallel).unwrap();
    let run_b = RunDir::new(b.path(), small_config(), Exec::Sequential).unwrap();
    for step in Step::ALL {
        run_a.run(step).unwrap();
        run_b.run(step).unwrap();
    }
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let report = fs::read_to_string(a.path().join("evaluate/report.txt")).unwrap();
    assert!(report.contains("Current grading system"));
    assert!(report.contains("Clusters"));

    // Rerunning a completed step reproduces its artifacts.
    let before = snapshot(&a.path().join("stats"));
    run_a.run(Step::Stats).unwrap();
    assert_eq!(before, snapshot(&a.path().join("stats")));

    let catalog = run_a.review_catalog().unwrap();
    assert_eq!(catalog.k(), 3);
    assert_eq!(catalog.clusters.iter().map(Vec::len).sum::<usize>(), 48);
}

#[test]
fn missing_upstream_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path(), small_config(), Exec::default()).unwrap();
    run.run(Step::Synth).unwrap();
    let err = run.run(Step::Cluster).unwrap_err();
    assert!(matches!(err, Error::MissingStep { .. }));
    assert!(err.to_string().contains("extract"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn stale_inputs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path(), small_config(), Exec::default()).unwrap();
    run.run(Step::Synth).unwrap();
    run.run(Step::Train).unwrap();

    let mut changed = small_config();
    changed.synth.n_patients = 13;
    let run2 = RunDir::new(dir.path(), changed, Exec::default()).unwrap();
    assert!(matches!(run2.run(Step::Extract), Err(Error::Stale(_))));

    // Rerunning an upstream step with a new result invalidates its consumers.
    run.run(Step::Extract).unwrap();
    let mut other_seed = small_config();
    other_seed.train.seed = 99;
    let run3 = RunDir::new(dir.path(), other_seed, Exec::default()).unwrap();
    run3.run(Step::Train).unwrap();
    let err = run3.run(Step::Cluster).unwrap_err();
    assert!(err.to_string().contains("rerun `extract`"), "{err}");

    run3.run(Step::Train).unwrap();
    run3.run(Step::Extract).unwrap();
    fs::write(run3.features_path(), b"tampered").unwrap();
    let err = run3.run(Step::Cluster).unwrap_err();
    assert!(matches!(err, Error::Stale(_)), "{err}");
}

#[test]
fn lock_excludes_concurrent_writers() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path(), small_config(), Exec::default()).unwrap();
    let guard = run.lock().unwrap();
    assert!(matches!(run.run(Step::Synth), Err(Error::Busy(_))));
    drop(guard);
    run.run(Step::Synth).unwrap();
}

#[test]
fn config_round_trips_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path(), small_config(), Exec::default()).unwrap();
    run.run(Step::Synth).unwrap();
    let reopened = RunDir::open(dir.path(), Exec::default()).unwrap();
    assert_eq!(reopened.config, small_config());
    assert!(RunConfig::from_json("{\"cluster\": {\"k\": 0}}").is_err());
}
