//! Run-directory orchestration of the full pipeline.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.json                    last config used, verbatim
//! .lock                          held by the writing process
//! synth/manifest.jsonl, images/  cohort, <id>.png and <id>.mask.png
//! train/checkpoint.bin, loss.tsv
//! extract/features.bin(.ids)
//! cluster/model.bin, assignments.tsv
//! attribute/probe.json, maps/    <id>.attr.png and <id>.overlay.png
//! stats/cluster_stats.tsv, conditional.tsv, conditional.json, similarity.tsv
//! evaluate/report.txt, report.tsv, raw_scores.tsv, report.json
//! review/                        session and curator logs
//! ```
//!
//! Every step writes `<step>/marker.json` last. A marker records the digest
//! of the step's config section, the output digest of every upstream step
//! it consumed and the SHA-256 of each file it wrote. Before a step runs,
//! the markers of its whole upstream chain are re-verified against the
//! files on disk and against the current config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{batch_attribute, fit_probe, AttributionItem, LinearProbe, ProbeConfig};
use crate::augment::AugmentConfig;
use crate::cluster::{
    cluster_summaries, conditional_probabilities, kmeans_fit, reorder_by_va, write_conditional_tsv, write_stats_tsv,
    CiMethod, ClusterModel, ConditionalMatrix, KMeansConfig,
};
use crate::digest;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{atomic_write, extract_features, l2_normalize, FeatureMatrix};
use crate::image::GrayImage;
use crate::nn::EncoderSpec;
use crate::prognosis::{run_benchmark, BenchmarkConfig};
use crate::review::{Member, ReviewCatalog};
use crate::ssl::{save_loss_trace, ByolTrainer, Checkpoint, TrainConfig};
use crate::synth::{
    generate_cohort_with, load_manifest, render_cohort, save_manifest, write_cohort_images, CohortConfig,
    CohortManifest, MANIFEST_FILE,
};

pub const CONFIG_FILE: &str = "config.json";
pub const MARKER_FILE: &str = "marker.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Synth,
    Train,
    Extract,
    Cluster,
    Attribute,
    Stats,
    Evaluate,
}

impl Step {
    pub const ALL: [Step; 7] = [
        Step::Synth,
        Step::Train,
        Step::Extract,
        Step::Cluster,
        Step::Attribute,
        Step::Stats,
        Step::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Synth => "synth",
            Step::Train => "train",
            Step::Extract => "extract",
            Step::Cluster => "cluster",
            Step::Attribute => "attribute",
            Step::Stats => "stats",
            Step::Evaluate => "evaluate",
        }
    }

    /// Steps whose artifacts this step reads directly.
    pub fn upstream(self) -> &'static [Step] {
        match self {
            Step::Synth => &[],
            Step::Train => &[Step::Synth],
            Step::Extract => &[Step::Synth, Step::Train],
            Step::Cluster => &[Step::Synth, Step::Extract],
            Step::Attribute => &[Step::Synth, Step::Train, Step::Extract, Step::Cluster],
            Step::Stats => &[Step::Synth, Step::Extract, Step::Cluster],
            Step::Evaluate => &[Step::Synth, Step::Extract],
        }
    }
}

impl std::str::FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Step::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown step `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSubset {
    /// Images whose grading annotation is in the labelled subset.
    #[default]
    Labelled,
    All,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub subset: ImageSubset,
    /// L2-normalize feature rows before storing them.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Similarity temperature; the median inter-centroid distance if unset.
    pub temperature: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            k: km.k,
            restarts: km.restarts,
            max_iterations: km.max_iterations,
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub ci: CiMethod,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { ci: CiMethod::Normal }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub probe: ProbeConfig,
    /// Attribute only the first `limit` extracted images.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: CohortConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub cluster: ClusterConfig,
    pub stats: StatsConfig,
    pub attribute: AttributeConfig,
    pub evaluate: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Single-core CPU budget: the tiny encoder on standardized 64x64
    /// inputs, 2,000 steps of batch 16 at a raised learning rate.
    pub fn desk() -> Self {
        let encoder = EncoderSpec::tiny();
        Self {
            seed: 0,
            synth: CohortConfig::default(),
            augment: AugmentConfig {
                output_size: encoder.input_size,
                ..AugmentConfig::default()
            },
            train: TrainConfig {
                steps: 2000,
                batch_size: 16,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            encoder,
            extract: ExtractConfig::default(),
            cluster: ClusterConfig::default(),
            stats: StatsConfig::default(),
            attribute: AttributeConfig::default(),
            evaluate: BenchmarkConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.cluster.k == 0 || self.cluster.restarts == 0 || self.cluster.max_iterations == 0 {
            return Err(Error::invalid("cluster k, restarts and max_iterations must be positive"));
        }
        if let Some(t) = self.cluster.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("temperature must be positive and finite"));
            }
        }
        if self.evaluate.seeds.is_empty() || self.evaluate.folds < 2 {
            return Err(Error::invalid("evaluation needs at least one seed and two folds"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// The config sections a step depends on, as canonical JSON.
    fn section(&self, step: Step) -> serde_json::Value {
        use serde_json::json;
        let mut train = self.train.clone();
        // Execution mode never changes results.
        train.exec = Exec::default();
        match step {
            Step::Synth => json!({ "seed": self.seed, "synth": self.synth }),
            Step::Train => json!({ "seed": self.seed, "augment": self.augment, "encoder": self.encoder, "train": train }),
            Step::Extract => json!({ "extract": self.extract }),
            Step::Cluster => json!({ "seed": self.seed, "cluster": self.cluster }),
            Step::Attribute => json!({ "attribute": self.attribute }),
            Step::Stats => json!({ "stats": self.stats }),
            Step::Evaluate => json!({ "evaluate": self.evaluate }),
        }
    }

    fn section_digest(&self, step: Step) -> String {
        digest::fingerprint(self.section(step).to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMarker {
    pub step: Step,
    pub config_digest: String,
    pub config: serde_json::Value,
    /// Upstream step name -> that step's `outputs_digest` when consumed.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the run directory -> SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
    pub outputs_digest: String,
}

fn outputs_digest(outputs: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (p, h) in outputs {
        s.push_str(p);
        s.push('\t');
        s.push_str(h);
        s.push('\n');
    }
    digest::fingerprint(s.as_bytes())
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub config: RunConfig,
    pub exec: Exec,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, config: RunConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            root: root.into(),
            config,
            exec,
        })
    }

    /// Uses `<root>/config.json` when present, else the desk config.
    pub fn open(root: impl Into<PathBuf>, exec: Exec) -> Result<Self> {
        let root = root.into();
        let path = root.join(CONFIG_FILE);
        let config = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            RunConfig::from_json(&text)?
        } else {
            RunConfig::desk()
        };
        Self::new(root, config, exec)
    }

    pub fn step_dir(&self, step: Step) -> PathBuf {
        self.root.join(step.name())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.step_dir(Step::Synth).join(MANIFEST_FILE)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.step_dir(Step::Synth).join("images")
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.images_dir().join(format!("{image_id}.png"))
    }

    pub fn mask_path(&self, image_id: &str) -> PathBuf {
        self.images_dir().join(format!("{image_id}.mask.png"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.step_dir(Step::Train).join("checkpoint.bin")
    }

    pub fn features_path(&self) -> PathBuf {
        self.step_dir(Step::Extract).join("features.bin")
    }

    pub fn cluster_model_path(&self) -> PathBuf {
        self.step_dir(Step::Cluster).join("model.bin")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.step_dir(Step::Attribute).join("maps")
    }

    pub fn attribution_path(&self, image_id: &str) -> PathBuf {
        self.maps_dir().join(format!("{image_id}.attr.png"))
    }

    pub fn overlay_path(&self, image_id: &str) -> PathBuf {
        self.maps_dir().join(format!("{image_id}.overlay.png"))
    }

    pub fn review_dir(&self) -> PathBuf {
        self.root.join("review")
    }

    pub fn lock(&self) -> Result<RunLock> {
        mkdir(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Busy(format!(
                "{} exists; another command is writing to this run (remove it if that process died)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn marker(&self, step: Step) -> Result<Option<StepMarker>> {
        let path = self.step_dir(step).join(MARKER_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&read(&path)?)?))
    }

    /// Checks `step`'s marker against the files on disk, the current config
    /// and the markers it consumed, recursively.
    pub fn verify(&self, step: Step) -> Result<StepMarker> {
        let marker = self.marker(step)?.ok_or_else(|| Error::MissingStep {
            what: format!("{} output", step.name()),
            step: step.name().into(),
        })?;
        if marker.config_digest != self.config.section_digest(step) {
            return Err(Error::Stale(format!(
                "the `{}` config changed since it ran; rerun `{}`",
                step.name(),
                step.name()
            )));
        }
        for (rel, expected) in &marker.outputs {
            let path = self.root.join(rel);
            let actual = digest::fingerprint(&read(&path)?);
            if &actual != expected {
                return Err(Error::Stale(format!(
                    "{} was modified after `{}` wrote it; rerun `{}`",
                    path.display(),
                    step.name(),
                    step.name()
                )));
            }
        }
        for &up in step.upstream() {
            let m = self.verify(up)?;
            if marker.inputs.get(up.name()) != Some(&m.outputs_digest) {
                return Err(Error::Stale(format!(
                    "`{}` was rerun after `{}`; rerun `{}`",
                    up.name(),
                    step.name(),
                    step.name()
                )));
            }
        }
        Ok(marker)
    }

    fn upstream_inputs(&self, step: Step) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &up in step.upstream() {
            inputs.insert(up.name().to_owned(), self.verify(up)?.outputs_digest);
        }
        Ok(inputs)
    }

    fn write_marker(&self, step: Step, inputs: BTreeMap<String, String>, files: &[PathBuf]) -> Result<StepMarker> {
        let mut outputs = BTreeMap::new();
        for f in files {
            let rel = f
                .strip_prefix(&self.root)
                .expect("outputs live in the run directory")
                .to_string_lossy()
                .replace('\\', "/");
            outputs.insert(rel, digest::fingerprint(&read(f)?));
        }
        let marker = StepMarker {
            step,
            config_digest: self.config.section_digest(step),
            config: self.config.section(step),
            inputs,
            outputs_digest: outputs_digest(&outputs),
            outputs,
        };
        let bytes = serde_json::to_vec_pretty(&marker)?;
        atomic_write(&self.step_dir(step).join(MARKER_FILE), &bytes)?;
        Ok(marker)
    }

    /// Removes the step's marker and directory before a rerun.
    fn reset(&self, step: Step) -> Result<PathBuf> {
        let dir = self.step_dir(step);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        mkdir(&dir)?;
        Ok(dir)
    }

    fn write_config(&self) -> Result<()> {
        mkdir(&self.root)?;
        atomic_write(&self.root.join(CONFIG_FILE), self.config.to_json().as_bytes())
    }

    /// Runs one step under the run lock.
    pub fn run(&self, step: Step) -> Result<StepMarker> {
        let _lock = self.lock()?;
        self.write_config()?;
        let inputs = self.upstream_inputs(step)?;
        log::info!("running `{}` in {}", step.name(), self.root.display());
        let dir = self.reset(step)?;
        let files = match step {
            Step::Synth => self.run_synth(&dir)?,
            Step::Train => self.run_train(&dir)?,
            Step::Extract => self.run_extract(&dir)?,
            Step::Cluster => self.run_cluster(&dir)?,
            Step::Attribute => self.run_attribute(&dir)?,
            Step::Stats => self.run_stats(&dir)?,
            Step::Evaluate => self.run_evaluate(&dir)?,
        };
        self.write_marker(step, inputs, &files)
    }

    pub fn load_manifest(&self) -> Result<CohortManifest> {
        load_manifest(&self.manifest_path())
    }

    /// Stored images resized to the encoder input, in `ids` order.
    pub fn load_encoder_images(&self, ids: &[String]) -> Result<Vec<GrayImage>> {
        let (h, w) = self.config.encoder.input_size;
        let loaded = self.exec.map_slice(ids, |id| {
            GrayImage::load_png(&self.image_path(id)).map(|img| {
                if img.dims() == (h, w) {
                    img
                } else {
                    img.downscale_area(h, w)
                }
            })
        });
        loaded.into_iter().collect()
    }

    pub fn load_features(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::load(&self.features_path())
    }

    pub fn load_cluster_model(&self) -> Result<ClusterModel> {
        ClusterModel::load(&self.cluster_model_path())
    }

    fn run_synth(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = generate_cohort_with(&self.config.synth, self.config.seed, self.exec)?;
        let rendered = render_cohort(&manifest, &self.config.synth.render, self.exec)?;
        write_cohort_images(&self.images_dir(), &manifest, &rendered)?;
        save_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
        let mut files = vec![dir.join(MANIFEST_FILE)];
        for v in &manifest.visits {
            files.push(self.image_path(&v.image_id));
            files.push(self.mask_path(&v.image_id));
        }
        log::info!("synthesized {} images of {} patients", manifest.visits.len(), manifest.patients.len());
        Ok(files)
    }

    fn run_train(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let ids: Vec<String> = manifest.visits.iter().map(|v| v.image_id.clone()).collect();
        let images = self.load_encoder_images(&ids)?;
        let mut cfg = self.config.train.clone();
        cfg.exec = self.exec;
        let mut trainer = ByolTrainer::new(&images, &self.config.encoder, &self.config.augment, &cfg)?;
        let every = (cfg.steps / 20).max(1);
        for s in 0..cfg.steps {
            let loss = trainer.step()?;
            if (s + 1) % every == 0 {
                log::info!("step {}/{} loss {loss:.4}", s + 1, cfg.steps);
            }
        }
        let mut outcome = trainer.finish();
        outcome.checkpoint.train_config.exec = Exec::default();
        let ckpt = self.checkpoint_path();
        outcome.checkpoint.save(&ckpt)?;
        let trace = dir.join("loss.tsv");
        save_loss_trace(&outcome.loss_trace, &trace)?;
        Ok(vec![ckpt, trace])
    }

    fn run_extract(&self, _dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let weights = Checkpoint::load(&self.checkpoint_path())?.encoder_weights()?;
        let ids: Vec<String> = manifest
            .visits
            .iter()
            .filter(|v| self.config.extract.subset == ImageSubset::All || v.labelled)
            .map(|v| v.image_id.clone())
            .collect();
        if ids.is_empty() {
            return Err(Error::invalid("the selected image subset is empty"));
        }
        let images = self.load_encoder_images(&ids)?;
        let mut features = extract_features(&weights, &ids, &images, self.config.encoder.input_size, self.exec)?;
        if self.config.extract.normalize {
            features = l2_normalize(&features)?;
        }
        let path = self.features_path();
        features.save(&path)?;
        log::info!("extracted {} x {} features", features.n, features.d);
        Ok(vec![path.clone(), crate::features::ids_path(&path)])
    }

    fn run_cluster(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let features = self.load_features()?;
        let c = &self.config.cluster;
        let km = KMeansConfig {
            k: c.k,
            restarts: c.restarts,
            max_iterations: c.max_iterations,
            seed: self.config.seed,
        };
        let fit = kmeans_fit(&features.to_f64(), features.d, &km, self.exec)?;
        let va = visit_values(&manifest, &features.image_ids, |v| v.va_letters)?;
        let perm = reorder_by_va(&fit.assignments, &va, fit.k)?;
        let fp = digest::fingerprint_file(&self.features_path())?;
        let mut model = ClusterModel::new(&fit, perm, fp)?;
        if let Some(t) = c.temperature {
            model.temperature = t;
        }
        let model_path = self.cluster_model_path();
        model.save(&model_path)?;
        let mut tsv = String::from("image_id\tpatient_id\tcluster\n");
        for (i, id) in features.image_ids.iter().enumerate() {
            let v = manifest.visit(id).expect("checked above");
            let ordered = model.permutation[fit.assignments[i]];
            tsv.push_str(&format!("{id}\t{}\t{ordered}\n", v.patient_id));
        }
        let assignments = dir.join("assignments.tsv");
        atomic_write(&assignments, tsv.as_bytes())?;
        log::info!("k-means inertia {:.4} (restart {})", fit.inertia, fit.best_restart);
        Ok(vec![model_path, assignments])
    }

    /// Features, VA-ordered assignments and the model, with the model's
    /// provenance checked against the feature file.
    pub fn load_clustered(&self) -> Result<(FeatureMatrix, ClusterModel, Vec<usize>)> {
        let features = self.load_features()?;
        let model = self.load_cluster_model()?;
        let fp = digest::fingerprint_file(&self.features_path())?;
        if model.feature_fingerprint != fp {
            return Err(Error::Stale("cluster model was fit on different features; rerun `cluster`".into()));
        }
        let data = features.to_f64();
        let assignments = (0..features.n)
            .map(|i| model.assign(&data[i * features.d..(i + 1) * features.d]))
            .collect::<Result<Vec<_>>>()?;
        Ok((features, model, assignments))
    }

    fn run_attribute(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let weights = Checkpoint::load(&self.checkpoint_path())?.encoder_weights()?;
        let (features, model, assignments) = self.load_clustered()?;
        if features.encoder_fingerprint != weights.fingerprint {
            return Err(Error::Stale("features come from a different checkpoint; rerun `extract`".into()));
        }
        let probe = fit_probe(&features.to_f64(), features.d, &assignments, model.k, &self.config.attribute.probe)?;
        let probe_path = dir.join("probe.json");
        atomic_write(&probe_path, &serde_json::to_vec_pretty(&probe)?)?;
        log::info!(
            "probe train accuracy {:.3} after {} iterations",
            probe.train_accuracy,
            probe.iterations
        );
        let n = self.config.attribute.limit.unwrap_or(features.n).min(features.n);
        let ids = &features.image_ids[..n];
        let images = self.load_encoder_images(ids)?;
        let items: Vec<AttributionItem<'_>> = ids
            .iter()
            .zip(&images)
            .zip(&assignments)
            .map(|((id, image), &cluster)| AttributionItem {
                image_id: id,
                image,
                cluster,
            })
            .collect();
        mkdir(&self.maps_dir())?;
        let report = batch_attribute(&weights, &probe, &items, &self.maps_dir(), self.exec);
        let mut failures = String::from("image_id\terror\n");
        for (id, e) in &report.failures {
            failures.push_str(&format!("{id}\t{}\n", e.replace(['\t', '\n'], " ")));
        }
        let failures_path = dir.join("failures.tsv");
        atomic_write(&failures_path, failures.as_bytes())?;
        let mut files = vec![probe_path, failures_path];
        for p in report.written {
            let id = p
                .file_name()
                .and_then(|f| f.to_str())
                .and_then(|f| f.strip_suffix(".attr.png"))
                .expect("attribution file name")
                .to_owned();
            files.push(p);
            files.push(self.overlay_path(&id));
        }
        Ok(files)
    }

    fn run_stats(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let (features, model, assignments) = self.load_clustered()?;
        let va = visit_values(&manifest, &features.image_ids, |v| v.va_letters)?;
        let labels = visit_values(&manifest, &features.image_ids, |v| v.labelled.then_some(v.grading))?;
        let patients = visit_values(&manifest, &features.image_ids, |v| Some(v.patient_id.clone()))?;
        let patient_refs: Vec<&str> = patients.iter().map(|p| p.as_deref().expect("set")).collect();
        let stats = cluster_summaries(&assignments, &patient_refs, &va, model.k, self.config.stats.ci)?;
        let cond = conditional_probabilities(&assignments, &labels, model.k)?;
        let stats_path = dir.join("cluster_stats.tsv");
        write_stats_tsv(&stats, &stats_path)?;
        let cond_tsv = dir.join("conditional.tsv");
        write_conditional_tsv(&cond, &cond_tsv)?;
        let cond_json = dir.join("conditional.json");
        atomic_write(&cond_json, &serde_json::to_vec_pretty(&cond)?)?;
        let mut sim = String::from("image_id");
        for c in 0..model.k {
            sim.push_str(&format!("\tC{}", c + 1));
        }
        sim.push('\n');
        let data = features.to_f64();
        for (i, id) in features.image_ids.iter().enumerate() {
            let s = model.similarity_vector(&data[i * features.d..(i + 1) * features.d], model.temperature)?;
            sim.push_str(id);
            for v in s {
                sim.push_str(&format!("\t{v:.9}"));
            }
            sim.push('\n');
        }
        let sim_path = dir.join("similarity.tsv");
        atomic_write(&sim_path, sim.as_bytes())?;
        Ok(vec![stats_path, cond_tsv, cond_json, sim_path])
    }

    fn run_evaluate(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let features = self.load_features()?;
        let report = run_benchmark(&manifest, &features, &self.config.evaluate, self.exec)?;
        let outputs = [
            ("report.txt", report.to_text().into_bytes()),
            ("report.tsv", report.to_tsv().into_bytes()),
            ("raw_scores.tsv", report.raw_scores_tsv().into_bytes()),
            ("report.json", serde_json::to_vec_pretty(&report)?),
        ];
        let mut files = Vec::new();
        for (name, bytes) in outputs {
            let p = dir.join(name);
            atomic_write(&p, &bytes)?;
            files.push(p);
        }
        Ok(files)
    }

    /// Review inputs from a completed `stats` step.
    pub fn review_catalog(&self) -> Result<ReviewCatalog> {
        self.verify(Step::Stats)?;
        let manifest = self.load_manifest()?;
        let (features, model, assignments) = self.load_clustered()?;
        let mut clusters = vec![Vec::new(); model.k];
        for (id, &c) in features.image_ids.iter().zip(&assignments) {
            let v = manifest.visit(id).expect("extracted ids come from the manifest");
            clusters[c].push(Member {
                image_id: id.clone(),
                patient_id: v.patient_id.clone(),
            });
        }
        let cond_path = self.step_dir(Step::Stats).join("conditional.json");
        let conditional: ConditionalMatrix = serde_json::from_slice(&read(&cond_path)?)?;
        Ok(ReviewCatalog {
            clusters,
            conditional: Some(conditional),
        })
    }

    pub fn load_probe(&self) -> Result<LinearProbe> {
        let p = self.step_dir(Step::Attribute).join("probe.json");
        Ok(serde_json::from_slice(&read(&p)?)?)
    }
}

fn visit_values<T>(
    manifest: &CohortManifest,
    ids: &[String],
    f: impl Fn(&crate::synth::VisitRecord) -> Option<T>,
) -> Result<Vec<Option<T>>> {
    ids.iter()
        .map(|id| {
            manifest
                .visit(id)
                .map(&f)
                .ok_or_else(|| Error::Stale(format!("image {id} is not in the manifest; rerun `extract`")))
        })
        .collect()
}
