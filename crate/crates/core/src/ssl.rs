//! BYOL self-supervised training of the encoder.
//!
//! The online network (encoder, projector, predictor) predicts the target
//! network's projection of the other view; the loss is symmetrized over
//! the two views and the target side is held constant. After each Adam
//! step on the online weights, the target weights follow by exponential
//! moving average.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, AugmentConfig};
use crate::digest;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::GrayImage;
use crate::nn::{Encoder, EncoderSpec, Mlp};
use crate::rng;

/// `2 - 2 cos(prediction, target)`, in `[0, 4]`.
pub fn byol_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    let (loss, _) = byol_loss_and_grad(prediction, target)?;
    Ok(loss)
}

/// Loss and its gradient with respect to `prediction`; `target` is constant.
pub fn byol_loss_and_grad(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() {
        return Err(Error::Shape {
            expected: format!("{}", prediction.len()),
            actual: format!("{}", target.len()),
        });
    }
    let np = prediction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(Error::invalid("byol loss of a zero-norm vector"));
    }
    let dot: f64 = prediction.iter().zip(target).map(|(a, b)| a * b).sum();
    let cos = dot / (np * nt);
    let loss = 2.0 - 2.0 * cos.clamp(-1.0, 1.0);
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| -2.0 * (t / (np * nt) - cos * p / (np * np)))
        .collect();
    Ok((loss, grad))
}

/// `target <- tau * target + (1 - tau) * online`, elementwise.
pub fn ema_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::Shape {
            expected: format!("{} parameters", target.len()),
            actual: format!("{}", online.len()),
        });
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * *t + (1.0 - tau) * o;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSchedule {
    Constant,
    /// Cosine increase from `ema_tau` to 1 over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `learning_rate` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub ema_tau: f64,
    pub ema_schedule: EmaSchedule,
    /// Projector/predictor hidden width; defaults to 4x the feature dimension.
    pub mlp_hidden: Option<usize>,
    /// Projection width; defaults to the feature dimension.
    pub projection_dim: Option<usize>,
    /// Batch normalization on the projector and predictor hidden layers.
    pub head_batch_norm: bool,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1.5e-6,
            ema_tau: 0.99,
            ema_schedule: EmaSchedule::Constant,
            mlp_hidden: None,
            projection_dim: None,
            head_batch_norm: true,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.head_batch_norm && self.batch_size < 2) {
            return Err(Error::invalid("batch_size must be at least 2 with batch norm, 1 without"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(Error::invalid("ema_tau must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0,1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                self.learning_rate * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
            }
        }
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match self.ema_schedule {
            EmaSchedule::Constant => self.ema_tau,
            EmaSchedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                1.0 - (1.0 - self.ema_tau) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
            }
        }
    }
}

/// Parameter layout of the online and target networks. The target vector
/// is the `[encoder | projector]` prefix of the online layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ByolModel {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Mlp,
}

/// Two augmented views of one image.
pub type ViewPair = (GrayImage, GrayImage);

impl ByolModel {
    pub fn new(spec: &EncoderSpec, config: &TrainConfig) -> Result<Self> {
        let encoder = Encoder::new(spec, 0)?;
        let d = spec.feature_dim;
        let hidden = config.mlp_hidden.unwrap_or(4 * d);
        let proj = config.projection_dim.unwrap_or(d);
        if hidden == 0 || proj == 0 {
            return Err(Error::invalid("projector sizes must be positive"));
        }
        let bn = config.head_batch_norm;
        let projector = Mlp::with_norm(d, hidden, proj, bn, encoder.end());
        let predictor = Mlp::with_norm(proj, hidden, proj, bn, projector.end());
        Ok(Self {
            encoder,
            projector,
            predictor,
        })
    }

    pub fn online_len(&self) -> usize {
        self.predictor.end()
    }

    pub fn target_len(&self) -> usize {
        self.projector.end()
    }

    pub fn init_online(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::derive(seed, "init", 0);
        let mut params = vec![0.0; self.online_len()];
        self.encoder.init(&mut params, &mut r);
        self.projector.init(&mut params, &mut r);
        self.predictor.init(&mut params, &mut r);
        params
    }

    /// Mean symmetrized loss over a batch of view pairs.
    pub fn batch_loss(&self, online: &[f64], target: &[f64], pairs: &[ViewPair], exec: Exec) -> Result<f64> {
        Ok(self.batch_loss_and_grad(online, target, pairs, false, exec)?.0)
    }

    /// Mean symmetrized loss and, when `with_grad`, its gradient with
    /// respect to the online parameters. The target side is constant.
    pub fn batch_loss_and_grad(
        &self,
        online: &[f64],
        target: &[f64],
        pairs: &[ViewPair],
        with_grad: bool,
        exec: Exec,
    ) -> Result<(f64, Vec<f64>)> {
        let b = pairs.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let passes = exec.map_slice(pairs, |(v1, v2)| {
            let t1 = self.encoder.forward(target, v1).output;
            let t2 = self.encoder.forward(target, v2).output;
            (self.encoder.forward(online, v1), self.encoder.forward(online, v2), t1, t2)
        });
        let enc_out = |view: usize| -> Vec<Vec<f64>> {
            passes
                .iter()
                .map(|p| if view == 0 { p.0.output.clone() } else { p.1.output.clone() })
                .collect()
        };
        let target_out = |view: usize| -> Vec<Vec<f64>> {
            passes
                .iter()
                .map(|p| if view == 0 { p.2.clone() } else { p.3.clone() })
                .collect()
        };
        let proj = [
            self.projector.forward_batch(online, &enc_out(0)),
            self.projector.forward_batch(online, &enc_out(1)),
        ];
        let pred = [
            self.predictor.forward_batch(online, &proj[0].outputs),
            self.predictor.forward_batch(online, &proj[1].outputs),
        ];
        let target_proj = [
            self.projector.forward_batch(target, &target_out(0)).outputs,
            self.projector.forward_batch(target, &target_out(1)).outputs,
        ];
        let mut total = 0.0;
        let mut d_pred = [Vec::with_capacity(b), Vec::with_capacity(b)];
        for j in 0..b {
            for view in 0..2 {
                let (loss, mut g) = byol_loss_and_grad(&pred[view].outputs[j], &target_proj[1 - view][j])?;
                total += loss;
                g.iter_mut().for_each(|v| *v /= b as f64);
                d_pred[view].push(g);
            }
        }
        let loss = total / b as f64;
        if !with_grad {
            return Ok((loss, Vec::new()));
        }
        let mut grads = vec![0.0; self.online_len()];
        let mut d_enc = Vec::with_capacity(2);
        for view in 0..2 {
            let d_proj = self
                .predictor
                .backward_batch(online, &pred[view], &d_pred[view], Some(&mut grads));
            d_enc.push(
                self.projector
                    .backward_batch(online, &proj[view], &d_proj, Some(&mut grads)),
            );
        }
        let enc_len = self.encoder.end();
        let per_sample = exec.map_range(b, |j| {
            let mut g = vec![0.0; enc_len];
            self.encoder.backward(online, &passes[j].0, &d_enc[0][j], &mut g);
            self.encoder.backward(online, &passes[j].1, &d_enc[1][j], &mut g);
            g
        });
        for g in per_sample {
            grads[..enc_len].iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
        }
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One Adam step at rate `lr` with L2 weight decay added to the gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + cfg.weight_decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Training loop state. Drive it with [`ByolTrainer::step`] or [`train`].
pub struct ByolTrainer<'a> {
    pub model: ByolModel,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub adam: Adam,
    pub step: usize,
    pub loss_trace: Vec<(usize, f64)>,
    dataset: &'a [GrayImage],
    augment: AugmentConfig,
    config: TrainConfig,
}

impl<'a> ByolTrainer<'a> {
    pub fn new(
        dataset: &'a [GrayImage],
        encoder_spec: &EncoderSpec,
        augment: &AugmentConfig,
        config: &TrainConfig,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        config.validate()?;
        augment.validate()?;
        let model = ByolModel::new(encoder_spec, config)?;
        let online = model.init_online(config.seed);
        let target = online[..model.target_len()].to_vec();
        let mut augment = augment.clone();
        // Views are produced directly at the encoder's input size.
        augment.output_size = encoder_spec.input_size;
        Ok(Self {
            adam: Adam::new(online.len()),
            model,
            online,
            target,
            step: 0,
            loss_trace: Vec::new(),
            dataset,
            augment,
            config: config.clone(),
        })
    }

    /// Runs one optimization step and returns its mean symmetrized loss.
    pub fn step(&mut self) -> Result<f64> {
        let n = self.dataset.len();
        let batch = self.config.batch_size;
        let mut batch_rng = rng::derive(self.config.seed, "batch", self.step as u64);
        let indices: Vec<usize> = if batch <= n {
            sample(&mut batch_rng, n, batch).into_vec()
        } else {
            use rand::Rng as _;
            (0..batch).map(|_| batch_rng.random_range(0..n)).collect()
        };
        let step = self.step as u64;
        let pairs = self.config.exec.map_range(indices.len(), |j| {
            let mut r = rng::derive(self.config.seed, "augment", step * batch as u64 + j as u64);
            make_pair(&self.dataset[indices[j]], &self.augment, &mut r).map(|(a, b)| (a.image, b.image))
        });
        let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
        let (loss, grads) = self
            .model
            .batch_loss_and_grad(&self.online, &self.target, &pairs, true, self.config.exec)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let lr = self.config.lr_at(self.step);
        self.adam.step(&mut self.online, &grads, &self.config, lr);
        let tau = self.config.tau_at(self.step);
        let target_len = self.model.target_len();
        ema_update(&mut self.target, &self.online[..target_len], tau)?;
        self.loss_trace.push((self.step, loss));
        self.step += 1;
        Ok(loss)
    }

    pub fn finish(self) -> TrainOutcome {
        let enc_len = self.model.encoder.param_len();
        TrainOutcome {
            checkpoint: Checkpoint {
                encoder_spec: self.model.encoder.spec.clone(),
                train_config: self.config,
                step: self.step,
                online: self.online,
                target: self.target,
            },
            encoder_len: enc_len,
            loss_trace: self.loss_trace,
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    encoder_len: usize,
    pub loss_trace: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn encoder(&self) -> Result<EncoderWeights> {
        let encoder = Encoder::new(&self.checkpoint.encoder_spec, 0)?;
        debug_assert_eq!(encoder.param_len(), self.encoder_len);
        Ok(EncoderWeights {
            params: self.checkpoint.online[..encoder.param_len()].to_vec(),
            encoder,
            fingerprint: self.checkpoint.fingerprint(),
        })
    }
}

/// Runs the full BYOL loop. `steps == 0` returns the initialized encoder
/// and an empty trace.
pub fn train(
    dataset: &[GrayImage],
    encoder_spec: &EncoderSpec,
    augment: &AugmentConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = ByolTrainer::new(dataset, encoder_spec, augment, config)?;
    for _ in 0..config.steps {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

/// A trained encoder ready for feature extraction and attribution.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub encoder: Encoder,
    pub params: Vec<f64>,
    /// Fingerprint of the checkpoint the weights came from.
    pub fingerprint: String,
}

const CHECKPOINT_MAGIC: &str = "byol-checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    encoder_spec: EncoderSpec,
    train_config: TrainConfig,
    step: usize,
    online_len: usize,
    target_len: usize,
}

/// Encoder spec, training recipe, step counter and all online and target
/// parameters.
///
/// On disk: one JSON header line, then the online and target parameters as
/// little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder_spec: EncoderSpec,
    pub train_config: TrainConfig,
    pub step: usize,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_MAGIC.into(),
            version: 1,
            encoder_spec: self.encoder_spec.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            online_len: self.online.len(),
            target_len: self.target.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in self.online.iter().chain(&self.target) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_MAGIC || header.version != 1 {
            return Err(corrupt("not a checkpoint"));
        }
        let body = &bytes[nl + 1..];
        if body.len() != 8 * (header.online_len + header.target_len) {
            return Err(corrupt("parameter block has the wrong length"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (online, target) = values.split_at(header.online_len);
        let model = ByolModel::new(&header.encoder_spec, &header.train_config)?;
        if model.online_len() != header.online_len || model.target_len() != header.target_len {
            return Err(corrupt("parameter count does not match the encoder spec"));
        }
        Ok(Self {
            encoder_spec: header.encoder_spec,
            train_config: header.train_config,
            step: header.step,
            online: online.to_vec(),
            target: target.to_vec(),
        })
    }

    pub fn fingerprint(&self) -> String {
        digest::fingerprint(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn encoder_weights(&self) -> Result<EncoderWeights> {
        let encoder = Encoder::new(&self.encoder_spec, 0)?;
        Ok(EncoderWeights {
            params: self.online[..encoder.param_len()].to_vec(),
            encoder,
            fingerprint: self.fingerprint(),
        })
    }
}

/// Writes the loss trace as `step loss` lines.
pub fn save_loss_trace(trace: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut s = String::from("step\tloss\n");
    for (step, loss) in trace {
        s.push_str(&format!("{step}\t{loss}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_cases() {
        let a = [1.0, 2.0, -0.5];
        assert!(byol_loss(&a, &a).unwrap().abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((byol_loss(&a, &neg).unwrap() - 4.0).abs() < 1e-9);
        assert!((byol_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 2.0).abs() < 1e-9);
        assert!(byol_loss(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ema_cases() {
        let online = [2.0, 2.0];
        let mut t = [0.0, 0.0];
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, [0.0, 0.0]);
        ema_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t, [1.0, 1.0]);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, online);
        assert!(ema_update(&mut t, &[1.0], 0.5).is_err());
    }

    #[test]
    fn cosine_schedule_ends_at_one() {
        let cfg = TrainConfig {
            steps: 100,
            ema_schedule: EmaSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert!((cfg.tau_at(0) - cfg.ema_tau).abs() < 1e-12);
        assert!((cfg.tau_at(100) - 1.0).abs() < 1e-12);
    }

    fn tiny_dataset(n: usize) -> Vec<GrayImage> {
        (0..n)
            .map(|k| {
                let data = (0..144).map(|i| (((i + 5 * k) * 31) % 23) as f32 / 23.0).collect();
                GrayImage::from_vec(12, 12, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialized_encoder() {
        let data = tiny_dataset(3);
        let spec = EncoderSpec::toy((12, 12), 4);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&data, &spec, &AugmentConfig::default(), &cfg).unwrap();
        assert!(out.loss_trace.is_empty());
        let model = ByolModel::new(&spec, &cfg).unwrap();
        assert_eq!(out.checkpoint.online, model.init_online(cfg.seed));
        assert!(train(&[], &spec, &AugmentConfig::default(), &cfg).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let data = tiny_dataset(4);
        let spec = EncoderSpec::toy((12, 12), 4);
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&data, &spec, &AugmentConfig::default(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        out.checkpoint.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.fingerprint(), digest::fingerprint_file(&p).unwrap());
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, &p).is_err());
    }

    #[test]
    fn target_never_gets_optimizer_updates() {
        // With tau = 1 the target must stay at its initial value.
        let data = tiny_dataset(4);
        let spec = EncoderSpec::toy((12, 12), 4);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            ema_tau: 1.0,
            ..TrainConfig::default()
        };
        let mut tr = ByolTrainer::new(&data, &spec, &AugmentConfig::default(), &cfg).unwrap();
        let t0 = tr.target.clone();
        let o0 = tr.online.clone();
        for _ in 0..3 {
            tr.step().unwrap();
        }
        assert_eq!(tr.target, t0);
        assert_ne!(tr.online, o0);
    }

    proptest! {
        #[test]
        fn loss_is_bounded_and_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 5),
            b in proptest::collection::vec(-10.0f64..10.0, 5),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let l = byol_loss(&a, &b).unwrap();
            prop_assert!((0.0..=4.0).contains(&l));
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((byol_loss(&scaled, &b).unwrap() - l).abs() < 1e-9);
            prop_assert!((byol_loss(&a, &scaled).unwrap() - byol_loss(&a, &a).unwrap()).abs() < 1e-9);
        }
    }
}
