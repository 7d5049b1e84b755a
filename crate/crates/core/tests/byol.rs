use biomarker_core::augment::AugmentConfig;
use biomarker_core::nn::EncoderSpec;
use biomarker_core::ssl::{ByolModel, ByolTrainer, TrainConfig};
use biomarker_core::{Exec, GrayImage};

fn pattern(h: usize, w: usize, k: usize) -> GrayImage {
    let data = (0..h * w)
        .map(|i| ((i * 7 + k * 13) % 29) as f32 / 29.0)
        .collect();
    GrayImage::from_vec(h, w, data).unwrap()
}

#[test]
fn online_gradient_matches_central_differences() {
    let spec = EncoderSpec::toy((8, 8), 3);
    let cfg = TrainConfig::default();
    let model = ByolModel::new(&spec, &cfg).unwrap();
    let online = model.init_online(3);
    let mut target = online[..model.target_len()].to_vec();
    target.iter_mut().enumerate().for_each(|(i, t)| *t += 0.01 * ((i % 5) as f64 - 2.0));
    let pairs: Vec<_> = (0..3).map(|k| (pattern(8, 8, 2 * k), pattern(8, 8, 2 * k + 1))).collect();
    let exec = Exec::Sequential;
    let (_, analytic) = model
        .batch_loss_and_grad(&online, &target, &pairs, true, exec)
        .unwrap();

    let h = 1e-6;
    let mut numeric = vec![0.0; online.len()];
    let mut p = online.clone();
    for i in 0..online.len() {
        p[i] = online[i] + h;
        let up = model.batch_loss(&p, &target, &pairs, exec).unwrap();
        p[i] = online[i] - h;
        let down = model.batch_loss(&p, &target, &pairs, exec).unwrap();
        p[i] = online[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(norm > 1e-6);
    assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
}

#[test]
fn symmetrized_loss_is_invariant_to_view_swap() {
    let spec = EncoderSpec::toy((8, 8), 3);
    let model = ByolModel::new(&spec, &TrainConfig::default()).unwrap();
    let online = model.init_online(9);
    let target: Vec<f64> = online[..model.target_len()].iter().map(|v| v * 0.9).collect();
    let pairs: Vec<_> = (0..4).map(|k| (pattern(8, 8, k), pattern(8, 8, k + 10))).collect();
    let swapped: Vec<_> = pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
    let a = model.batch_loss(&online, &target, &pairs, Exec::Sequential).unwrap();
    let b = model.batch_loss(&online, &target, &swapped, Exec::Sequential).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn target_follows_ema_of_online_history() {
    let data: Vec<GrayImage> = (0..6).map(|k| pattern(16, 16, k)).collect();
    let spec = EncoderSpec::toy((12, 12), 4);
    let cfg = TrainConfig {
        steps: 10,
        batch_size: 3,
        ema_tau: 0.9,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = ByolTrainer::new(&data, &spec, &AugmentConfig::default(), &cfg).unwrap();
    let n = tr.model.target_len();
    let mut expected = tr.online[..n].to_vec();
    for _ in 0..10 {
        tr.step().unwrap();
        for (e, o) in expected.iter_mut().zip(&tr.online[..n]) {
            *e = 0.9 * *e + 0.1 * o;
        }
    }
    let max_err = expected
        .iter()
        .zip(&tr.target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_err < 1e-12, "max deviation {max_err}");
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let data: Vec<GrayImage> = (0..5).map(|k| pattern(16, 16, k)).collect();
    let spec = EncoderSpec::toy((12, 12), 4);
    let run = |exec| {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            exec,
            ..TrainConfig::default()
        };
        biomarker_core::ssl::train(&data, &spec, &AugmentConfig::default(), &cfg)
            .unwrap()
            .checkpoint
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Parallel);
    assert_eq!(a.online, b.online);
    assert_eq!(a.target, b.target);
}
