use pn2v::data::{synth_dataset, SynthSpec};
use pn2v::evaluation::{evaluate_set, MetricKind};
use pn2v::inference::{denoise_image, DenoiseMode, TilingConfig};
use pn2v::network::UNetConfig;
use pn2v::noise_model::{build_histogram, load_noise_model, save_noise_model};
use pn2v::training::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainData, TrainMode};
use pn2v::Checkpoint32;

fn small_net(k: usize) -> UNetConfig {
    UNetConfig { depth: 2, in_channels: 1, out_channels: k, base_features: 4, kernel_size: 3, seed: 1 }
}

fn small_train(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 3,
        steps_per_epoch: 3,
        batch_size: 2,
        patch_size: 32,
        n_masked: 16,
        val_patches: 4,
        val_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn synth_to_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { size: 48, n_images: 4, sigma: 20.0, seed: 3, ..SynthSpec::default() };
    let (clean, noisy) = synth_dataset(&spec).unwrap();
    let pairs: Vec<_> = clean.iter().cloned().zip(noisy.iter().cloned()).collect();
    let model = build_histogram(&pairs, 64, 64, None).unwrap().model;
    let nm_path = dir.path().join("nm");
    save_noise_model(&model, &nm_path).unwrap();
    let model = load_noise_model(&nm_path).unwrap();

    let data = TrainData { noisy: &noisy, clean: None, noise_model: Some(&model) };
    let mut log = Vec::new();
    let out = train::<f32>(&small_train(TrainMode::Pn2v), small_net(8), data, |e| log.push(e.clone())).unwrap();
    assert_eq!(log.len(), 3);
    let best = log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.checkpoint.best_val, best);
    assert_eq!(out.checkpoint.noise_model_digest.as_deref(), Some(model.digest().as_str()));

    let ck_path = dir.path().join("ck");
    save_checkpoint(&out.checkpoint, &ck_path).unwrap();
    let ck: Checkpoint32 = load_checkpoint(&ck_path).unwrap();
    assert_eq!(ck, out.checkpoint);

    let tiling = TilingConfig::for_network(ck.net.config(), 16);
    let mut preds = Vec::new();
    for x in &noisy {
        let d = denoise_image(&ck, x, &tiling, DenoiseMode::Mmse, Some(&model), &[(0, 0), (47, 47)]).unwrap();
        assert_eq!(d.image.shape(), x.shape());
        assert!(d.image.pixels().iter().all(|v| v.is_finite()));
        for p in &d.posteriors {
            assert_eq!(p.estimate() as f32, d.image.get(p.row, p.col));
            assert_eq!(p.to_string().parse::<pn2v::inference::PixelPosterior>().unwrap(), *p);
        }
        preds.push(d.image);
    }
    let report = evaluate_set(&preds, &clean, MetricKind::Psnr).unwrap();
    assert_eq!(report.values.len(), 4);
    assert!(report.mean.is_finite());
}

#[test]
fn supervised_and_n2v_checkpoints_denoise_directly() {
    let spec = SynthSpec { size: 32, n_images: 3, seed: 9, ..SynthSpec::default() };
    let (clean, noisy) = synth_dataset(&spec).unwrap();
    for mode in [TrainMode::N2v, TrainMode::Supervised] {
        let data = TrainData { noisy: &noisy, clean: Some(&clean), noise_model: None };
        let out = train::<f32>(&small_train(mode), small_net(1), data, |_| {}).unwrap();
        assert_eq!(out.checkpoint.mode, mode);
        assert!(out.checkpoint.noise_model_digest.is_none());
        let tiling = TilingConfig::for_network(out.checkpoint.net.config(), 16);
        let d = denoise_image(&out.checkpoint, &noisy[0], &tiling, DenoiseMode::N2vDirect, None, &[]).unwrap();
        assert_eq!(d.image.shape(), (32, 32));
        assert!(denoise_image(&out.checkpoint, &noisy[0], &tiling, DenoiseMode::PriorMean, None, &[]).is_err());
    }
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let spec = SynthSpec { size: 32, n_images: 3, seed: 4, ..SynthSpec::default() };
    let (_, noisy) = synth_dataset(&spec).unwrap();
    let data = TrainData { noisy: &noisy, clean: None, noise_model: None };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train::<f32>(&small_train(TrainMode::N2v), small_net(1), data, |_| {}).unwrap())
    };
    assert_eq!(run(1).checkpoint.to_bytes(), run(3).checkpoint.to_bytes());
}
