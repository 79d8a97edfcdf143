use std::fs;
use std::path::Path;

use kbpn::checkpoint::{load_params, resolve_checkpoint, PARAMS_FILE};
use kbpn::degradation::{degrade, gaussian_kernel, GaussianSpec};
use kbpn::eval::{benchmark_images, BenchSpec, BENCH_CSV_HEADER};
use kbpn::exec::Exec;
use kbpn::imaging::{save_image, BitDepth};
use kbpn::model::Model;
use kbpn::networks::{NetworkConfig, Variant};
use kbpn::synthetic::{synthetic_image, synthetic_pool};
use kbpn::training::{load_pools, train, SyntheticData, TrainConfig, METRICS_FILE};

fn tiny_network(variant: Variant, stages: usize) -> NetworkConfig {
    NetworkConfig { variant, stages, base_channels: 8, ..NetworkConfig::default() }
}

fn tiny_train(variant: Variant, dir: &Path, exec: Exec) -> TrainConfig {
    TrainConfig {
        network: tiny_network(variant, 2),
        batch_size: 2,
        total_steps: 4,
        lr_patch_size: 16,
        synthetic: SyntheticData { train_images: 2, val_images: 1, size: 64, seed: Some(3) },
        checkpoint_dir: dir.to_path_buf(),
        checkpoint_every: 2,
        eval_every: 2,
        val_samples: 1,
        exec,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn spec(scale: usize) -> BenchSpec {
    BenchSpec {
        dataset_dir: Default::default(),
        blurs: vec![GaussianSpec::isotropic(1.3), GaussianSpec { sigma_x: 2.0, sigma_y: 0.8, theta: 0.6 }],
        scale,
        kernel_size: 21,
        down_mode: Default::default(),
        crop_border: None,
        luma_only: true,
    }
}

#[test]
fn forward_is_bit_identical_for_the_same_seed() {
    for variant in Variant::ALL {
        let cfg = tiny_network(variant, 3);
        let lr = degrade(&synthetic_image(64, 64, 1), &gaussian_kernel(&GaussianSpec::isotropic(2.0), 21).unwrap(), 4, cfg.down_mode).unwrap();
        let pca = (variant == Variant::Kcbpn).then(|| kbpn::degradation::KernelPca::fit_distribution(&cfg.kernel_prior, 21, cfg.code_dim, 200, 0).unwrap());
        let a = Model::init(&cfg, 5, pca.clone()).unwrap().forward(&lr).unwrap();
        let b = Model::init(&cfg, 5, pca).unwrap().forward(&lr).unwrap();
        assert_eq!(a.sr.data(), b.sr.data(), "{variant}");
        assert_eq!(a.kernel, b.kernel, "{variant}");
        assert_eq!(a.code, b.code, "{variant}");
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.features.data(), y.features.data(), "{variant}");
        }
    }
}

#[test]
fn deep_networks_stay_finite() {
    for variant in Variant::ALL {
        let cfg = NetworkConfig { variant, stages: 7, base_channels: 16, ..NetworkConfig::default() };
        let pca = (variant == Variant::Kcbpn).then(|| kbpn::degradation::KernelPca::fit_distribution(&cfg.kernel_prior, 21, cfg.code_dim, 200, 0).unwrap());
        let model = Model::init(&cfg, 2, pca).unwrap();
        let lr = synthetic_image(16, 16, 9);
        let out = model.forward(&lr).unwrap();
        assert!(out.sr.all_finite(), "{variant}");
        assert!(out.traces.iter().all(|t| t.features.data().iter().all(|v| v.is_finite())), "{variant}");
    }
}

#[test]
fn benchmark_is_deterministic_and_exec_independent() {
    let model = Model::init(&tiny_network(Variant::Kbpn, 2), 4, None).unwrap();
    let images = synthetic_pool(3, 64, 80, 2);
    let s = spec(4);
    let a = benchmark_images(&model, &images, &s, Exec::Sequential).unwrap();
    let b = benchmark_images(&model, &images, &s, Exec::Sequential).unwrap();
    let c = benchmark_images(&model, &images, &s, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let csv = a.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], BENCH_CSV_HEADER);
    assert_eq!(lines.len(), 1 + s.blurs.len());
    assert!(a.rows.iter().all(|r| r.kernel_l1.is_some() && r.images == 3));
}

#[test]
fn training_is_reproducible_across_exec_modes() {
    for variant in Variant::ALL {
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let modes = [Exec::Sequential, Exec::Sequential, Exec::Parallel];
        let mut metrics = Vec::new();
        let mut params = Vec::new();
        for (dir, exec) in dirs.iter().zip(modes) {
            let report = train(tiny_train(variant, dir.path(), exec), |_| {}).unwrap();
            assert_eq!(report.steps, 4);
            assert_eq!(report.evals.len(), 2, "{variant}");
            metrics.push(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap());
            let ckpt = resolve_checkpoint(dir.path()).unwrap();
            params.push(fs::read(ckpt.join(PARAMS_FILE)).unwrap());
            load_params::<f32>(ckpt.join(PARAMS_FILE)).unwrap();
        }
        assert_eq!(metrics[0].lines().count(), 5, "{variant}");
        assert_eq!(metrics[0], metrics[1], "{variant}");
        assert_eq!(metrics[0], metrics[2], "{variant}");
        assert_eq!(params[0], params[1], "{variant}");
        assert_eq!(params[0], params[2], "{variant}");
    }
}

#[test]
fn shared_train_and_validation_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train_dir, val_dir) = (dir.path().join("train"), dir.path().join("val"));
    fs::create_dir_all(&train_dir).unwrap();
    fs::create_dir_all(&val_dir).unwrap();
    for i in 0..2 {
        save_image(&synthetic_image(32, 32, i), train_dir.join(format!("{i}.png")), BitDepth::Eight).unwrap();
    }
    save_image(&synthetic_image(32, 32, 7), val_dir.join("7.png"), BitDepth::Eight).unwrap();
    let mut cfg = TrainConfig { dataset_dir: Some(train_dir.clone()), val_dir: Some(val_dir), ..TrainConfig::default() };
    let (train, val) = load_pools(&cfg).unwrap();
    assert_eq!((train.len(), val.len()), (2, 1));
    cfg.val_dir = Some(train_dir);
    assert!(load_pools(&cfg).is_err());
}
