use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kbpn::degradation::GaussianSpec;
use kbpn::eval::{benchmark_images, BenchSpec};
use kbpn::exec::Exec;
use kbpn::model::Model;
use kbpn::networks::{NetworkConfig, Variant};
use kbpn::synthetic::synthetic_pool;
use kbpn::training::{SyntheticData, TrainConfig, Trainer};

const MODES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn small_network() -> NetworkConfig {
    NetworkConfig { variant: Variant::Kbpn, stages: 2, base_channels: 16, ..NetworkConfig::default() }
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let dir = tempfile::tempdir().unwrap();
    let pool = synthetic_pool(4, 96, 96, 0);
    for exec in MODES {
        let cfg = TrainConfig {
            network: small_network(),
            batch_size: 4,
            lr_patch_size: 16,
            synthetic: SyntheticData { train_images: 4, val_images: 0, size: 96, seed: Some(0) },
            checkpoint_dir: dir.path().to_path_buf(),
            checkpoint_every: 0,
            eval_every: 0,
            val_samples: 0,
            exec,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, pool.clone(), &[]).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| b.iter(|| black_box(trainer.train_step().unwrap())));
    }
    group.finish();
}

fn benchmark(c: &mut Criterion) {
    let mut group = c.benchmark_group("benchmark_images");
    group.sample_size(10);
    let model = Model::init(&small_network(), 0, None).unwrap();
    let images = synthetic_pool(4, 64, 64, 1);
    let spec = BenchSpec {
        dataset_dir: Default::default(),
        blurs: [0.2, 1.3, 2.6, 4.0].map(GaussianSpec::isotropic).to_vec(),
        scale: 4,
        kernel_size: 21,
        down_mode: Default::default(),
        crop_border: None,
        luma_only: true,
    };
    for exec in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| b.iter(|| black_box(benchmark_images(&model, &images, &spec, exec).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, train_step, benchmark);
criterion_main!(benches);
